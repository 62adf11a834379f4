"""Envelope extraction, linear stimulus-reconstruction decoding, and
correlation-based attended-speaker selection.

The decoder is a lagged linear map from multichannel EEG to the attended
speech envelope, trained by ridge regression. Selection correlates the
reconstruction against each candidate reference envelope and picks the
argmax. A seeded synthetic-EEG generator stands in for recorded data so the
whole chain can be exercised end to end.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

__all__ = [
    "UndefinedCorrelationError",
    "Decoder",
    "SpeakerSelection",
    "Trial",
    "TrialSet",
    "extract_envelope",
    "train_decoder",
    "reconstruct_envelope",
    "pearson",
    "select_speaker",
    "synthesize_eeg",
    "make_synthetic_trial_set",
    "train_decoder_on_trials",
    "decode_trials",
    "selection_accuracy",
]


class UndefinedCorrelationError(ValueError):
    """Pearson correlation undefined (zero variance input)."""


def extract_envelope(signal, rate_in, rate_out=64):
    """Slow amplitude envelope: rectify, 8 Hz low-pass (zero-phase, effective
    4th order), resample to ``rate_out``. Output is nonnegative."""
    signal = np.asarray(signal, dtype=float)
    if signal.size == 0:
        raise ValueError("empty signal")
    if rate_out > rate_in:
        raise ValueError("rate_out must not exceed rate_in")
    env = np.abs(signal)
    if rate_in > 16:
        sos = scipy.signal.butter(2, 8.0, fs=rate_in, output="sos")
        env = scipy.signal.sosfiltfilt(sos, env)
    if rate_out != rate_in:
        g = math.gcd(int(rate_out), int(rate_in))
        env = scipy.signal.resample_poly(env, int(rate_out) // g, int(rate_in) // g)
    return np.clip(env, 0.0, None)


def _lag_indices(lag_range_ms, rate):
    lo = int(round(lag_range_ms[0] * 1e-3 * rate))
    hi = int(round(lag_range_ms[1] * 1e-3 * rate))
    if lo < 0 or hi < lo:
        raise ValueError(f"bad lag range {lag_range_ms}")
    return np.arange(lo, hi + 1)


def _zscore(eeg):
    mean = eeg.mean(axis=1, keepdims=True)
    std = eeg.std(axis=1, keepdims=True)
    std[std == 0] = 1.0
    return (eeg - mean) / std


def _design_matrix(eeg, lags):
    """Lagged EEG features: row l holds eeg[c, l + lag] for all (c, lag)."""
    n_ch, n = eeg.shape
    valid = n - lags[-1]
    if valid < 1:
        raise ValueError("EEG shorter than the decoder lag span")
    cols = [eeg[c, lag : lag + valid] for c in range(n_ch) for lag in lags]
    return np.stack(cols, axis=1)


@dataclass
class Decoder:
    """Spatio-temporal reconstruction filter: weights (channels, lags)."""

    weights: np.ndarray
    lags: np.ndarray
    rate: float
    zscore: bool = True

    @property
    def n_channels(self):
        return self.weights.shape[0]


def train_decoder(eeg_trials, attended_envelopes, lag_range_ms=(0.0, 250.0), ridge=100.0, rate=64):
    """Ridge regression from lagged EEG to the attended envelope.

    ``ridge`` scales relative to the mean lagged-feature power, so the
    regularization strength is invariant to the EEG amplitude scale. EEG
    channels are z-scored per trial before building features.
    """
    if len(eeg_trials) == 0 or len(eeg_trials) != len(attended_envelopes):
        raise ValueError("need matching, nonempty EEG and envelope trial lists")
    lags = _lag_indices(lag_range_ms, rate)
    dim = None
    normal = cross = None
    n_rows = 0
    for eeg, env in zip(eeg_trials, attended_envelopes):
        eeg = np.asarray(eeg, dtype=float)
        env = np.asarray(env, dtype=float)
        if eeg.shape[1] != env.shape[0]:
            raise ValueError(
                f"trial length mismatch: EEG {eeg.shape[1]}, envelope {env.shape[0]}"
            )
        x = _design_matrix(_zscore(eeg), lags)
        e = env[: x.shape[0]]
        if dim is None:
            dim = x.shape[1]
            normal = np.zeros((dim, dim))
            cross = np.zeros(dim)
        normal += x.T @ x
        cross += x.T @ e
        n_rows += x.shape[0]
    normal /= n_rows
    cross /= n_rows
    penalty = ridge * float(np.mean(np.diag(normal)))
    w = np.linalg.solve(normal + penalty * np.eye(dim), cross)
    n_ch = np.asarray(eeg_trials[0]).shape[0]
    return Decoder(w.reshape(n_ch, lags.size), lags, rate)


def reconstruct_envelope(eeg, decoder):
    """Apply the decoder over lagged EEG; output covers the valid region
    (input length minus the maximum lag)."""
    eeg = np.asarray(eeg, dtype=float)
    if eeg.shape[0] != decoder.n_channels:
        raise ValueError(
            f"EEG has {eeg.shape[0]} channels, decoder expects {decoder.n_channels}"
        )
    if decoder.zscore:
        eeg = _zscore(eeg)
    x = _design_matrix(eeg, decoder.lags)
    return x @ decoder.weights.ravel()


def pearson(a, b):
    """Pearson correlation of two equal-length sequences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two 1-D sequences of equal length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.linalg.norm(ac) * np.linalg.norm(bc)
    if denom == 0.0:
        raise UndefinedCorrelationError("zero-variance input")
    return float(np.dot(ac, bc) / denom)


@dataclass
class SpeakerSelection:
    index: int
    correlations: np.ndarray  # NaN where a candidate was excluded
    tie: bool = False
    excluded: tuple = ()


def select_speaker(reference_envelopes, reconstructed):
    """Pick the candidate envelope most correlated with the reconstruction.

    Candidates with undefined correlation are excluded and flagged; exact
    ties resolve to the lowest index with the tie flag set.
    """
    if len(reference_envelopes) < 2:
        raise ValueError("need at least two candidate envelopes")
    rho = np.full(len(reference_envelopes), np.nan)
    excluded = []
    for i, env in enumerate(reference_envelopes):
        env = np.asarray(env, dtype=float)[: len(reconstructed)]
        try:
            rho[i] = pearson(env, reconstructed)
        except UndefinedCorrelationError:
            excluded.append(i)
    if np.all(np.isnan(rho)):
        raise UndefinedCorrelationError("every candidate correlation undefined")
    best = int(np.nanargmax(rho))
    tie = bool(np.sum(rho == rho[best]) > 1)
    return SpeakerSelection(best, rho, tie, tuple(excluded))


def _delayed(x, delay):
    out = np.zeros_like(x)
    if delay == 0:
        return x.copy()
    out[delay:] = x[:-delay]
    return out


def synthesize_eeg(
    attended,
    unattended,
    n_channels,
    snr_db,
    mixing_seed,
    noise_seed=None,
    rate=64,
    max_lag_ms=200.0,
    leakage=0.3,
):
    """Seeded stand-in for recorded EEG.

    Each channel carries a randomly weighted and delayed copy of the attended
    envelope, a weaker copy of the unattended one, and low-frequency Gaussian
    noise scaled so the attended component sits at ``snr_db``. The noise is
    band-matched to the envelope region (EEG background is dominated by slow
    activity), so ``snr_db`` states the ratio in the band a linear decoder
    can exploit; white noise would let long trials recover the envelope far
    below its nominal level. The mixing (delays, gains, signs) is drawn from
    ``mixing_seed`` alone, playing the role of one listener's fixed response
    geometry: reuse the same mixing seed across trials and only the noise
    changes. Delays stay inside the decoder's default lag span.
    """
    attended = np.asarray(attended, dtype=float)
    unattended = np.asarray(unattended, dtype=float)
    if attended.shape != unattended.shape:
        raise ValueError("envelope length mismatch")
    mix_rng = np.random.default_rng(mixing_seed)
    derived_noise_seed = mix_rng.integers(2**63)  # keep the mixing stream
    noise_rng = np.random.default_rng(
        noise_seed if noise_seed is not None else derived_noise_seed
    )
    n = attended.size
    max_lag = max(1, int(round(max_lag_ms * 1e-3 * rate)))
    sos = scipy.signal.butter(2, min(10.0, 0.4 * rate / 2), fs=rate, output="sos")

    # volume conduction: half the background power is shared across channels
    # through a per-listener coupling, so channel averaging cannot integrate
    # the noise away the way it could for independent sensor noise
    n_shared = 3
    coupling = mix_rng.standard_normal((n_channels, n_shared))
    coupling /= np.linalg.norm(coupling, axis=1, keepdims=True)
    shared = scipy.signal.sosfiltfilt(
        sos, noise_rng.standard_normal((n_shared, n)), axis=1
    )
    shared /= np.maximum(shared.std(axis=1, keepdims=True), 1e-12)

    eeg = np.empty((n_channels, n))
    for c in range(n_channels):
        gain_a = mix_rng.uniform(0.5, 1.0) * mix_rng.choice((-1.0, 1.0))
        gain_u = leakage * mix_rng.uniform(0.5, 1.0) * mix_rng.choice((-1.0, 1.0))
        comp = gain_a * _delayed(attended, int(mix_rng.integers(0, max_lag + 1)))
        comp += gain_u * _delayed(unattended, int(mix_rng.integers(0, max_lag + 1)))
        own = scipy.signal.sosfiltfilt(sos, noise_rng.standard_normal(n))
        own /= max(own.std(), 1e-12)
        noise = np.sqrt(0.5) * own + np.sqrt(0.5) * (coupling[c] @ shared)
        noise_std = max(comp.std(), 1e-12) * 10.0 ** (-snr_db / 20.0)
        eeg[c] = comp + noise_std * noise
    return eeg


@dataclass
class Trial:
    eeg: np.ndarray  # (channels, samples)
    candidate_envelopes: np.ndarray  # (speakers, samples)
    attended: int
    duration: float


@dataclass
class TrialSet:
    trials: list
    rate: float

    def __len__(self):
        return len(self.trials)


def make_synthetic_trial_set(
    envelopes,
    attended,
    rate=64,
    n_channels=16,
    snr_db=20.0,
    seed=0,
    trial_seconds=30.0,
):
    """Split candidate envelopes into fixed-length trials and attach
    synthetic EEG following the attended speaker.

    ``attended`` is a speaker index applied to all trials or one index per
    trial. ``seed`` plays the role of the listener: the EEG mixing is fixed
    across the whole set and only the per-trial noise differs, so a decoder
    trained on some trials of a set transfers to the rest.
    """
    envelopes = np.asarray(envelopes, dtype=float)
    n_spk, n = envelopes.shape
    per_trial = int(round(trial_seconds * rate))
    n_trials = n // per_trial
    if n_trials == 0:
        raise ValueError("envelopes shorter than one trial")
    labels = np.broadcast_to(np.asarray(attended, dtype=int), (n_trials,))
    trials = []
    for t in range(n_trials):
        seg = envelopes[:, t * per_trial : (t + 1) * per_trial]
        att = int(labels[t])
        others = [i for i in range(n_spk) if i != att]
        unattended = seg[others].mean(axis=0) if others else np.zeros(per_trial)
        eeg = synthesize_eeg(
            seg[att],
            unattended,
            n_channels,
            snr_db,
            mixing_seed=seed,
            noise_seed=np.random.SeedSequence((seed, t)),
            rate=rate,
        )
        trials.append(Trial(eeg, seg.copy(), att, trial_seconds))
    return TrialSet(trials, rate)


def train_decoder_on_trials(trial_set, lag_range_ms=(0.0, 250.0), ridge=100.0):
    eeg = [t.eeg for t in trial_set.trials]
    envs = [t.candidate_envelopes[t.attended] for t in trial_set.trials]
    return train_decoder(eeg, envs, lag_range_ms, ridge, trial_set.rate)


def decode_trials(trial_set, decoder):
    """Reconstruct and select per trial; returns a SpeakerSelection list."""
    selections = []
    for trial in trial_set.trials:
        recon = reconstruct_envelope(trial.eeg, decoder)
        candidates = [env[: recon.size] for env in trial.candidate_envelopes]
        selections.append(select_speaker(candidates, recon))
    return selections


def selection_accuracy(selections, trial_set):
    correct = [
        sel.index == trial.attended
        for sel, trial in zip(selections, trial_set.trials)
    ]
    return 100.0 * sum(correct) / len(correct)
