"""Frequency-weighted segmental SNR and decoding-accuracy measures.

The segmental SNR variant here frames both signals, measures per-band SNR of
the residual (test minus reference) against the reference in critical-style
bands, clamps each band SNR, and averages with reference-magnitude weights
over speech-active frames. All comparisons inside this package use the same
variant, so relative numbers are self-consistent.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

__all__ = [
    "FwssnrConfig",
    "fwssnr",
    "input_fwssnr",
    "DecodeOutcome",
    "decode_correct",
    "aad_accuracy",
    "chance_upper_bound",
    "PUBLISHED_CHANCE_BOUND_PCT",
]

# Chance-level upper bounds published for the original 40- and 20-trial
# listening-test conditions; reported next to our exact-binomial bound for
# comparison because the convention behind them is not reproducible exactly.
PUBLISHED_CHANCE_BOUND_PCT = {40: 61.39, 20: 66.19}


@dataclass(frozen=True)
class FwssnrConfig:
    frame_ms: float = 32.0
    overlap: float = 0.75
    n_bands: int = 25
    band_range_hz: tuple = (50.0, None)  # None = Nyquist
    clamp_db: tuple = (-10.0, 35.0)
    weight_exponent: float = 0.2
    active_range_db: float = 35.0  # frames this far below the peak are skipped
    reference_mic: int = 0

    def __post_init__(self):
        if self.clamp_db[0] >= self.clamp_db[1]:
            raise ValueError("clamp range must satisfy lo < hi")
        if self.n_bands < 1:
            raise ValueError("need at least one band")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _band_matrix(cfg, n_fft, sample_rate):
    """Triangular mel-spaced filters (n_bands, n_bins), unit peak."""
    lo = cfg.band_range_hz[0]
    hi = cfg.band_range_hz[1] if cfg.band_range_hz[1] is not None else sample_rate / 2
    edges = _mel_to_hz(np.linspace(_hz_to_mel(lo), _hz_to_mel(hi), cfg.n_bands + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((cfg.n_bands, bin_hz.size))
    for j in range(cfg.n_bands):
        left, center, right = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_hz - left) / max(center - left, 1e-12)
        falling = (right - bin_hz) / max(right - center, 1e-12)
        fb[j] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return fb


def _frame_spectra(signal, frame, hop):
    n = signal.size
    if n < frame:
        raise ValueError(f"signal length {n} shorter than one frame ({frame})")
    k = (n - frame) // hop + 1
    idx = hop * np.arange(k)[:, None] + np.arange(frame)[None, :]
    win = np.hanning(frame)
    return np.fft.rfft(signal[idx] * win, axis=-1)


def fwssnr(test, reference, cfg=FwssnrConfig(), sample_rate=16000):
    """Frequency-weighted segmental SNR of ``test`` against ``reference`` in dB.

    Raises ValueError on length mismatch or a silent reference.
    """
    test = np.asarray(test, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if test.shape != reference.shape:
        raise ValueError(f"length mismatch: {test.shape} vs {reference.shape}")
    if not np.any(reference):
        raise ValueError("reference signal is silent")

    frame = int(round(cfg.frame_ms * 1e-3 * sample_rate))
    hop = max(1, int(round(frame * (1.0 - cfg.overlap))))
    ref_spec = _frame_spectra(reference, frame, hop)
    res_spec = _frame_spectra(test - reference, frame, hop)
    fb = _band_matrix(cfg, frame, sample_rate)

    ref_band = np.abs(ref_spec) ** 2 @ fb.T  # (frames, bands)
    res_band = np.abs(res_spec) ** 2 @ fb.T

    frame_energy = ref_band.sum(axis=1)
    peak = frame_energy.max()
    active = frame_energy > peak * 10.0 ** (-cfg.active_range_db / 10.0)
    if not np.any(active):
        raise ValueError("no speech-active frames in reference")

    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(ref_band / res_band)
    snr = np.clip(np.nan_to_num(snr, nan=cfg.clamp_db[0], posinf=np.inf), *cfg.clamp_db)
    weights = ref_band ** (cfg.weight_exponent / 2.0)  # magnitude ** exponent
    w_sum = weights.sum(axis=1)
    w_sum[w_sum == 0] = 1.0
    per_frame = (weights * snr).sum(axis=1) / w_sum
    return float(per_frame[active].mean())


def input_fwssnr(rendered, speaker, cfg=FwssnrConfig(), sample_rate=16000, reference_mic=None):
    """Best microphone fwSSNR for one speaker of a rendered scene.

    The reference is that speaker's anechoic component at ``reference_mic``
    (falling back to ``cfg.reference_mic``); the score is the maximum over
    microphone signals.
    """
    if reference_mic is None:
        reference_mic = cfg.reference_mic
    reference = rendered.anechoic[speaker, reference_mic]
    scores = [
        fwssnr(rendered.mics[m], reference, cfg, sample_rate)
        for m in range(rendered.mics.shape[0])
    ]
    return float(max(scores))


class DecodeOutcome(NamedTuple):
    correct: bool
    tie: bool
    fwssnr_selected: float
    fwssnr_discarded: float


def decode_correct(selected, discarded, reference, cfg=FwssnrConfig(), sample_rate=16000):
    """Trial outcome: selected output must beat the discarded one strictly.

    Equal scores count as incorrect and set the tie flag.
    """
    score_sel = fwssnr(selected, reference, cfg, sample_rate)
    score_dis = fwssnr(discarded, reference, cfg, sample_rate)
    tie = score_sel == score_dis
    return DecodeOutcome(score_sel > score_dis, tie, score_sel, score_dis)


def aad_accuracy(outcomes):
    """Percentage of correctly decoded trials."""
    if len(outcomes) == 0:
        raise ValueError("need at least one trial")
    correct = [o.correct if isinstance(o, DecodeOutcome) else bool(o) for o in outcomes]
    return 100.0 * sum(correct) / len(correct)


def chance_upper_bound(n_trials, alpha=0.05):
    """Chance-level upper bound in percent from an exact binomial tail.

    Smallest ``k/n`` such that ``P(X >= k | n, p=0.5) <= alpha``; if even
    ``k = n`` does not reach significance the bound is 100%.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    total = 1 << n_trials
    tail = 0
    # Walk k downward accumulating the exact integer tail sum.
    for k in range(n_trials, -1, -1):
        tail += math.comb(n_trials, k)
        if Fraction(tail, total) > alpha:
            k_min = k + 1
            break
    else:
        k_min = 0
    if k_min > n_trials:
        return 100.0
    return 100.0 * k_min / n_trials
