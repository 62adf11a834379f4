"""Simulated reverberant, noisy multi-speaker scenes with oracle components.

A rendered scene keeps every additive part of the microphone signals (per
speaker reverberant and anechoic images, noise) so that oracle masks and
evaluation references need no re-simulation: ``mics == components.sum + noise``
holds exactly because the sum is how ``mics`` is built.
"""

from dataclasses import dataclass

import numpy as np
import scipy.signal

from . import metrics

__all__ = [
    "AcousticScene",
    "RenderedScene",
    "CalibrationError",
    "shorten_pauses",
    "render",
    "calibrate_noise_gain",
    "generate_decorrelated_noise",
    "synthetic_room_irs",
    "synthetic_speech",
]


class CalibrationError(RuntimeError):
    """Noise-gain search cannot reach the requested level inside its bounds."""


@dataclass
class AcousticScene:
    """Clean sources plus impulse responses and noise, before rendering.

    sources: list of 1-D clean signals, one per speaker.
    irs: (I, M, L) reverberant impulse responses.
    anechoic_irs: (I, M, La) direct-path impulse responses.
    noise: (M, N) multichannel noise, or None for a silent scene.
    """

    sources: list
    irs: np.ndarray
    anechoic_irs: np.ndarray
    noise: np.ndarray | None
    sample_rate: int = 16000

    def __post_init__(self):
        self.irs = np.asarray(self.irs, dtype=float)
        self.anechoic_irs = np.asarray(self.anechoic_irs, dtype=float)
        if self.irs.ndim != 3 or self.anechoic_irs.ndim != 3:
            raise ValueError("impulse responses must have shape (I, M, L)")
        if len(self.sources) != self.irs.shape[0]:
            raise ValueError(
                f"{len(self.sources)} sources but {self.irs.shape[0]} IR sets"
            )
        if self.irs.shape[:2] != self.anechoic_irs.shape[:2]:
            raise ValueError("reverberant and anechoic IR grids disagree")

    @property
    def n_sources(self):
        return self.irs.shape[0]

    @property
    def n_mics(self):
        return self.irs.shape[1]


@dataclass
class RenderedScene:
    """Microphone signals with their additive decomposition retained."""

    mics: np.ndarray  # (M, N)
    components: np.ndarray  # (I, M, N) reverberant speaker images
    anechoic: np.ndarray  # (I, M, N) direct-path speaker images
    noise: np.ndarray  # (M, N)
    sample_rate: int = 16000


def _frame_rms(signal, frame):
    n_frames = len(signal) // frame
    if n_frames == 0:
        return np.zeros(0)
    trimmed = signal[: n_frames * frame].reshape(n_frames, frame)
    return np.sqrt((trimmed**2).mean(axis=1))


def shorten_pauses(signal, max_pause, sample_rate=16000, frame_ms=20.0, threshold_db=40.0):
    """Truncate silent stretches longer than ``max_pause`` seconds.

    Silence is detected from 20 ms RMS frames more than ``threshold_db``
    below the 95th-percentile frame RMS. Retained silence around each cut
    gets a 10 ms cosine taper so no click survives at the joint. Speech
    frames are passed through untouched, which also makes the operation
    idempotent.
    """
    signal = np.asarray(signal, dtype=float)
    if max_pause <= 0:
        raise ValueError("max_pause must be positive")
    if signal.size == 0:
        return signal.copy()

    frame = max(1, int(round(frame_ms * 1e-3 * sample_rate)))
    rms = _frame_rms(signal, frame)
    if rms.size == 0:
        return signal.copy()
    threshold = np.percentile(rms, 95) * 10.0 ** (-threshold_db / 20.0)
    silent = rms <= threshold

    max_samples = int(round(max_pause * sample_rate))
    keep = np.ones(signal.size, dtype=bool)
    fades = []
    i = 0
    while i < silent.size:
        if silent[i]:
            j = i
            while j < silent.size and silent[j]:
                j += 1
            start = i * frame
            stop = j * frame if j < silent.size else signal.size
            if stop - start > max_samples:
                keep[start + max_samples : stop] = False
                fades.append(start + max_samples)
            i = j
        else:
            i += 1

    out = signal.copy()
    fade_len = max(1, int(round(0.010 * sample_rate)))
    ramp = 0.5 * (1.0 + np.cos(np.linspace(0.0, np.pi, fade_len)))
    for cut in fades:
        lo = max(0, cut - fade_len)
        out[lo:cut] *= ramp[fade_len - (cut - lo) :]
    return out[keep]


def render(scene, noise_gain=1.0):
    """Convolve sources with their impulse responses and add scaled noise.

    Full convolutions are trimmed to the longest common length across all
    components and the noise channel count must match the IR grid.
    """
    n_src, n_mic = scene.n_sources, scene.n_mics
    shortest = min(len(scene.sources[i]) for i in range(n_src))
    if max(scene.irs.shape[2], scene.anechoic_irs.shape[2]) >= shortest:
        raise ValueError(
            f"impulse responses ({scene.irs.shape[2]} taps) must be shorter "
            f"than the shortest source ({shortest} samples)"
        )
    lengths = [
        len(scene.sources[i]) + scene.irs.shape[2] - 1 for i in range(n_src)
    ]
    lengths += [
        len(scene.sources[i]) + scene.anechoic_irs.shape[2] - 1 for i in range(n_src)
    ]
    if scene.noise is not None:
        noise = np.asarray(scene.noise, dtype=float)
        if noise.shape[0] != n_mic:
            raise ValueError(
                f"noise has {noise.shape[0]} channels, scene has {n_mic} mics"
            )
        lengths.append(noise.shape[1])
    n = min(lengths)

    components = np.zeros((n_src, n_mic, n))
    anechoic = np.zeros((n_src, n_mic, n))
    for i in range(n_src):
        src = np.asarray(scene.sources[i], dtype=float)
        for m in range(n_mic):
            components[i, m] = scipy.signal.fftconvolve(src, scene.irs[i, m])[:n]
            anechoic[i, m] = scipy.signal.fftconvolve(src, scene.anechoic_irs[i, m])[:n]
    if scene.noise is not None:
        noise_part = noise_gain * noise[:, :n]
    else:
        noise_part = np.zeros((n_mic, n))
    mics = components.sum(axis=0) + noise_part
    return RenderedScene(mics, components, anechoic, noise_part, scene.sample_rate)


def calibrate_noise_gain(
    scene,
    target_fwssnr,
    reference_source=None,
    cfg=None,
    tolerance_db=0.1,
    gain_bounds=(1e-6, 1e6),
    max_iter=80,
    reference_mics=None,
):
    """Bisection on the noise gain until the scene's input fwSSNR hits target.

    ``reference_source`` selects which speaker's input fwSSNR is matched;
    None averages over all speakers. ``reference_mics`` optionally gives each
    speaker its own reference microphone. Raises CalibrationError when the
    target lies outside what the gain bounds can reach.
    """
    if scene.noise is None or not np.any(scene.noise):
        raise ValueError("scene has no noise to calibrate")
    cfg = cfg or metrics.FwssnrConfig()

    unit = render(scene, 1.0)
    speech_sum = unit.components.sum(axis=0)

    def ref_mic(i):
        return None if reference_mics is None else reference_mics[i]

    def achieved(gain):
        rendered = RenderedScene(
            speech_sum + gain * unit.noise,
            unit.components,
            unit.anechoic,
            gain * unit.noise,
            scene.sample_rate,
        )
        if reference_source is None:
            vals = [
                metrics.input_fwssnr(rendered, i, cfg, scene.sample_rate, ref_mic(i))
                for i in range(scene.n_sources)
            ]
            return float(np.mean(vals))
        return metrics.input_fwssnr(
            rendered, reference_source, cfg, scene.sample_rate, ref_mic(reference_source)
        )

    lo, hi = gain_bounds
    val_lo = achieved(lo)  # quietest noise -> highest fwSSNR
    if val_lo < target_fwssnr - tolerance_db:
        raise CalibrationError(
            f"target {target_fwssnr:.2f} dB above reach: {val_lo:.2f} dB at gain {lo:g}"
        )
    if abs(val_lo - target_fwssnr) <= tolerance_db:
        return lo
    val_hi = achieved(hi)
    if val_hi > target_fwssnr + tolerance_db:
        raise CalibrationError(
            f"target {target_fwssnr:.2f} dB below reach: {val_hi:.2f} dB at gain {hi:g}"
        )
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi)  # bisect in log domain
        val = achieved(mid)
        if abs(val - target_fwssnr) <= tolerance_db:
            return float(mid)
        if val > target_fwssnr:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"no gain within {tolerance_db} dB of {target_fwssnr} dB after {max_iter} steps"
    )


def generate_decorrelated_noise(n_channels, length, spectrum_shape="white", sample_rate=16000, seed=0):
    """Mutually uncorrelated stationary noise channels.

    ``spectrum_shape`` is ``"white"`` or ``"speech"``; the speech shape is a
    first-order 500 Hz lowpass tilt applied per channel.
    """
    if n_channels < 1:
        raise ValueError("need at least one channel")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_channels, length))
    if spectrum_shape == "white":
        return noise
    if spectrum_shape == "speech":
        b, a = speech_shape_filter(sample_rate)
        shaped = scipy.signal.lfilter(b, a, noise, axis=1)
        # Restore unit variance per channel.
        shaped /= shaped.std(axis=1, keepdims=True)
        return shaped
    raise ValueError(f"unknown spectrum shape {spectrum_shape!r}")


def speech_shape_filter(sample_rate=16000):
    """First-order lowpass giving the long-term spectral tilt used for noise."""
    return scipy.signal.butter(1, 500.0, fs=sample_rate)


def synthetic_room_irs(
    n_sources,
    n_mics,
    sample_rate=16000,
    t60=0.5,
    direct_to_reverb_db=0.0,
    max_delay_ms=2.0,
    early_gap_ms=8.0,
    shadow_db=8.0,
    n_reflections=96,
    reflection_spread=1.0,
    seed=0,
):
    """Synthetic impulse responses: direct path plus specular reflection train.

    Each (source, mic) pair gets its own integer direct-path delay and gain,
    giving the array a usable spatial signature without any room geometry.
    Sources are spread across the array aperture and attenuated by up to
    ``shadow_db`` at the far end, mimicking the head-shadow level differences
    that make one microphone favor each speaker.

    Reverberation is a train of ``n_reflections`` discrete images per source,
    starting ``early_gap_ms`` after the direct path, with amplitudes drawn
    under an exponential envelope that reaches -60 dB at ``t60`` seconds and
    total energy ``direct_to_reverb_db`` below the direct path. Every image
    is shared across microphones up to a per-microphone arrival jitter and
    gain, the way real room reflections arrive coherently at a compact
    array; fully independent per-microphone tails would make the late field
    spatially white, which no array processing could touch.
    ``reflection_spread`` scales the angular diversity of the images: 1 gives
    each image its own inter-microphone signature, 0 makes every image share
    the direct path's signature (corridor-like propagation, a spatially
    rank-one source image). ``t60 = 0`` produces anechoic responses.

    Returns ``(irs, anechoic_irs)`` of shapes (I, M, L) and (I, M, La).
    """
    rng = np.random.default_rng(seed)
    max_delay = max(1, int(round(max_delay_ms * 1e-3 * sample_rate)))
    delays = rng.integers(0, max_delay + 1, size=(n_sources, n_mics))
    mic_pos = np.linspace(0.0, 1.0, n_mics) if n_mics > 1 else np.array([0.5])
    src_pos = np.linspace(0.0, 1.0, n_sources) if n_sources > 1 else np.array([0.5])
    shadow = 10.0 ** (
        -shadow_db * np.abs(src_pos[:, None] - mic_pos[None, :]) / 20.0
    )
    gains = shadow * rng.uniform(0.9, 1.0, size=(n_sources, n_mics))

    la = max_delay + 1
    anechoic = np.zeros((n_sources, n_mics, la))
    for i in range(n_sources):
        for m in range(n_mics):
            anechoic[i, m, delays[i, m]] = gains[i, m]

    if t60 <= 0:
        return anechoic.copy(), anechoic

    gap = int(round(early_gap_ms * 1e-3 * sample_rate))
    tail_len = int(round(t60 * sample_rate))
    l_ir = la + gap + tail_len + max_delay
    irs = np.zeros((n_sources, n_mics, l_ir))
    spread = float(np.clip(reflection_spread, 0.0, 1.0))
    for i in range(n_sources):
        # image arrival times and amplitudes are per source, shared by mics
        offsets = np.sort(rng.uniform(0.0, t60, n_reflections))
        amps = rng.standard_normal(n_reflections) * np.exp(
            -3.0 * np.log(10.0) * offsets / t60
        )
        jitter = rng.integers(0, max_delay + 1, size=(n_reflections, n_mics))
        img_gain = 1.0 - spread * rng.uniform(0.0, 0.3, size=(n_reflections, n_mics))
        taps = gap + (offsets * sample_rate).astype(int)
        for m in range(n_mics):
            tail = np.zeros(l_ir)
            base = delays[i, m]
            for r in range(n_reflections):
                pos = base + taps[r] + int(round(spread * jitter[r, m]))
                tail[pos] += amps[r] * img_gain[r, m] * (gains[i, m] / shadow[i, m])
            direct_energy = gains[i, m] ** 2
            target = direct_energy * 10.0 ** (-direct_to_reverb_db / 10.0)
            tail *= np.sqrt(target / (tail**2).sum())
            irs[i, m] = tail
            irs[i, m, base] += gains[i, m]
    return irs, anechoic


def synthetic_speech(duration, sample_rate=16000, pause_every=None, pause_length=1.0, seed=0):
    """Speech-like test source: speech-shaped noise under a syllabic envelope.

    A slow (~2-6 Hz) strictly positive modulator shapes speech-tilted noise;
    optional silent gaps every ``pause_every`` seconds exercise pause
    handling. Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    carrier = rng.standard_normal(n)
    b, a = speech_shape_filter(sample_rate)
    carrier = scipy.signal.lfilter(b, a, carrier)
    carrier /= max(carrier.std(), 1e-12)

    # Syllabic modulator: lowpassed positive noise, floor keeps it active.
    slow = rng.standard_normal(n)
    b_env, a_env = scipy.signal.butter(2, 4.0, fs=sample_rate)
    slow = scipy.signal.filtfilt(b_env, a_env, slow)
    slow = slow / max(np.abs(slow).max(), 1e-12)
    modulator = 0.15 + (1.0 + slow) / 2.0

    signal = carrier * modulator
    if pause_every is not None:
        gap = int(round(pause_length * sample_rate))
        step = int(round(pause_every * sample_rate))
        pos = step
        while pos + gap < n:
            signal[pos : pos + gap] = 0.0
            pos += step + gap
    return signal
