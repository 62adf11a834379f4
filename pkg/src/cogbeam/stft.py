"""Weighted overlap-add STFT analysis/synthesis.

Spectrograms are complex arrays of shape (channels, frames, bins) with a
one-sided spectrum, ``bins = frame_length // 2 + 1``. Analysis and synthesis
both use a square-root Hann window so their product satisfies the
constant-overlap-add condition; interior samples reconstruct exactly, the
first/last ``frame_length`` samples are excluded from that contract.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["StftConfig", "analyze", "synthesize"]

_WINDOWS = ("sqrt_hann",)


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 512
    hop: int = 128
    window: str = "sqrt_hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.frame_length <= 0 or self.hop <= 0:
            raise ValueError("frame_length and hop must be positive")
        if self.frame_length % self.hop != 0:
            raise ValueError(
                f"hop {self.hop} must divide frame_length {self.frame_length}"
            )
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self):
        return self.frame_length // 2 + 1

    def bin_frequency(self, f):
        """Center frequency in Hz of one-sided bin ``f``."""
        return f * self.sample_rate / self.frame_length


def _window(cfg):
    # Periodic Hann; its running sum over hops is constant, which is the
    # overlap-add condition for the sqrt-Hann analysis/synthesis pair.
    n = np.arange(cfg.frame_length)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.frame_length)
    return np.sqrt(hann)


def _cola_gain(cfg):
    win_sq = _window(cfg) ** 2
    acc = np.zeros(cfg.frame_length)
    for start in range(0, cfg.frame_length, cfg.hop):
        acc += np.roll(win_sq, start)
    gain = acc[0]
    if not np.allclose(acc, gain, rtol=0, atol=1e-12 * gain):
        raise ValueError("window does not satisfy overlap-add at this hop")
    return gain


def analyze(signal, cfg):
    """STFT of an ``(M, N)`` or ``(N,)`` real signal -> ``(M, K, F)`` complex.

    ``K = (N - frame_length) // hop + 1``; all frames lie fully inside the
    signal. Raises ValueError if the signal is shorter than one frame.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    n = signal.shape[1]
    if n < cfg.frame_length:
        raise ValueError(
            f"signal length {n} shorter than one frame ({cfg.frame_length})"
        )
    k = (n - cfg.frame_length) // cfg.hop + 1
    win = _window(cfg)
    starts = cfg.hop * np.arange(k)
    idx = starts[:, None] + np.arange(cfg.frame_length)[None, :]
    frames = signal[:, idx] * win
    return np.fft.rfft(frames, axis=-1)


def synthesize(spec, cfg):
    """Overlap-add inverse STFT -> real signal of shape ``(M, N)``.

    ``N = (K - 1) * hop + frame_length``. Interior samples of
    ``synthesize(analyze(x))`` match ``x`` to numerical precision.
    """
    spec = np.asarray(spec)
    if spec.ndim == 2:
        spec = spec[None]
    if spec.ndim != 3:
        raise ValueError(f"expected (M, K, F) spectrogram, got shape {spec.shape}")
    m, k, f = spec.shape
    if f != cfg.n_bins:
        raise ValueError(f"spectrogram has {f} bins, config implies {cfg.n_bins}")
    win = _window(cfg)
    gain = _cola_gain(cfg)
    frames = np.fft.irfft(spec, n=cfg.frame_length, axis=-1) * win
    n = (k - 1) * cfg.hop + cfg.frame_length
    out = np.zeros((m, n))
    for j in range(k):
        start = j * cfg.hop
        out[:, start : start + cfg.frame_length] += frames[:, j]
    return out / gain
