"""Multichannel speech enhancement with convolutional minimum-power
beamformers, mask handling, envelope-based attention decoding, and
frequency-weighted segmental SNR evaluation over simulated scenes."""

__version__ = "0.1.0"

from . import aad, beamform, linalg, masks, metrics, scene, stft, tensorfile

__all__ = [
    "aad",
    "beamform",
    "linalg",
    "masks",
    "metrics",
    "scene",
    "stft",
    "tensorfile",
    "__version__",
]
