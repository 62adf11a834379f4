"""Per-speaker time-frequency masks: oracle ratios, alignment, averaging.

A mask set is a real array of shape (I + 1, K, F) in [0, 1]: one plane per
speaker followed by one noise plane. Separately estimated per-microphone
mask sets carry a source-permutation ambiguity; ``align_masks`` resolves it
against a reference microphone before ``average_masks`` pools them.
"""

import itertools
import warnings

import numpy as np

from .tensorfile import read_tensor, write_tensor

__all__ = [
    "oracle_irm",
    "align_masks",
    "average_masks",
    "load_masks",
    "store_masks",
]


def oracle_irm(components, noise, mic):
    """Ideal ratio masks from the stored scene components at one microphone.

    ``components`` is a sequence of per-speaker spectrograms (M, K, F) and
    ``noise`` the noise spectrogram; the mask of source i is its magnitude
    share of the total, the last plane holds the noise share, and bins where
    everything is zero get the uniform value ``1 / (I + 1)``.
    """
    mags = [np.abs(np.asarray(c)[mic]) for c in components]
    mags.append(np.abs(np.asarray(noise)[mic]))
    shapes = {m.shape for m in mags}
    if len(shapes) != 1:
        raise ValueError(f"component spectrogram shapes disagree: {shapes}")
    stack = np.stack(mags)
    total = stack.sum(axis=0)
    n_sources = stack.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        masks = stack / total
    masks[:, total == 0] = 1.0 / n_sources
    return masks


def _permutation_cost(reference, candidate):
    """cost[i, j] = squared distance between reference plane i, candidate j."""
    s = reference.shape[0]
    cost = np.empty((s, s))
    for i in range(s):
        diff = reference[i][None] - candidate
        cost[i] = (diff**2).sum(axis=(1, 2))
    return cost


def align_masks(per_mic_masks, reference_mic=0):
    """Reorder every microphone's source planes to match the reference mic.

    The best ordering minimizes the total squared mask difference against the
    reference, searched exhaustively over all source permutations (the noise
    plane participates, so at most (I + 1)! candidates).
    """
    per_mic_masks = [np.asarray(m, dtype=float) for m in per_mic_masks]
    shapes = {m.shape for m in per_mic_masks}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes disagree across mics: {shapes}")
    n_sources = per_mic_masks[0].shape[0]
    if n_sources > 6:
        raise ValueError(
            f"{n_sources} sources: exhaustive permutation search capped at 6"
        )
    reference = per_mic_masks[reference_mic]
    aligned = []
    for m, masks in enumerate(per_mic_masks):
        if m == reference_mic:
            aligned.append(masks.copy())
            continue
        cost = _permutation_cost(reference, masks)
        best = min(
            itertools.permutations(range(n_sources)),
            key=lambda p: sum(cost[i, p[i]] for i in range(n_sources)),
        )
        aligned.append(masks[list(best)])
    return aligned


def average_masks(aligned):
    """Entrywise mean of aligned per-microphone mask sets."""
    if len(aligned) == 0:
        raise ValueError("no mask sets to average")
    stack = np.stack([np.asarray(m, dtype=float) for m in aligned])
    return stack.mean(axis=0)


def store_masks(mask_set, path):
    write_tensor(path, np.asarray(mask_set, dtype=np.float64))


def load_masks(path):
    """Read a mask tensor, clamping stray values into [0, 1] with a warning."""
    masks = read_tensor(path).astype(float)
    if masks.ndim != 3:
        raise ValueError(f"expected rank-3 mask tensor, got rank {masks.ndim}")
    out_of_range = int(((masks < 0.0) | (masks > 1.0)).sum())
    if out_of_range:
        warnings.warn(
            f"clamped {out_of_range} mask value(s) into [0, 1]", stacklevel=2
        )
        masks = np.clip(masks, 0.0, 1.0)
    return masks
