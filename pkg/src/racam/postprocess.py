"""Heatmap to binary pseudo-label conversion via 256-bin Otsu thresholding."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

BINS = 256


def normalize_minmax(values) -> np.ndarray:
    """Rescale to ``[0,1]``; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.astype(np.float32)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def quantize(values) -> np.ndarray:
    """``floor(255 v)`` bins in ``[0,255]``."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * (BINS - 1)), 0, BINS - 1).astype(np.int64)


def otsu_bin(values) -> int:
    """Smallest split ``t`` maximising the between-class variance of bins ``<= t`` vs ``> t``.

    Scores ``w0 w1 (mu0 - mu1)^2`` are compared exactly as integer fractions
    ``(n1 s0 - n0 s1)^2 / (n0 n1)`` (the common ``1/n^4`` factor dropped), so
    ties resolve without floating-point noise.
    """
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("otsu_threshold: empty input")
    hist = np.bincount(quantize(v).ravel(), minlength=BINS)
    n0s = np.cumsum(hist).tolist()
    s0s = np.cumsum(hist * np.arange(BINS)).tolist()
    n, s = n0s[-1], s0s[-1]
    best_t, best_num, best_den = 0, 0, 1
    for t in range(BINS):
        n0, s0 = n0s[t], s0s[t]
        n1, s1 = n - n0, s - s0
        if n0 == 0 or n1 == 0:
            continue
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_threshold(values) -> float:
    """Otsu threshold in ``[0,1]``: the centre of the gap above bin ``t``."""
    return (otsu_bin(values) + 0.5) / (BINS - 1)


def to_mask(heatmap, min_area: int = 0) -> np.ndarray:
    """Binary ``uint8`` mask of the heatmap's Otsu foreground.

    A pixel is foreground when its quantized value reaches the threshold,
    i.e. its bin lies above ``t``. ``min_area > 0`` drops 8-connected
    components smaller than that many pixels.
    """
    h = np.asarray(heatmap)
    bins = quantize(h)
    mask = (bins > otsu_bin(h)).astype(np.uint8)
    if min_area > 0 and mask.any():
        mask = remove_small_components(mask, min_area)
    return mask


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    squeezed = mask.reshape(mask.shape[-2:])
    labels, n = ndimage.label(squeezed, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8).reshape(mask.shape)
