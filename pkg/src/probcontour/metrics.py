"""Segmentation metrics: polygon fill, DICE overlap and vertex RMSE."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

__all__ = ["rasterize", "dice", "rmse", "contour_dice", "summarize", "write_mask_pgm"]


def rasterize(contour, height: int, width: int) -> np.ndarray:
    """Fill a closed polygon on a ``height x width`` grid by the even-odd rule.

    Pixel ``(r, c)`` is set when its centre ``(c + 0.5, r + 0.5)`` is inside.
    Crossings are half-open in both axes, so shifting the polygon by a whole
    pixel shifts the mask by exactly one pixel.
    """
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(np.unique(pts, axis=0)) < 3:
        warnings.warn("degenerate contour (fewer than 3 distinct vertices); returning an empty mask", stacklevel=2)
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    # (rows, edges) crossing table
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    crosses = (ys[:, None] >= lo) & (ys[:, None] < hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ys[:, None] - y0) / (y1 - y0)
        xcross = x0 + t * (x1 - x0)
    for r in np.nonzero(crosses.any(axis=1))[0]:
        xc = np.sort(xcross[r, crosses[r]])
        for left, right in zip(xc[0::2], xc[1::2]):
            mask[r] |= (xs >= left) & (xs < right)
    return mask


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def rmse(pred, ref) -> float:
    """Root mean squared Euclidean distance between corresponding vertices."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape or pred.size % 2:
        raise ValueError(f"contour lengths differ or are odd: {pred.size} vs {ref.size}")
    d2 = ((pred - ref).reshape(-1, 2) ** 2).sum(axis=1)
    return float(np.sqrt(d2.mean()))


def contour_dice(pred, ref, height: int, width: int) -> float:
    return dice(rasterize(pred, height, width), rasterize(ref, height, width))


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty collection")
    return float(v.mean()), float(v.std())


def write_mask_pgm(mask, path) -> None:
    """Binary PGM (P5) dump, 0 or 255 per pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + (mask.astype(np.uint8) * 255).tobytes())
