"""Zero-padded bilinear interpolation on channel-last grids."""

from __future__ import annotations

import numpy as np


def bilinear_corners(u: np.ndarray, v: np.ndarray, h: int, w: int):
    """Corner indices and weights for fractional points (u=column, v=row).

    Returns ``(rows, cols, weights, valid)``, each shaped ``u.shape + (4,)``,
    in corner order (x0,y0), (x1,y0), (x0,y1), (x1,y1). Invalid corners carry
    clipped indices and zero weight.
    """
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1
    )
    valid = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    weights = np.where(valid, weights, 0.0)
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), weights, valid


def bilinear_sample_points(fmap: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample an (h, w, C) map at arrays of points; returns ``u.shape + (C,)``."""
    h, w = fmap.shape[:2]
    rows, cols, weights, _ = bilinear_corners(np.asarray(u, float), np.asarray(v, float), h, w)
    corners = fmap[rows, cols]  # (..., 4, C)
    return np.einsum("...k,...kc->...c", weights, corners)
