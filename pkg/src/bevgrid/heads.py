"""Per-cell task heads, their losses, and NMS-free center decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec
from .layers import log_softmax, softmax


def head_segmentation(B: np.ndarray, P: dict) -> np.ndarray:
    """(..., C) BEV features -> (..., n_classes) logits."""
    return B @ P["head.seg.W"] + P["head.seg.b"]


def head_centers(B: np.ndarray, P: dict):
    """Returns (heatmap logits (...), center offsets (..., 2), velocity (..., 2))."""
    out = B @ P["head.ctr.W"] + P["head.ctr.b"]
    return out[..., 0], out[..., 1:3], out[..., 3:5]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Targets and losses
# ---------------------------------------------------------------------------


@dataclass
class FrameTargets:
    """Supervision for one frame on a BEV grid (cells flattened row-major)."""

    classes: np.ndarray  # (Nq,) int
    heat: np.ndarray  # (Nq,) soft center targets in [0, 1]
    pos_idx: np.ndarray  # (P,) center cells
    offsets: np.ndarray  # (P, 2) fractional offset of the true center, in cells
    velocity: np.ndarray  # (P, 2) m/s in the ego frame


def build_targets(class_map: np.ndarray, centers, velocities, grid: BevGridSpec, sigma: float = 1.0) -> FrameTargets:
    """``centers``/``velocities`` are ego-frame meters and m/s per object."""
    H, W = grid.shape
    heat = np.zeros((H, W))
    xs, ys = grid.cell_grid()
    pos, offs, vels = [], [], []
    for c, v in zip(centers, velocities):
        cx, cy = grid.world_to_cell(c[0], c[1])
        ix, iy = int(np.round(cx)), int(np.round(cy))
        if not (0 <= ix < W and 0 <= iy < H):
            continue
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
        heat = np.maximum(heat, g)
        idx = iy * W + ix
        if idx in pos:
            continue
        pos.append(idx)
        offs.append((cx - ix, cy - iy))
        vels.append((v[0], v[1]))
    return FrameTargets(
        classes=np.asarray(class_map, dtype=np.int64).ravel(),
        heat=heat.ravel(),
        pos_idx=np.asarray(pos, dtype=np.int64),
        offsets=np.asarray(offs, float).reshape(-1, 2),
        velocity=np.asarray(vels, float).reshape(-1, 2),
    )


@dataclass
class LossWeights:
    seg: float = 1.0
    heat: float = 1.0
    offset: float = 0.5
    velocity: float = 0.5
    heat_pos_weight: float = 10.0
    class_weights: list[float] = field(default_factory=lambda: [1.0, 1.5, 1.0, 1.0])


def head_loss(B: np.ndarray, P: dict, tgt: FrameTargets, lw: LossWeights):
    """Total loss on (Nq, C) BEV features.

    Segmentation: class-weighted softmax cross-entropy averaged over cells.
    Heatmap: two-class (logistic) cross-entropy against soft targets, with
    positives up-weighted. Offsets and velocity: L1 at the center cells.
    Returns (loss, parts, dB, head_grads).
    """
    nq = B.shape[0]
    seg = head_segmentation(B, P)
    heat, off, vel = head_centers(B, P)
    parts = {}

    cw = np.asarray(lw.class_weights, float)[tgt.classes]
    logp = log_softmax(seg)
    ce = -logp[np.arange(nq), tgt.classes]
    parts["seg"] = float((cw * ce).mean())
    dseg = softmax(seg)
    dseg[np.arange(nq), tgt.classes] -= 1.0
    dseg *= (lw.seg * cw / nq)[:, None]

    hw = 1.0 + lw.heat_pos_weight * tgt.heat
    # log(1 + e^x) - t x, written stably
    bce = np.logaddexp(0.0, heat) - tgt.heat * heat
    parts["heat"] = float((hw * bce).mean())
    dheat = lw.heat * hw * (sigmoid(heat) - tgt.heat) / nq

    doff = np.zeros_like(off)
    dvel = np.zeros_like(vel)
    n_pos = len(tgt.pos_idx)
    if n_pos:
        r_off = off[tgt.pos_idx] - tgt.offsets
        r_vel = vel[tgt.pos_idx] - tgt.velocity
        parts["offset"] = float(np.abs(r_off).sum() / n_pos)
        parts["velocity"] = float(np.abs(r_vel).sum() / n_pos)
        doff[tgt.pos_idx] = lw.offset * np.sign(r_off) / n_pos
        dvel[tgt.pos_idx] = lw.velocity * np.sign(r_vel) / n_pos
    else:
        parts["offset"] = parts["velocity"] = 0.0

    loss = lw.seg * parts["seg"] + lw.heat * parts["heat"] + lw.offset * parts["offset"] + lw.velocity * parts["velocity"]
    dctr = np.concatenate([dheat[:, None], doff, dvel], axis=1)
    grads = {
        "head.seg.W": B.T @ dseg,
        "head.seg.b": dseg.sum(0),
        "head.ctr.W": B.T @ dctr,
        "head.ctr.b": dctr.sum(0),
    }
    dB = dseg @ P["head.seg.W"].T + dctr @ P["head.ctr.W"].T
    return float(loss), parts, dB, grads


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float]
    velocity: tuple[float, float]
    score: float


def local_maxima(scores: np.ndarray) -> np.ndarray:
    """Boolean mask of cells strictly greater than all their in-grid 8-neighbours."""
    H, W = scores.shape
    padded = np.pad(scores, 1, constant_values=-np.inf)
    mask = np.ones((H, W), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= scores > padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
    return mask


def decode_centers(heatmap, offsets, velocity, grid: BevGridSpec, max_boxes: int = 300, score_thresh: float = 0.3):
    """Peaks of an (H, W) score map above threshold, best ``max_boxes`` first."""
    heatmap = np.asarray(heatmap, float)
    if heatmap.shape != grid.shape:
        raise ValueError(f"heatmap shape {heatmap.shape} does not match grid {grid.shape}")
    offsets = np.asarray(offsets, float).reshape(grid.H, grid.W, 2)
    velocity = np.asarray(velocity, float).reshape(grid.H, grid.W, 2)
    peaks = local_maxima(heatmap) & (heatmap > score_thresh)
    ys, xs = np.nonzero(peaks)
    scores = heatmap[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_boxes]
    out = []
    for i in order:
        y, x = ys[i], xs[i]
        cx, cy = grid.cell_to_world(x + offsets[y, x, 0], y + offsets[y, x, 1])
        out.append(Detection((float(cx), float(cy)), (float(velocity[y, x, 0]), float(velocity[y, x, 1])), float(scores[i])))
    return out


def predict_frame(B: np.ndarray, P: dict, grid: BevGridSpec, max_boxes: int = 300, score_thresh: float = 0.3):
    """Class map and decoded detections from (Nq, C) or (H, W, C) features."""
    B = B.reshape(-1, B.shape[-1])
    seg = head_segmentation(B, P)
    heat, off, vel = head_centers(B, P)
    class_map = seg.argmax(axis=1).reshape(grid.shape)
    dets = decode_centers(sigmoid(heat).reshape(grid.shape), off, vel, grid, max_boxes, score_thresh)
    return class_map, dets
