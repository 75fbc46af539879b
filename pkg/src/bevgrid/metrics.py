"""Evaluation metrics: segmentation IoU, center-distance recall, velocity error,
the nuScenes detection score, and visibility-bucketed recall."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass

import numpy as np

VISIBILITY_BUCKETS = ((0.0, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))
BUCKET_NAMES = ("0-40", "40-60", "60-80", "80-100")


@dataclass(frozen=True)
class TpErrors:
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    mAAE: float

    def __post_init__(self):
        for name, v in zip(("mATE", "mASE", "mAOE", "mAVE", "mAAE"), astuple(self)):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def nds_score(mAP: float, errs: TpErrors) -> float:
    if not 0.0 <= mAP <= 1.0:
        raise ValueError(f"mAP must lie in [0, 1], got {mAP}")
    tp = sum(1.0 - min(1.0, e) for e in astuple(errs))
    return (5.0 * mAP + tp) / 10.0


def segmentation_iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def greedy_match(pred_centers, scores, gt_centers, radius: float = 2.0, max_preds: int = 300):
    """Score-ordered greedy matching. Returns a list of (pred_index, gt_index)."""
    pred_centers = np.asarray(pred_centers, float).reshape(-1, 2)
    gt_centers = np.asarray(gt_centers, float).reshape(-1, 2)
    scores = np.asarray(scores, float).reshape(-1)
    order = np.argsort(-scores, kind="stable")[:max_preds]
    taken = np.zeros(len(gt_centers), dtype=bool)
    pairs = []
    if len(gt_centers) == 0:
        return pairs
    for i in order:
        d = np.linalg.norm(gt_centers - pred_centers[i], axis=1)
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            taken[j] = True
            pairs.append((int(i), j))
    return pairs


def recall_at_distance(pred_centers, scores, gt_centers, radius: float = 2.0, max_preds: int = 300) -> float:
    n_gt = len(np.asarray(gt_centers, float).reshape(-1, 2))
    if n_gt == 0:
        return 1.0
    return len(greedy_match(pred_centers, scores, gt_centers, radius, max_preds)) / n_gt


def velocity_mae(pred_vel, gt_vel) -> float:
    """Mean Euclidean velocity error over already matched pairs."""
    a = np.asarray(pred_vel, float).reshape(-1, 2)
    b = np.asarray(gt_vel, float).reshape(-1, 2)
    if len(a) != len(b):
        raise ValueError("pred and gt pair counts differ")
    if len(a) == 0:
        return 0.0
    return float(np.linalg.norm(a - b, axis=1).mean())


def visibility_bucket(fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"visibility must lie in [0, 1], got {fraction}")
    for i, (lo, hi) in enumerate(VISIBILITY_BUCKETS):
        if lo <= fraction < hi:
            return i
    return len(VISIBILITY_BUCKETS) - 1


@dataclass
class FrameResult:
    """Predictions and truth for one evaluated frame."""

    pred_centers: np.ndarray  # (P, 2)
    pred_scores: np.ndarray  # (P,)
    pred_velocity: np.ndarray  # (P, 2)
    gt_centers: np.ndarray  # (G, 2)
    gt_velocity: np.ndarray  # (G, 2)
    gt_visibility: np.ndarray  # (G,)


def _matches(res: FrameResult, radius, max_preds):
    return greedy_match(res.pred_centers, res.pred_scores, res.gt_centers, radius, max_preds)


def recall_by_visibility(results: list[FrameResult], radius: float = 2.0, max_preds: int = 300) -> dict[str, float | None]:
    """Pooled recall per visibility bucket; None for empty buckets.

    Matching happens per frame against all of its objects, then matched
    objects are tallied in the bucket of their visibility.
    """
    hits = np.zeros(len(VISIBILITY_BUCKETS))
    totals = np.zeros(len(VISIBILITY_BUCKETS))
    for res in results:
        matched = {j for _, j in _matches(res, radius, max_preds)}
        for j, v in enumerate(res.gt_visibility):
            b = visibility_bucket(float(v))
            totals[b] += 1
            hits[b] += j in matched
    return {name: (hits[i] / totals[i] if totals[i] else None) for i, name in enumerate(BUCKET_NAMES)}


def bucket_counts(results: list[FrameResult]) -> dict[str, int]:
    counts = dict.fromkeys(BUCKET_NAMES, 0)
    for res in results:
        for v in res.gt_visibility:
            counts[BUCKET_NAMES[visibility_bucket(float(v))]] += 1
    return counts


def detection_summary(results: list[FrameResult], radius: float = 2.0, max_preds: int = 300) -> dict[str, float]:
    """Pooled recall and matched-pair velocity MAE over many frames."""
    n_gt = n_hit = 0
    pv, gv = [], []
    for res in results:
        pairs = _matches(res, radius, max_preds)
        n_gt += len(res.gt_centers)
        n_hit += len(pairs)
        for i, j in pairs:
            pv.append(res.pred_velocity[i])
            gv.append(res.gt_velocity[j])
    return {
        "recall2m": n_hit / n_gt if n_gt else 1.0,
        "vel_mae": velocity_mae(pv, gv),
        "n_gt": n_gt,
        "n_matched": n_hit,
    }


def write_report(rows: list[tuple[str, str, float]], summary: str = "") -> str:
    """CSV text with columns metric,group,value, followed by an optional summary block."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "group", "value"])
    for metric, group, value in rows:
        w.writerow([metric, group, "" if value is None else f"{value:.6f}"])
    if summary:
        buf.write("\n")
        for line in summary.splitlines():
            buf.write(f"# {line}\n")
    return buf.getvalue()
