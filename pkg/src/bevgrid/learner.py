"""Recurrent clip training, AdamW, gradient verification, and evaluation replay."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Frame, Sequence, split_frames
from .encoder import (
    EncoderConfig,
    SpatialRefs,
    build_spatial_refs,
    encode_backward,
    encode_forward,
    init_params,
    prepare_history,
    prepare_images,
    zeros_like_params,
)
from .geometry import BevState, CameraRig
from .heads import LossWeights, decode_centers, head_centers, head_loss, head_segmentation, sigmoid
from .metrics import FrameResult, detection_summary, recall_by_visibility, segmentation_iou
from .scene import CLASSES, VEHICLE

LOG_FIELDS = ("step", "loss", "seg_iou", "recall2m", "vel_mae", "lr")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    frames_per_sample: int = 1
    window_seconds: float = 2.0
    random_frame_sampling: bool = True
    align_history: bool = True
    tsa_concat_offsets: bool = True
    lr: float = 2e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 2000
    lr_schedule: str = "constant"
    seed: int = 0
    holdout_every: int = 4
    score_thresh: float = 0.3
    max_boxes: int = 300
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.frames_per_sample < 1:
            raise ValueError("frames_per_sample must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(self.betas)

    @property
    def temporal(self) -> bool:
        return self.frames_per_sample > 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def model_config(enc: EncoderConfig, tc: TrainConfig) -> EncoderConfig:
    """The encoder config a training run actually uses (the B. switch lives on the trainer)."""
    return replace(enc, tsa_concat_offsets=tc.tsa_concat_offsets)


# ---------------------------------------------------------------------------
# Clip sampling and the recurrent forward pass
# ---------------------------------------------------------------------------


def sample_clip(timestamps, t: float, config: TrainConfig, rng: np.random.Generator | None = None) -> list[float]:
    """Timestamps of a training clip ending at ``t``, ascending.

    ``timestamps`` may be a Sequence or any iterable of frame times.
    """
    if isinstance(timestamps, Sequence):
        timestamps = timestamps.timestamps
    ts = np.sort(np.asarray(list(timestamps), float))
    k = config.frames_per_sample - 1
    if k == 0:
        return [float(t)]
    past = ts[(ts < t - 1e-9) & (ts >= t - config.window_seconds - 1e-9)]
    if config.random_frame_sampling:
        if rng is None:
            raise ValueError("random frame sampling needs an rng")
        chosen = np.sort(rng.choice(past, size=min(k, len(past)), replace=False)) if len(past) else past
    else:
        chosen = past[-k:]
    return [float(x) for x in chosen] + [float(t)]


def run_history(frames: list[Frame], P, cfg: EncoderConfig, refs: SpatialRefs, align: bool = True) -> BevState | None:
    """Encode past frames in order without keeping anything for backprop."""
    prev = None
    for fr in frames:
        hist = prepare_history(prev, fr.pose, cfg, align)
        B, _ = encode_forward(P, cfg, prepare_images(fr.images), refs, hist)
        prev = BevState(B.reshape(cfg.grid.H, cfg.grid.W, cfg.channels), fr.timestamp, fr.pose)
    return prev


@dataclass
class ClipResult:
    loss: float
    parts: dict
    B: np.ndarray  # (Nq, C)
    grads: dict | None
    history: BevState | None


def forward_clip(
    frames: list[Frame],
    P: dict,
    cfg: EncoderConfig,
    tc: TrainConfig,
    refs: SpatialRefs,
    need_grad: bool = True,
    history: BevState | None = None,
) -> ClipResult:
    """Loss at the last frame of ``frames``; earlier frames only feed history.

    Pass ``history`` to reuse an already computed state for ``frames[:-1]``.
    """
    last = frames[-1]
    if history is None:
        history = run_history(frames[:-1], P, cfg, refs, tc.align_history)
    hist = prepare_history(history, last.pose, cfg, tc.align_history)
    B, cache = encode_forward(P, cfg, prepare_images(last.images), refs, hist)
    loss, parts, dB, hg = head_loss(B, P, last.targets(cfg.grid), tc.loss)
    grads = None
    if need_grad:
        grads = zeros_like_params(P)
        for k, v in hg.items():
            grads[k] += v
        encode_backward(P, cfg, cache, dB, refs, grads)
    return ClipResult(loss, parts, B, grads, history)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params), 0)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update, in place. Returns (params, state)."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update += weight_decay * p
        p -= lr * update
    return params, state


def lr_at(step: int, tc: TrainConfig) -> float:
    if tc.lr_schedule == "constant" or tc.steps <= 1:
        return tc.lr
    frac = min(step, tc.steps - 1) / (tc.steps - 1)
    return 0.5 * tc.lr * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class FDReport:
    max_rel_err: float
    worst_tensor: str | None
    per_tensor: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(
    loss_fn: Callable[[dict], tuple[float, dict]],
    params: dict,
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 8,
    seed: int = 0,
    grads: dict | None = None,
) -> FDReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns (loss, grads). Up to ``n_coords`` random
    coordinates per tensor are probed (all of them when n_coords is None).
    The error for a tensor is max|a - n| over probed coordinates divided by
    the larger of max|a| and max|n| there, so tiny entries do not dominate.
    """
    rng = np.random.default_rng(seed)
    if grads is None:
        _, grads = loss_fn(params)
    per = {}
    for name in sorted(params):
        arr = params[name]
        g = np.asarray(grads[name]).reshape(-1)
        if n_coords is None or n_coords >= arr.size:
            idx = np.arange(arr.size)
        else:
            idx = rng.choice(arr.size, n_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            # index in place so non-contiguous tensors are perturbed too
            at = np.unravel_index(i, arr.shape)
            old = arr[at]
            arr[at] = old + eps
            fp = loss_fn(params)[0]
            arr[at] = old - eps
            fm = loss_fn(params)[0]
            arr[at] = old
            num[j] = (fp - fm) / (2 * eps)
        a = g[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        per[name] = float(np.abs(a - num).max(initial=0.0) / scale) if scale > 1e-12 else 0.0
    worst = max(per, key=per.get) if per else None
    return FDReport(per[worst] if worst else 0.0, worst, per, tol)


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------


def frame_predictions(B: np.ndarray, P: dict, cfg: EncoderConfig, score_thresh: float = 0.3, max_boxes: int = 300):
    """(class map, FrameResult without truth filled in)."""
    B = B.reshape(-1, cfg.channels)
    class_map = head_segmentation(B, P).argmax(axis=1).reshape(cfg.grid.shape)
    heat, off, vel = head_centers(B, P)
    dets = decode_centers(sigmoid(heat).reshape(cfg.grid.shape), off, vel, cfg.grid, max_boxes, score_thresh)
    centers = np.array([d.center for d in dets], float).reshape(-1, 2)
    scores = np.array([d.score for d in dets], float)
    velocity = np.array([d.velocity for d in dets], float).reshape(-1, 2)
    return class_map, centers, scores, velocity


def frame_result(B, P, cfg, frame: Frame, score_thresh=0.3, max_boxes=300):
    class_map, centers, scores, velocity = frame_predictions(B, P, cfg, score_thresh, max_boxes)
    res = FrameResult(centers, scores, velocity, frame.centers, frame.velocity, frame.visibility)
    return class_map, res


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class RefsCache:
    """Spatial reference tables keyed by rig identity."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self._cache: dict[int, tuple[CameraRig, SpatialRefs]] = {}

    def __call__(self, rig: CameraRig) -> SpatialRefs:
        hit = self._cache.get(id(rig))
        if hit is None or hit[0] is not rig:
            hit = (rig, build_spatial_refs(self.cfg.grid, rig, self.cfg.anchors))
            self._cache[id(rig)] = hit
        return hit[1]


@dataclass
class TrainResult:
    params: dict
    state: AdamState
    log: list[dict]
    seconds: float


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train(
    sequences: list[Sequence],
    enc_cfg: EncoderConfig,
    tc: TrainConfig,
    params: dict | None = None,
    state: AdamState | None = None,
    log_path=None,
    train_frames: list[list[int]] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch or resume from (params, state).

    Every step draws its randomness from (seed, step), so a resumed run
    replays exactly what an uninterrupted run would have done.
    """
    cfg = model_config(enc_cfg, tc)
    P = init_params(cfg, tc.seed) if params is None else params
    state = AdamState.zeros(P) if state is None else state
    if train_frames is None:
        train_frames = [split_frames(s, tc.holdout_every)[0] for s in sequences]
    pool = [(si, fi) for si, idx in enumerate(train_frames) for fi in idx]
    if not pool:
        raise ValueError("no training frames")
    refs_for = RefsCache(cfg)
    log = []
    writer = fh = None
    if log_path is not None:
        new = state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    try:
        for step in range(state.step, tc.steps):
            rng = step_rng(tc.seed, step)
            si, fi = pool[rng.integers(len(pool))]
            seq = sequences[si]
            t = seq.frames[fi].timestamp
            clip = [seq.frames[seq.index_of(x)] for x in sample_clip(seq.timestamps, t, tc, rng)]
            res = forward_clip(clip, P, cfg, tc, refs_for(seq.rig))
            lr = lr_at(step, tc)
            adamw_step(P, res.grads, state, lr, tc.betas, tc.eps, tc.weight_decay)
            class_map, fr = frame_result(res.B, P, cfg, clip[-1], tc.score_thresh, tc.max_boxes)
            det = detection_summary([fr])
            row = {
                "step": step,
                "loss": res.loss,
                "seg_iou": segmentation_iou(class_map, clip[-1].class_map, VEHICLE),
                "recall2m": det["recall2m"],
                "vel_mae": det["vel_mae"],
                "lr": lr,
                "parts": res.parts,
            }
            log.append(row)
            if writer is not None:
                writer.writerow([row["step"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
            if on_step is not None:
                on_step(row)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(P, state, log, time.perf_counter() - t0)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# Evaluation replay
# ---------------------------------------------------------------------------

EVAL_MODES = ("static", "chronological", "clip")


@dataclass
class EvalResult:
    frames: list[FrameResult]
    class_maps: list[tuple[np.ndarray, np.ndarray]]  # (pred, gt)
    summary: dict
    by_visibility: dict


def evaluate(
    sequences: list[Sequence],
    P: dict,
    cfg: EncoderConfig,
    mode: str = "chronological",
    frames_per_sample: int = 4,
    align: bool = True,
    frame_indices: list[list[int]] | None = None,
    warmup: int = 0,
    rig: CameraRig | None = None,
    score_thresh: float = 0.3,
    max_boxes: int = 300,
) -> EvalResult:
    """Replay sequences and score the selected frames.

    static: every frame alone. chronological: the previous BEV is carried
    across the whole sequence. clip: each frame sees only the
    ``frames_per_sample - 1`` frames before it, recomputed from scratch.
    ``rig`` overrides the calibration the model is told about (the images
    stay as rendered), which is how extrinsic noise is injected.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    refs_for = RefsCache(cfg)
    results, maps = [], []
    for si, seq in enumerate(sequences):
        refs = refs_for(seq.rig if rig is None else rig)
        wanted = set(range(len(seq.frames)) if frame_indices is None else frame_indices[si])
        wanted = {i for i in wanted if i >= warmup}
        prev = None
        for i, fr in enumerate(seq.frames):
            if mode == "clip":
                prev = run_history(seq.frames[max(0, i - frames_per_sample + 1) : i], P, cfg, refs, align)
            elif mode == "static":
                prev = None
            if i not in wanted and mode != "chronological":
                continue
            hist = prepare_history(prev, fr.pose, cfg, align)
            B, _ = encode_forward(P, cfg, prepare_images(fr.images), refs, hist)
            if mode == "chronological":
                prev = BevState(B.reshape(cfg.grid.H, cfg.grid.W, cfg.channels), fr.timestamp, fr.pose)
            if i in wanted:
                class_map, res = frame_result(B, P, cfg, fr, score_thresh, max_boxes)
                results.append(res)
                maps.append((class_map, fr.class_map))
    summary = detection_summary(results, max_preds=max_boxes)
    if maps:
        pred = np.stack([m[0] for m in maps])
        gt = np.stack([m[1] for m in maps])
        for c, name in enumerate(CLASSES):
            if c:
                summary[f"iou_{name}"] = segmentation_iou(pred, gt, c)
    return EvalResult(results, maps, summary, recall_by_visibility(results, max_preds=max_boxes))
