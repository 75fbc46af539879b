"""End-to-end helpers shared by the CLI and the acceptance suite: build data,
train a model, evaluate it, run ablation grids and extrinsic-noise sweeps."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Sequence, generate_dataset, split_frames
from .encoder import EncoderConfig
from .formats import load_checkpoint, save_checkpoint
from .geometry import perturb_extrinsics
from .learner import AdamState, EvalResult, TrainConfig, evaluate, model_config, train

ABLATION_AXES = ("frames", "A", "R", "B", "sca_mode")
METRIC_FIELDS = ("iou_vehicle", "iou_road", "iou_lane", "recall2m", "vel_mae", "recall_0_40")


@dataclass
class Model:
    params: dict
    run: RunConfig
    state: AdamState | None = None

    @property
    def encoder(self) -> EncoderConfig:
        return model_config(self.run.encoder, self.run.train)

    @property
    def temporal(self) -> bool:
        return self.run.train.temporal


def build_dataset(run: RunConfig, seed: int | None = None, sequences: int | None = None, frames: int | None = None) -> list[Sequence]:
    d = run.data
    return generate_dataset(
        run.scene,
        run.rig.build(),
        run.encoder.grid,
        d.sequences if sequences is None else sequences,
        d.frames if frames is None else frames,
        d.seed if seed is None else seed,
    )


def fit(run: RunConfig, seqs: list[Sequence], log_path=None, resume: Model | None = None, on_step=None) -> tuple[Model, list[dict]]:
    train_frames = [split_frames(s, run.train.holdout_every)[0] for s in seqs]
    params = state = None
    if resume is not None:
        params, state = resume.params, resume.state
    res = train(seqs, run.encoder, run.train, params, state, log_path, train_frames, on_step)
    return Model(res.params, run, res.state), res.log


def default_mode(model: Model) -> str:
    return "chronological" if model.temporal else "static"


def score(model: Model, seqs: list[Sequence], mode: str | None = None, held_out: bool = False, warmup: int = 0, rig=None) -> EvalResult:
    """Evaluate; temporal models replay chronologically unless told otherwise."""
    tc = model.run.train
    mode = default_mode(model) if mode is None else mode
    if not model.temporal:
        mode = "static"
    idx = [split_frames(s, tc.holdout_every)[1] for s in seqs] if held_out else None
    return evaluate(
        seqs,
        model.params,
        model.encoder,
        mode=mode,
        frames_per_sample=tc.frames_per_sample,
        align=tc.align_history,
        frame_indices=idx,
        warmup=warmup,
        rig=rig,
        score_thresh=tc.score_thresh,
        max_boxes=tc.max_boxes,
    )


def metric_row(ev: EvalResult) -> dict:
    s = ev.summary
    r = ev.by_visibility.get("0-40")
    return {
        "iou_vehicle": s.get("iou_vehicle", float("nan")),
        "iou_road": s.get("iou_road", float("nan")),
        "iou_lane": s.get("iou_lane", float("nan")),
        "recall2m": s["recall2m"],
        "vel_mae": s["vel_mae"],
        "recall_0_40": float("nan") if r is None else r,
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: Model, extra_meta: dict | None = None) -> str:
    meta = {"config": model.run.to_dict(), "temporal": model.temporal, **(extra_meta or {})}
    extra = {}
    if model.state is not None:
        meta["adam_step"] = model.state.step
        for k in model.params:
            extra["adam.m." + k] = model.state.m[k]
            extra["adam.v." + k] = model.state.v[k]
    return save_checkpoint(path, model.params, meta, extra)


def load_model(path) -> tuple[Model, dict]:
    tensors, meta = load_checkpoint(path)
    run = RunConfig.from_dict(meta["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    state = None
    if "adam_step" in meta:
        state = AdamState(
            {k: tensors["adam.m." + k] for k in params}, {k: tensors["adam.v." + k] for k in params}, int(meta["adam_step"])
        )
    return Model(params, run, state), meta


# ---------------------------------------------------------------------------
# Ablations and noise sweeps
# ---------------------------------------------------------------------------


def ablation_variants(axis: str, run: RunConfig) -> list[tuple[str, RunConfig]]:
    """(label, config) per variant. Temporal switches are exercised on a temporal model."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}")
    tc = run.train
    temporal = tc if tc.temporal else replace(tc, frames_per_sample=4)

    def with_train(**kw):
        return replace(run, train=replace(temporal, **kw))

    if axis == "frames":
        return [(str(k), replace(run, train=replace(tc, frames_per_sample=k))) for k in range(1, 6)]
    if axis == "A":
        return [("on", with_train(align_history=True)), ("off", with_train(align_history=False))]
    if axis == "R":
        return [("on", with_train(random_frame_sampling=True)), ("off", with_train(random_frame_sampling=False))]
    if axis == "B":
        return [("on", with_train(tsa_concat_offsets=True)), ("off", with_train(tsa_concat_offsets=False))]
    return [(m, replace(run, encoder=replace(run.encoder, sca_mode=m))) for m in ("local", "points", "global")]


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    return replace(run, train=replace(run.train, seed=seed))


def run_ablation(axis, run: RunConfig, train_seqs, eval_seqs, seeds=(0,), held_out: bool = False, warmup: int = 1, on_variant=None) -> list[dict]:
    rows = []
    for label, variant in ablation_variants(axis, run):
        for seed in seeds:
            cfg = with_seed(variant, seed)
            t0 = time.perf_counter()
            model, log = fit(cfg, train_seqs)
            ev = score(model, eval_seqs, held_out=held_out, warmup=warmup)
            row = {"axis": axis, "variant": label, "seed": seed, "steps": cfg.train.steps, **metric_row(ev)}
            row["seconds"] = time.perf_counter() - t0
            rows.append(row)
            if on_variant is not None:
                on_variant(row, model)
    return rows


def noise_sweep(model: Model, seqs, levels=(0, 1, 2, 3, 4), seeds=(0, 1, 2), held_out: bool = False, warmup: int = 1) -> list[dict]:
    """One row per (level, seed); level 0 uses the clean calibration."""
    rows = []
    for level in levels:
        for seed in seeds:
            rig = None
            if level > 0:
                rig = perturb_extrinsics(seqs[0].rig, level, seed)
            ev = score(model, seqs, held_out=held_out, warmup=warmup, rig=rig)
            rows.append({"level": level, "seed": seed, **metric_row(ev)})
    return rows


def summarize_sweep(rows: list[dict], metric: str = "iou_vehicle") -> list[dict]:
    out = []
    for level in sorted({r["level"] for r in rows}):
        vals = np.array([r[metric] for r in rows if r["level"] == level], float)
        out.append({"level": level, "metric": metric, "mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals)})
    return out


def write_table(path, rows: list[dict]) -> None:
    """CSV with a header from the first row; floats get six decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
