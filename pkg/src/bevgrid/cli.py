"""bevgrid command line: gen-data, train, eval, ablate, noise-sweep, project-debug, dump-bev.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Failures print one line to stderr: ``bevgrid-error<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig
from .encoder import build_spatial_refs, encode_forward, prepare_history, prepare_images
from .formats import FormatError, dump_bev, load_dataset, load_rig, read_ppm, save_dataset, write_ppm
from .geometry import AnchorHeights, BevGridSpec, hit_views, make_pillar
from .learner import run_history
from .metrics import bucket_counts, write_report
from .pipeline import build_dataset, fit, load_model, noise_sweep, run_ablation, save_model, score, summarize_sweep, write_table

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pair(text: str, typ=float, n=2):
    try:
        parts = [typ(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(parts)


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevgrid", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="numeric threads (default: $BEVGRID_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--sequences", type=int)
    g.add_argument("--frames", type=int)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--frames-per-sample", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report CSV path (default: next to the checkpoint)")
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--chronological", action="store_true", help="carry the previous BEV across each whole sequence")
    mode.add_argument("--clip", action="store_true", help="rebuild history from the preceding training-length clip")
    e.add_argument("--held-out", action="store_true", help="score only the interleaved held-out frames")
    e.add_argument("--warmup", type=int, default=0, help="skip the first N frames of each sequence")

    a = sub.add_parser("ablate", help="train and score a grid of variants")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", help="separate evaluation dataset (default: held-out frames of --data)")
    a.add_argument("--axis", required=True, choices=("frames", "A", "R", "B", "sca_mode"))
    a.add_argument("--seeds", type=_int_list, default=[0])
    a.add_argument("--steps", type=int)
    a.add_argument("--out", required=True)

    n = sub.add_parser("noise-sweep", help="evaluate under perturbed extrinsics")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--levels", type=_float_list, default=[0, 1, 2, 3, 4])
    n.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    n.add_argument("--out", required=True)

    d = sub.add_parser("project-debug", help="show where one BEV cell's pillar lands in each view")
    d.add_argument("--calib", required=True)
    d.add_argument("--grid", type=lambda s: _pair(s, float, 3), default=(32, 32, 0.5), help="H,W,s")
    d.add_argument("--cell", type=_pair, required=True, help="x,y")
    d.add_argument("--anchors", type=_float_list, default=[0.0, 0.6, 1.2, 1.8])
    d.add_argument("--images", help="frame directory with view_<i>.ppm to draw on")
    d.add_argument("--overlay", help="directory for overlay PPMs")

    b = sub.add_parser("dump-bev", help="export B_t of one frame")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--sequence", type=int, default=0)
    b.add_argument("--frame", type=int, default=0)
    b.add_argument("--format", choices=("pgm", "raw"), default="pgm")
    b.add_argument("--out", required=True)
    return p


def resolve_threads(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("BEVGRID_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"BEVGRID_THREADS must be an integer, got {env!r}")


def _load_run(path):
    return RunConfig() if path is None else RunConfig.load(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _load_run(args.config)
    data = replace(
        run.data,
        seed=run.data.seed if args.seed is None else args.seed,
        sequences=run.data.sequences if args.sequences is None else args.sequences,
        frames=run.data.frames if args.frames is None else args.frames,
    )
    if data.sequences < 1 or data.frames < 1:
        raise UsageError("--sequences and --frames must be >= 1")
    run = replace(run, data=data)
    seqs = build_dataset(run)
    save_dataset(seqs, args.out, {"config": run.to_dict()})
    print(f"wrote {len(seqs)} sequences x {data.frames} frames to {args.out}")
    return EXIT_OK


def _dataset(path):
    seqs, _ = load_dataset(path)
    return seqs


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume, _ = load_model(args.resume)
        run = resume.run
        if args.config:
            run = _load_run(args.config)
        if resume.state is None:
            raise UsageError(f"{args.resume} has no optimizer state to resume from")
    else:
        run = _load_run(args.config)
    tc = run.train
    if args.frames_per_sample is not None:
        tc = replace(tc, frames_per_sample=args.frames_per_sample)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    run = replace(run, train=tc)
    if resume is not None:
        resume.run = run
    seqs = _dataset(args.data)
    log_path = out / "train_log.csv"
    if resume is not None and not log_path.exists():
        raise UsageError(f"resume needs the previous log at {log_path}")
    model, log = fit(run, seqs, log_path=log_path, resume=resume)
    (out / "config.json").write_text(run.to_json())
    save_model(out / "model.ckpt", model)
    last = log[-1] if log else {}
    print(f"trained to step {model.state.step}; final loss {last.get('loss', float('nan')):.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    seqs = _dataset(args.data)
    mode = "chronological" if args.chronological else ("clip" if args.clip else "static")
    ev = score(model, seqs, mode=mode, held_out=args.held_out, warmup=args.warmup)
    rows = [(k, "all", float(v)) for k, v in ev.summary.items()]
    counts = bucket_counts(ev.frames)
    for b, v in ev.by_visibility.items():
        rows.append(("recall2m", f"visibility_{b}", v))
        rows.append(("n_objects", f"visibility_{b}", float(counts[b])))
    effective = mode if model.temporal else "static"
    summary = f"checkpoint {args.checkpoint}\nmode {effective}\nframes {len(ev.frames)}"
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_report(rows))
    out.with_suffix(".txt").write_text(summary + "\n" + "\n".join(f"{m} {g} {v}" for m, g, v in rows) + "\n")
    print(summary)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _load_run(args.config)
    if args.steps is not None:
        run = replace(run, train=replace(run.train, steps=args.steps))
    train_seqs = _dataset(args.data)
    eval_seqs = _dataset(args.eval_data) if args.eval_data else train_seqs
    out = Path(args.out)
    rows = run_ablation(args.axis, run, train_seqs, eval_seqs, seeds=args.seeds, held_out=args.eval_data is None)
    path = out / f"ablate_{args.axis}.csv" if out.suffix != ".csv" else out
    write_table(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    if any(l < 0 for l in args.levels):
        raise UsageError("noise levels must be non-negative")
    model, _ = load_model(args.checkpoint)
    seqs = _dataset(args.data)
    rows = noise_sweep(model, seqs, args.levels, args.seeds)
    out = Path(args.out)
    path = out / "noise.csv" if out.suffix != ".csv" else out
    write_table(path, rows)
    write_table(path.with_name(path.stem + "_summary.csv"), summarize_sweep(rows))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def project_report(rig, grid, anchors, cell) -> tuple[str, list[tuple[int, float, float, float]]]:
    """Text report and the (view, z, u, v) marks for one cell's pillar."""
    pillar = make_pillar(cell, grid, anchors)
    hits = hit_views(cell, grid, rig, anchors)
    lines = [f"cell {cell[0]:g},{cell[1]:g} -> ego ({pillar[0, 0]:.3f}, {pillar[0, 1]:.3f}) m"]
    marks = []
    if not hits:
        lines.append("no hits")
    for h in hits:
        z = anchors.z_levels[h.ref_index]
        u, v = h.pixel
        lines.append(f"view {h.view_id} z={z:.3f} u={u:.3f} v={v:.3f} depth={h.depth:.3f}")
        marks.append((h.view_id, float(z), u, v))
    return "\n".join(lines), marks


def draw_marks(img, marks, color=(255, 0, 255), arm: int = 3):
    out = img.copy()
    h, w = out.shape[:2]
    for u, v in marks:
        x, y = int(np.floor(u)), int(np.floor(v))
        for d in range(-arm, arm + 1):
            if 0 <= y < h and 0 <= x + d < w:
                out[y, x + d] = color
            if 0 <= y + d < h and 0 <= x < w:
                out[y + d, x] = color
    return out


def cmd_project_debug(args) -> int:
    rig = load_rig(args.calib)
    H, W, s = args.grid
    if H != int(H) or W != int(W):
        raise UsageError("--grid needs integer H and W")
    grid = BevGridSpec(int(H), int(W), s)
    anchors = AnchorHeights(tuple(args.anchors))
    text, marks = project_report(rig, grid, anchors, args.cell)
    print(text)
    if args.overlay:
        out = Path(args.overlay)
        out.mkdir(parents=True, exist_ok=True)
        for view in rig:
            if args.images:
                img = read_ppm(Path(args.images) / f"view_{view.id}.ppm")
            else:
                img = np.zeros((view.height, view.width, 3), np.uint8)
            pts = [(u, v) for vid, _, u, v in marks if vid == view.id]
            write_ppm(out / f"overlay_{view.id}.ppm", draw_marks(img, pts))
    return EXIT_OK


def cmd_dump_bev(args) -> int:
    model, _ = load_model(args.checkpoint)
    seqs = _dataset(args.data)
    if not 0 <= args.sequence < len(seqs):
        raise UsageError(f"--sequence out of range (have {len(seqs)})")
    seq = seqs[args.sequence]
    if not 0 <= args.frame < len(seq.frames):
        raise UsageError(f"--frame out of range (have {len(seq.frames)})")
    cfg = model.encoder
    refs = build_spatial_refs(cfg.grid, seq.rig, cfg.anchors)
    prev = run_history(seq.frames[: args.frame], model.params, cfg, refs, model.run.train.align_history) if model.temporal else None
    fr = seq.frames[args.frame]
    hist = prepare_history(prev, fr.pose, cfg, model.run.train.align_history)
    B, _ = encode_forward(model.params, cfg, prepare_images(fr.images), refs, hist)
    paths = dump_bev(B.reshape(cfg.grid.H, cfg.grid.W, cfg.channels), args.out, args.format)
    print(f"wrote {len(paths)} file(s) to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "noise-sweep": cmd_noise_sweep,
    "project-debug": cmd_project_debug,
    "dump-bev": cmd_dump_bev,
}


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"bevgrid-error\t{kind}\t{message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = resolve_threads(args.threads)
        if threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)

    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except ConfigError as e:
        return _fail("config", e, EXIT_USAGE)
    except FormatError as e:
        return _fail("data", e, EXIT_RUNTIME)
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as e:
        return _fail("runtime", f"{type(e).__name__}: {e}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
