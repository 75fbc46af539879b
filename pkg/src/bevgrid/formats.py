"""On-disk formats: PPM/PGM images, calibration and pose JSON, dataset
directories, binary checkpoints, and BEV feature dumps."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import Frame, Sequence
from .geometry import CameraRig, CameraView, EgoPose


class FormatError(ValueError):
    """Malformed or incompatible file contents."""


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (h, w, 3) uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM needs an (h, w) uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    n = w * h * channels
    if len(data) - pos < n:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# Calibration and poses
# ---------------------------------------------------------------------------


def rig_to_json(rig: CameraRig) -> dict:
    views = []
    for v in rig:
        d = {"id": v.id, "T": v.T.ravel().tolist(), "width": v.width, "height": v.height}
        if v.rotation is not None:
            d["rotation"] = v.rotation.ravel().tolist()
            d["translation"] = v.translation.tolist()
        views.append(d)
    return {"views": views}


def rig_from_json(d: dict) -> CameraRig:
    try:
        views = []
        for v in d["views"]:
            extra = set(v) - {"id", "T", "width", "height", "rotation", "translation"}
            if extra:
                raise FormatError(f"unknown calibration keys {sorted(extra)}")
            if len(v["T"]) != 12:
                raise FormatError(f"view {v.get('id')}: T needs 12 numbers")
            views.append(
                CameraView(
                    T=np.array(v["T"], float),
                    width=int(v["width"]),
                    height=int(v["height"]),
                    id=int(v["id"]),
                    rotation=v.get("rotation"),
                    translation=v.get("translation"),
                )
            )
        return CameraRig(views)
    except (KeyError, TypeError) as e:
        raise FormatError(f"bad calibration: {e}") from e


def save_rig(path, rig: CameraRig) -> None:
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=1))


def load_rig(path) -> CameraRig:
    try:
        return rig_from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e


def save_poses(path, timestamps, poses) -> None:
    rows = [{"t": float(t), "tx": p.translation[0], "ty": p.translation[1], "yaw": p.yaw} for t, p in zip(timestamps, poses)]
    Path(path).write_text(json.dumps(rows, indent=1))


def load_poses(path) -> list[tuple[float, EgoPose]]:
    rows = json.loads(Path(path).read_text())
    try:
        return [(float(r["t"]), EgoPose((r["tx"], r["ty"]), r["yaw"])) for r in rows]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad pose record: {e}") from e


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


def frame_dir(seq_dir, i: int) -> Path:
    return Path(seq_dir) / f"frame_{i:03d}"


def save_sequence(seq: Sequence, seq_dir) -> None:
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    save_rig(seq_dir / "calib.json", seq.rig)
    save_poses(seq_dir / "poses.json", [f.timestamp for f in seq.frames], [f.pose for f in seq.frames])
    for i, fr in enumerate(seq.frames):
        d = frame_dir(seq_dir, i)
        d.mkdir(exist_ok=True)
        for v, img in enumerate(fr.images):
            write_ppm(d / f"view_{v}.ppm", img)
        write_pgm(d / "gt.pgm", fr.class_map.astype(np.uint8))
        objects = [
            {"id": int(o), "center": c.tolist(), "velocity": vel.tolist(), "visibility": float(vis)}
            for o, c, vel, vis in zip(fr.object_ids, fr.centers, fr.velocity, fr.visibility)
        ]
        (d / "gt.json").write_text(json.dumps({"t": fr.timestamp, "objects": objects}, indent=1))


def load_sequence(seq_dir) -> Sequence:
    seq_dir = Path(seq_dir)
    rig = load_rig(seq_dir / "calib.json")
    poses = load_poses(seq_dir / "poses.json")
    frames = []
    for i, (t, pose) in enumerate(poses):
        d = frame_dir(seq_dir, i)
        images = np.stack([read_ppm(d / f"view_{v}.ppm") for v in range(len(rig))])
        side = json.loads((d / "gt.json").read_text())
        objs = side["objects"]
        frames.append(
            Frame(
                timestamp=t,
                pose=pose,
                images=images,
                class_map=read_pgm(d / "gt.pgm").astype(np.int64),
                object_ids=np.array([o["id"] for o in objs], dtype=np.int64),
                centers=np.array([o["center"] for o in objs], float).reshape(-1, 2),
                velocity=np.array([o["velocity"] for o in objs], float).reshape(-1, 2),
                visibility=np.array([o["visibility"] for o in objs], float),
            )
        )
    dt = poses[1][0] - poses[0][0] if len(poses) > 1 else 0.5
    return Sequence(seq_dir.name, rig, frames, dt)


def save_dataset(seqs: list[Sequence], root, meta: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for seq in seqs:
        save_sequence(seq, root / seq.name)
    (root / "dataset.json").write_text(json.dumps({"sequences": [s.name for s in seqs], **(meta or {})}, indent=1, sort_keys=True))


def load_dataset(root) -> tuple[list[Sequence], dict]:
    root = Path(root)
    index = root / "dataset.json"
    if not index.exists():
        raise FormatError(f"{root}: not a dataset directory (missing dataset.json)")
    meta = json.loads(index.read_text())
    return [load_sequence(root / name) for name in meta["sequences"]], meta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"BEVGRID\x00"
CKPT_VERSION = 1


def _digest(meta: dict) -> str:
    return hashlib.sha256(json.dumps(meta.get("config", {}), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_checkpoint(path, params: dict, meta: dict, extra_tensors: dict | None = None) -> str:
    """Write params (plus optional extra tensors) with an embedded JSON ``meta``.

    ``meta["config"]`` is hashed into the header. Returns the digest.
    """
    digest = _digest(meta)
    tensors = dict(params)
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(digest.encode("ascii"))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)
    return digest


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (tensors by name, meta)."""
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(path, data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint: {e}") from e


def _parse_checkpoint(path, data: bytes) -> tuple[dict, dict]:
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = data[pos : pos + 64].decode("ascii")
    pos += 64
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + n])
    pos += n
    if _digest(meta) != digest:
        raise FormatError(f"{path}: config digest mismatch")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(data):
            raise FormatError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    return tensors, meta


# ---------------------------------------------------------------------------
# BEV feature dumps
# ---------------------------------------------------------------------------


def dump_bev(features: np.ndarray, out_dir, fmt: str = "pgm") -> list[Path]:
    """One min-max normalized PGM per channel, or a single .npy tensor."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "raw":
        p = out_dir / "bev.npy"
        np.save(p, np.asarray(features, dtype="<f8"))
        return [p]
    if fmt != "pgm":
        raise ValueError(f"unknown dump format {fmt!r}")
    paths = []
    for c in range(features.shape[-1]):
        ch = features[..., c]
        lo, hi = float(ch.min()), float(ch.max())
        img = np.zeros(ch.shape, np.uint8) if hi <= lo else np.round(255 * (ch - lo) / (hi - lo)).astype(np.uint8)
        p = out_dir / f"bev_c{c:03d}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths
