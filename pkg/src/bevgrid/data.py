"""In-memory synthetic sequences: rendered views plus exact supervision per frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec, CameraRig, EgoPose
from .heads import FrameTargets, build_targets
from .scene import SceneSpec, SceneWorld, ground_truth_bev, make_scene, occlusion_labels, render_views, step_world


@dataclass
class Frame:
    timestamp: float
    pose: EgoPose
    images: np.ndarray  # (V, h, w, 3) uint8
    class_map: np.ndarray  # (H, W) int
    object_ids: np.ndarray  # (G,)
    centers: np.ndarray  # (G, 2) ego frame
    velocity: np.ndarray  # (G, 2) ego frame
    visibility: np.ndarray  # (G,)
    _targets: FrameTargets | None = field(default=None, repr=False)

    def targets(self, grid: BevGridSpec) -> FrameTargets:
        if self._targets is None:
            self._targets = build_targets(self.class_map, self.centers, self.velocity, grid)
        return self._targets


@dataclass
class Sequence:
    name: str
    rig: CameraRig
    frames: list[Frame]
    dt: float = 0.5

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def index_of(self, t: float) -> int:
        ts = self.timestamps
        i = int(np.argmin(np.abs(ts - t)))
        if abs(ts[i] - t) > 1e-6:
            raise KeyError(f"no frame at t={t}")
        return i


def frame_from_world(world: SceneWorld, rig: CameraRig, grid: BevGridSpec) -> Frame:
    images = np.stack(render_views(world, rig))
    class_map, truths = ground_truth_bev(world, grid)
    vis = occlusion_labels(world, rig) if truths else {}
    return Frame(
        timestamp=float(world.t),
        pose=world.ego,
        images=images,
        class_map=class_map,
        object_ids=np.array([t.id for t in truths], dtype=np.int64),
        centers=np.array([t.center for t in truths], float).reshape(-1, 2),
        velocity=np.array([t.velocity for t in truths], float).reshape(-1, 2),
        visibility=np.array([vis[t.id] for t in truths], float),
    )


def generate_sequence(spec: SceneSpec, rig: CameraRig, grid: BevGridSpec, n_frames: int, seed: int, name: str = "") -> Sequence:
    world = make_scene(spec, seed)
    frames = []
    for _ in range(n_frames):
        frames.append(frame_from_world(world, rig, grid))
        world = step_world(world)
    return Sequence(name or f"seq_{seed}", rig, frames, spec.dt)


def sequence_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(spec: SceneSpec, rig: CameraRig, grid: BevGridSpec, n_sequences: int, n_frames: int, seed: int = 0) -> list[Sequence]:
    return [
        generate_sequence(spec, rig, grid, n_frames, sequence_seed(seed, i), name=f"seq_{i:03d}") for i in range(n_sequences)
    ]


def split_frames(seq: Sequence, holdout_every: int = 4, offset: int = 3) -> tuple[list[int], list[int]]:
    """Interleaved split of frame indices into (train, held_out)."""
    idx = list(range(len(seq.frames)))
    held = [i for i in idx if holdout_every and i % holdout_every == offset % holdout_every]
    return [i for i in idx if i not in held], held
