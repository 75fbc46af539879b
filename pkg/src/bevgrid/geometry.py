"""BEV grid / world mapping, pillars, camera projection, hit views, ego alignment.

Frames: the ego frame is x forward, y left, z up with the ground plane at
z = 0. BEV arrays are indexed ``[row, col] = [y, x]`` in cell units. Camera
frames follow the usual pinhole convention (x right, y down, z forward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sampling import bilinear_sample_points

DEPTH_EPS = 1e-6
# sample coordinates closer than this to an integer snap onto the lattice
_LATTICE_SNAP = 1e-9


@dataclass(frozen=True)
class BevGridSpec:
    H: int
    W: int
    s: float
    origin_cell: tuple[float, float] | None = None

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.H}x{self.W}")
        if not self.s > 0:
            raise ValueError(f"cell size must be positive, got {self.s}")
        if self.origin_cell is None:
            object.__setattr__(self, "origin_cell", (self.W / 2, self.H / 2))
        else:
            object.__setattr__(self, "origin_cell", tuple(float(c) for c in self.origin_cell))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    def cell_to_world(self, x, y):
        x0, y0 = self.origin_cell
        return (np.asarray(x, float) - x0) * self.s, (np.asarray(y, float) - y0) * self.s

    def world_to_cell(self, xw, yw):
        x0, y0 = self.origin_cell
        return np.asarray(xw, float) / self.s + x0, np.asarray(yw, float) / self.s + y0

    def cell_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer cell coordinates (xs, ys), each (H, W)."""
        ys, xs = np.meshgrid(np.arange(self.H, dtype=float), np.arange(self.W, dtype=float), indexing="ij")
        return xs, ys


def bev_cell_to_world(p, grid: BevGridSpec) -> tuple[float, float]:
    x, y = p
    xw, yw = grid.cell_to_world(x, y)
    return float(xw), float(yw)


@dataclass(frozen=True)
class AnchorHeights:
    z_levels: tuple[float, ...] = tuple(np.linspace(-5.0, 3.0, 4).tolist())

    def __post_init__(self):
        object.__setattr__(self, "z_levels", tuple(float(z) for z in self.z_levels))
        if len(self.z_levels) < 1:
            raise ValueError("at least one anchor height is required")

    def __len__(self):
        return len(self.z_levels)


def make_pillar(p, grid: BevGridSpec, anchors: AnchorHeights) -> np.ndarray:
    """The (N_ref, 3) column of reference points above cell ``p``."""
    xw, yw = bev_cell_to_world(p, grid)
    z = np.asarray(anchors.z_levels, float)
    return np.column_stack([np.full_like(z, xw), np.full_like(z, yw), z])


def _wrap_angle(a: float) -> float:
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class EgoPose:
    translation: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))

    def ego_to_world(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return c * x - s * y + self.translation[0], s * x + c * y + self.translation[1]

    def world_to_ego(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x, float) - self.translation[0]
        dy = np.asarray(y, float) - self.translation[1]
        return c * dx + s * dy, -s * dx + c * dy


@dataclass(eq=False)
class CameraView:
    """A pinhole view. ``T`` maps homogeneous ego-frame meters to homogeneous pixels.

    ``rotation``/``translation`` are the optional extrinsic factors
    (x_cam = R x_ego + t) used for noise injection.
    """

    T: np.ndarray
    width: int
    height: int
    id: int = 0
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None

    def __post_init__(self):
        self.T = np.array(self.T, dtype=float).reshape(3, 4)
        if not np.all(np.isfinite(self.T)):
            raise ValueError(f"view {self.id}: projection matrix has non-finite entries")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"view {self.id}: bad image size {self.width}x{self.height}")
        if self.rotation is not None:
            self.rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
            self.translation = np.array(self.translation, dtype=float).reshape(3)

    @property
    def intrinsics(self) -> np.ndarray:
        if self.rotation is None:
            raise ValueError(f"view {self.id} has no extrinsic decomposition")
        return self.T[:, :3] @ self.rotation.T

    @property
    def center(self) -> np.ndarray:
        """Camera center in the ego frame."""
        if self.rotation is not None:
            return -self.rotation.T @ self.translation
        return -np.linalg.solve(self.T[:, :3], self.T[:, 3])


def camera_from_krt(K, R, t, width: int, height: int, id: int = 0) -> CameraView:
    K = np.asarray(K, float)
    R = np.asarray(R, float)
    t = np.asarray(t, float).reshape(3)
    T = K @ np.column_stack([R, t])
    return CameraView(T=T, width=width, height=height, id=id, rotation=R, translation=t)


def look_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Ego-to-camera rotation for a camera heading ``yaw`` and tilted down by ``pitch``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass(eq=False)
class CameraRig:
    views: list[CameraView] = field(default_factory=list)

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("a rig needs at least one view")
        ids = [v.id for v in self.views]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"view ids must be dense 0..N-1, got {ids}")
        self.views = sorted(self.views, key=lambda v: v.id)

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


def ring_rig(
    n_views: int = 4,
    width: int = 128,
    height: int = 96,
    hfov_deg: float = 90.0,
    mount_height: float = 1.6,
    pitch_deg: float = 10.0,
) -> CameraRig:
    """Cameras at the ego origin spread evenly in yaw, the first facing +x."""
    f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    c = np.array([0.0, 0.0, mount_height])
    views = []
    for i in range(n_views):
        R = look_rotation(2 * math.pi * i / n_views, math.radians(pitch_deg))
        views.append(camera_from_krt(K, R, -R @ c, width, height, id=i))
    return CameraRig(views)


def project_points(points: np.ndarray, view: CameraView):
    """Project (N, 3) ego points. Returns (uv (N, 2), depth (N,), hit (N,))."""
    pts = np.asarray(points, float).reshape(-1, 3)
    homo = pts @ view.T[:, :3].T + view.T[:, 3]
    depth = homo[:, 2]
    front = depth > DEPTH_EPS
    safe = np.where(front, depth, 1.0)
    uv = homo[:, :2] / safe[:, None]
    hit = (
        front
        & (uv[:, 0] >= 0)
        & (uv[:, 0] <= view.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= view.height)
    )
    return uv, depth, hit


def project_point(q, view: CameraView):
    """Project one ego-frame point; returns (u, v, depth) or None for a miss."""
    uv, depth, hit = project_points(np.asarray(q, float)[None], view)
    if not hit[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


@dataclass(frozen=True)
class HitRecord:
    view_id: int
    ref_index: int
    pixel: tuple[float, float]
    depth: float


def hit_views(p, grid: BevGridSpec, rig: CameraRig, anchors: AnchorHeights) -> list[HitRecord]:
    pillar = make_pillar(p, grid, anchors)
    out = []
    for view in rig:
        uv, depth, hit = project_points(pillar, view)
        for j in np.flatnonzero(hit):
            out.append(HitRecord(view.id, int(j), (float(uv[j, 0]), float(uv[j, 1])), float(depth[j])))
    return out


def pillar_projections(grid: BevGridSpec, rig: CameraRig, anchors: AnchorHeights):
    """Project every cell's pillar into every view.

    Returns ``uv`` (N_view, H*W, N_ref, 2) pixel coords and ``hit``
    (N_view, H*W, N_ref); cells are flattened row-major.
    """
    xs, ys = grid.cell_grid()
    xw, yw = grid.cell_to_world(xs.ravel(), ys.ravel())
    z = np.asarray(anchors.z_levels)
    n, r = xw.size, z.size
    pts = np.stack(
        [np.repeat(xw, r), np.repeat(yw, r), np.tile(z, n)], axis=1
    )
    uvs, hits = [], []
    for view in rig:
        uv, _, hit = project_points(pts, view)
        uvs.append(uv.reshape(n, r, 2))
        hits.append(hit.reshape(n, r))
    return np.stack(uvs), np.stack(hits)


@dataclass(eq=False)
class BevState:
    features: np.ndarray
    timestamp: float = 0.0
    pose: EgoPose = field(default_factory=EgoPose)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3:
            raise ValueError(f"BEV features must be H x W x C, got shape {self.features.shape}")


def alignment_sample_coords(pose_prev: EgoPose, pose_cur: EgoPose, grid: BevGridSpec):
    """Fractional cell coords in the previous grid for every current cell, (H, W) each."""
    xs, ys = grid.cell_grid()
    xw, yw = grid.cell_to_world(xs, ys)
    dyaw = pose_cur.yaw - pose_prev.yaw
    c, s = math.cos(dyaw), math.sin(dyaw)
    # current ego frame -> previous ego frame
    cp, sp = math.cos(pose_prev.yaw), math.sin(pose_prev.yaw)
    dtx = pose_cur.translation[0] - pose_prev.translation[0]
    dty = pose_cur.translation[1] - pose_prev.translation[1]
    ox = cp * dtx + sp * dty
    oy = -sp * dtx + cp * dty
    px = c * xw - s * yw + ox
    py = s * xw + c * yw + oy
    u, v = grid.world_to_cell(px, py)
    for a in (u, v):
        r = np.round(a)
        snap = np.abs(a - r) < _LATTICE_SNAP
        a[snap] = r[snap]
    return u, v


def align_features(features: np.ndarray, pose_prev: EgoPose, pose_cur: EgoPose, grid: BevGridSpec) -> np.ndarray:
    if features.shape[:2] != grid.shape:
        raise ValueError(f"history grid {features.shape[:2]} does not match {grid.shape}")
    u, v = alignment_sample_coords(pose_prev, pose_cur, grid)
    return bilinear_sample_points(features, u, v)


def align_history_bev(prev: BevState, pose_prev: EgoPose, pose_cur: EgoPose, grid: BevGridSpec) -> BevState:
    """Resample ``prev`` so each cell refers to the same world point under ``pose_cur``."""
    feats = align_features(prev.features, pose_prev, pose_cur, grid)
    return BevState(feats, prev.timestamp, pose_cur)


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


def extrinsic_noise(level: float, rng: np.random.Generator, n: int = 1):
    """Draw ``n`` rotation (degrees) and translation (centimeters) noise triples.

    Both are zero-mean normal with *variance* ``level`` and ``5 * level``.
    """
    if level < 0:
        raise ValueError(f"noise level must be non-negative, got {level}")
    rot = rng.normal(0.0, math.sqrt(level), size=(n, 3))
    trans = rng.normal(0.0, math.sqrt(5.0 * level), size=(n, 3))
    return rot, trans


def perturb_extrinsics(rig: CameraRig, level: float, seed) -> CameraRig:
    """Perturb each view's camera pose (camera-to-ego rotation and center) with
    independent :func:`extrinsic_noise`, then recompose T with unchanged intrinsics.
    """
    if level < 0:
        raise ValueError(f"noise level must be non-negative, got {level}")
    if level == 0:
        return CameraRig(list(rig.views))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    views = []
    for view in rig:
        if view.rotation is None:
            raise ValueError(f"view {view.id} has no rotation/translation decomposition")
        rot, trans = extrinsic_noise(level, rng)
        angles = np.radians(rot[0])
        noise = _axis_rotation(0, angles[0]) @ _axis_rotation(1, angles[1]) @ _axis_rotation(2, angles[2])
        cam_to_ego = noise @ view.rotation.T
        center = view.center + trans[0] / 100.0
        R = cam_to_ego.T
        views.append(camera_from_krt(view.intrinsics, R, -R @ center, view.width, view.height, view.id))
    return CameraRig(views)
