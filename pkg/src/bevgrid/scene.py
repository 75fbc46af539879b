"""Synthetic multi-camera world: moving boxes, static occluders, flat road markings.

Rendering splats densely sampled box surfaces into each camera with a
z-buffer. Ground truth is exact: footprints rasterized into the BEV grid,
constant-velocity motion, and per-object visibility fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BevGridSpec, CameraRig, CameraView, EgoPose

CLASSES = ("background", "vehicle", "road", "lane")
BACKGROUND, VEHICLE, ROAD, LANE = range(4)
OCCLUDER = -1
# later entries paint over earlier ones in the BEV labels
Z_ORDER = {ROAD: 0, LANE: 1, VEHICLE: 2}

SKY = np.array([0.55, 0.7, 0.9])
GROUND = np.array([0.35, 0.35, 0.32])
CLASS_COLORS = {
    VEHICLE: np.array([0.85, 0.2, 0.15]),
    ROAD: np.array([0.2, 0.2, 0.22]),
    LANE: np.array([0.95, 0.95, 0.6]),
    OCCLUDER: np.array([0.55, 0.5, 0.45]),
}
# face shading so box edges stay visible under a constant albedo
_FACE_SHADE = {"top": 1.0, "front": 0.8, "back": 0.8, "left": 0.62, "right": 0.62}


@dataclass(frozen=True)
class SceneObject:
    id: int
    center: tuple[float, float]
    size: tuple[float, float]  # footprint (length along heading, width)
    z_range: tuple[float, float]
    yaw: float
    cls: int
    velocity: tuple[float, float] = (0.0, 0.0)
    color: tuple[float, float, float] = (0.8, 0.2, 0.2)

    @property
    def flat(self) -> bool:
        return self.cls in (ROAD, LANE)

    def corners(self) -> np.ndarray:
        """(4, 2) footprint corners in world meters."""
        l, w = self.size
        local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + np.asarray(self.center)

    def contains(self, x, y) -> np.ndarray:
        """Point-in-footprint test (closed rectangle) for world points."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x, float) - self.center[0]
        dy = np.asarray(y, float) - self.center[1]
        a = c * dx + s * dy
        b = -s * dx + c * dy
        return (np.abs(a) <= self.size[0] / 2) & (np.abs(b) <= self.size[1] / 2)


@dataclass(frozen=True)
class SceneSpec:
    n_vehicles: int = 8
    n_occluders: int = 3
    n_roads: int = 1
    n_lanes: int = 1
    half_extent: float = 11.0
    vehicle_speed: tuple[float, float] = (0.0, 3.0)
    moving_fraction: float = 0.75
    ego_speed: tuple[float, float] = (0.0, 1.0)
    ego_yaw_rate: float = 0.1
    ego_clearance: float = 3.0
    dt: float = 0.5


@dataclass(frozen=True)
class SceneWorld:
    objects: tuple[SceneObject, ...]
    occluders: tuple[SceneObject, ...]
    ego: EgoPose
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    dt: float = 0.5
    bounds: tuple[float, float, float, float] = (-22.0, 22.0, -22.0, 22.0)
    t: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def solids(self) -> tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if not o.flat) + self.occluders

    @property
    def vehicles(self) -> tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if o.cls == VEHICLE)


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corners."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _inside_bounds(corners: np.ndarray, bounds) -> bool:
    x0, x1, y0, y1 = bounds
    return bool(np.all((corners[:, 0] >= x0) & (corners[:, 0] <= x1) & (corners[:, 1] >= y0) & (corners[:, 1] <= y1)))


def make_scene(spec: SceneSpec = SceneSpec(), seed: int = 0, max_tries: int = 200) -> SceneWorld:
    """Deterministic random world; solid footprints never overlap each other or the ego start."""
    rng = np.random.default_rng(seed)
    e = spec.half_extent
    bounds = (-e, e, -e, e)
    ego = EgoPose((0.0, 0.0), rng.uniform(-math.pi, math.pi))
    ego_speed = rng.uniform(*spec.ego_speed)
    ego_yaw_rate = rng.uniform(-spec.ego_yaw_rate, spec.ego_yaw_rate)
    r = spec.ego_clearance
    placed = [np.array([[r, r], [r, -r], [-r, -r], [-r, r]])]
    objects: list[SceneObject] = []
    occluders: list[SceneObject] = []
    next_id = 0

    def place(size_fn, z_fn, cls, moving):
        nonlocal next_id
        for _ in range(max_tries):
            size = size_fn()
            yaw = rng.uniform(-math.pi, math.pi)
            center = tuple(rng.uniform(-e, e, size=2))
            obj = SceneObject(next_id, center, size, z_fn(), yaw, cls)
            corners = obj.corners()
            if not _inside_bounds(corners, bounds):
                continue
            if any(_rects_overlap(corners, other) for other in placed):
                continue
            vel = (0.0, 0.0)
            if moving and rng.uniform() < spec.moving_fraction:
                speed = rng.uniform(*spec.vehicle_speed)
                vel = (speed * math.cos(yaw), speed * math.sin(yaw))
            shade = rng.uniform(0.8, 1.15)
            color = tuple(np.clip(CLASS_COLORS[cls] * shade, 0, 1).tolist())
            obj = replace(obj, velocity=vel, color=color)
            placed.append(corners)
            next_id += 1
            return obj
        return None

    for _ in range(spec.n_vehicles):
        o = place(lambda: (rng.uniform(3.6, 4.6), rng.uniform(1.7, 2.1)), lambda: (0.0, rng.uniform(1.4, 1.9)), VEHICLE, True)
        if o is not None:
            objects.append(o)
    for _ in range(spec.n_occluders):
        o = place(lambda: (rng.uniform(3.0, 7.0), rng.uniform(0.4, 0.8)), lambda: (0.0, rng.uniform(2.4, 3.2)), OCCLUDER, False)
        if o is not None:
            occluders.append(o)
    # flat markings ignore overlap: vehicles drive on roads
    for cls, n, width in ((ROAD, spec.n_roads, (5.0, 8.0)), (LANE, spec.n_lanes, (0.3, 0.5))):
        for _ in range(n):
            yaw = rng.uniform(-math.pi, math.pi)
            length = 2 * e
            center = tuple(rng.uniform(-e / 3, e / 3, size=2))
            z = (0.0, 0.01) if cls == ROAD else (0.0, 0.02)
            color = tuple(np.clip(CLASS_COLORS[cls] * rng.uniform(0.9, 1.1), 0, 1).tolist())
            objects.append(SceneObject(next_id, center, (length, rng.uniform(*width)), z, yaw, cls, (0.0, 0.0), color))
            next_id += 1
    return SceneWorld(tuple(objects), tuple(occluders), ego, ego_speed, ego_yaw_rate, spec.dt, bounds, 0.0)


def advance_pose(pose: EgoPose, speed: float, yaw_rate: float, dt: float) -> EgoPose:
    """Exact constant-speed, constant-turn-rate integration (chord form, stable as the rate goes to 0)."""
    half = 0.5 * yaw_rate * dt
    chord = speed * dt * float(np.sinc(half / math.pi))
    heading = pose.yaw + half
    x, y = pose.translation
    return EgoPose((x + chord * math.cos(heading), y + chord * math.sin(heading)), pose.yaw + yaw_rate * dt)


def step_world(world: SceneWorld, dt: float | None = None) -> SceneWorld:
    dt = world.dt if dt is None else dt
    objects = tuple(
        replace(o, center=(o.center[0] + o.velocity[0] * dt, o.center[1] + o.velocity[1] * dt)) for o in world.objects
    )
    ego = advance_pose(world.ego, world.ego_speed, world.ego_yaw_rate, dt)
    return replace(world, objects=objects, ego=ego, t=world.t + dt)


# ---------------------------------------------------------------------------
# Surface sampling and splatting
# ---------------------------------------------------------------------------


def _face_grid(a: float, b: float, spacing: float):
    na = max(1, math.ceil(a / spacing))
    nb = max(1, math.ceil(b / spacing))
    ga = (np.arange(na) + 0.5) / na - 0.5
    gb = (np.arange(nb) + 0.5) / nb - 0.5
    A, B = np.meshgrid(ga * a, gb * b, indexing="ij")
    return A.ravel(), B.ravel()


def surface_points(obj: SceneObject, spacing: float):
    """World-frame samples of the top and side faces; returns (points (N, 3), shade (N,))."""
    l, w = obj.size
    z0, z1 = obj.z_range
    hgt = z1 - z0
    pts, shade = [], []
    a, b = _face_grid(l, w, spacing)
    pts.append(np.column_stack([a, b, np.full_like(a, z1)]))
    shade.append(np.full(a.size, _FACE_SHADE["top"]))
    if not obj.flat:
        a, zz = _face_grid(l, hgt, spacing)
        zz = zz + (z0 + z1) / 2
        for side, name in ((w / 2, "left"), (-w / 2, "right")):
            pts.append(np.column_stack([a, np.full_like(a, side), zz]))
            shade.append(np.full(a.size, _FACE_SHADE[name]))
        b, zz = _face_grid(w, hgt, spacing)
        zz = zz + (z0 + z1) / 2
        for side, name in ((l / 2, "front"), (-l / 2, "back")):
            pts.append(np.column_stack([np.full_like(b, side), b, zz]))
            shade.append(np.full(b.size, _FACE_SHADE[name]))
    local = np.concatenate(pts)
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    world = np.column_stack(
        [c * local[:, 0] - s * local[:, 1] + obj.center[0], s * local[:, 0] + c * local[:, 1] + obj.center[1], local[:, 2]]
    )
    return world, np.concatenate(shade)


def _focal(view: CameraView) -> float:
    if view.rotation is not None:
        return float(view.intrinsics[0, 0])
    return float(np.linalg.norm(view.T[0, :3]))


@dataclass
class SplatBuffers:
    color: np.ndarray  # (h, w, 3) float, NaN where empty
    depth: np.ndarray  # (h, w) nearest depth, inf where empty
    ids: np.ndarray  # (h, w) id of the nearest point, -1 where empty
    depth_other: np.ndarray  # (h, w) nearest depth among ids different from ``ids``


def splat(points: np.ndarray, colors: np.ndarray, ids: np.ndarray, view: CameraView, spacing, max_radius: int = 12) -> SplatBuffers:
    """Z-buffered square splats of ego-frame points into one view.

    Each point covers at least its sample spacing in pixels, so fronto-parallel
    faces render without holes (radius clipped to ``max_radius``); nearer
    points win.
    """
    h, w = view.height, view.width
    homo = points @ view.T[:, :3].T + view.T[:, 3]
    depth = homo[:, 2]
    front = depth > 1e-3
    pts_uv = homo[front, :2] / depth[front, None]
    depth = depth[front]
    colors = colors[front]
    ids = ids[front]
    spacing = np.broadcast_to(np.asarray(spacing, float), front.shape)[front]
    radius = np.clip(np.ceil(0.5 * spacing * _focal(view) / depth), 0, max_radius).astype(np.int64)
    px = np.floor(pts_uv[:, 0]).astype(np.int64)
    py = np.floor(pts_uv[:, 1]).astype(np.int64)
    all_pix, all_d, all_src = [], [], []
    for r in np.unique(radius):
        sel = np.flatnonzero(radius == r)
        offs = np.arange(-r, r + 1)
        ox, oy = np.meshgrid(offs, offs)
        X = (px[sel, None] + ox.ravel()[None]).ravel()
        Y = (py[sel, None] + oy.ravel()[None]).ravel()
        src = np.repeat(sel, ox.size)
        inside = (X >= 0) & (X < w) & (Y >= 0) & (Y < h)
        all_pix.append(Y[inside] * w + X[inside])
        all_d.append(depth[src[inside]])
        all_src.append(src[inside])
    color_buf = np.full((h * w, 3), np.nan)
    depth_buf = np.full(h * w, np.inf)
    id_buf = np.full(h * w, -1, dtype=np.int64)
    other_buf = np.full(h * w, np.inf)
    if all_pix:
        pix = np.concatenate(all_pix)
        d = np.concatenate(all_d)
        src = np.concatenate(all_src)
        order = np.lexsort((src, d, pix))
        pix, d, src = pix[order], d[order], src[order]
        first = np.ones(pix.size, dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        fi = np.flatnonzero(first)
        depth_buf[pix[fi]] = d[fi]
        color_buf[pix[fi]] = colors[src[fi]]
        id_buf[pix[fi]] = ids[src[fi]]
        # nearest entry from a different id than the winner, per pixel
        group = np.cumsum(first) - 1
        winner = ids[src[fi]][group]
        differs = ids[src] != winner
        if differs.any():
            dp = pix[differs]
            dd = d[differs]
            f2 = np.ones(dp.size, dtype=bool)
            f2[1:] = dp[1:] != dp[:-1]
            other_buf[dp[f2]] = dd[f2]
    return SplatBuffers(color_buf.reshape(h, w, 3), depth_buf.reshape(h, w), id_buf.reshape(h, w), other_buf.reshape(h, w))


def _world_to_ego_points(points: np.ndarray, ego: EgoPose) -> np.ndarray:
    ex, ey = ego.world_to_ego(points[:, 0], points[:, 1])
    return np.column_stack([ex, ey, points[:, 2]])


def _scene_points(world: SceneWorld, ego: EgoPose, spacing: float, include_flat: bool = True):
    pts, cols, ids, sp = [], [], [], []
    objs = list(world.objects) + list(world.occluders)
    for o in objs:
        if o.flat and not include_flat:
            continue
        osp = spacing * (2.0 if o.flat else 1.0)
        p, shade = surface_points(o, osp)
        pts.append(_world_to_ego_points(p, ego))
        cols.append(np.asarray(o.color)[None] * shade[:, None])
        ids.append(np.full(len(p), o.id if o.cls != OCCLUDER else 10_000 + o.id))
        sp.append(np.full(len(p), osp))
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(pts), np.concatenate(cols), np.concatenate(ids), np.concatenate(sp)


def _pixel_rays(view: CameraView):
    h, w = view.height, view.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)])
    return np.linalg.solve(view.T[:, :3], pix)  # ego-frame ray directions, (3, h*w)


def background(view: CameraView) -> np.ndarray:
    """Sky above the horizon, ground below; (h, w, 3) in [0, 1]."""
    ground = _pixel_rays(view)[2] < 0
    img = np.where(ground[:, None], GROUND[None], SKY[None])
    return img.reshape(view.height, view.width, 3)


def paint_ground(img: np.ndarray, view: CameraView, world: SceneWorld, ego: EgoPose) -> np.ndarray:
    """Paint flat markings where each pixel ray meets the ground plane."""
    flats = sorted((o for o in world.objects if o.flat), key=lambda o: (Z_ORDER[o.cls], o.id))
    if not flats:
        return img
    rays = _pixel_rays(view)
    down = rays[2] < 0
    c = view.center
    lam = -c[2] / rays[2, down]
    gx, gy = ego.ego_to_world(c[0] + lam * rays[0, down], c[1] + lam * rays[1, down])
    flat_img = img.reshape(-1, 3)
    idx = np.flatnonzero(down)
    for o in flats:
        flat_img[idx[o.contains(gx, gy)]] = o.color
    return img


def render_views(world: SceneWorld, rig: CameraRig, ego_pose: EgoPose | None = None, spacing: float = 0.1) -> list[np.ndarray]:
    """uint8 (h, w, 3) image per view.

    Solid boxes are point-splatted; flat markings are painted on the ground
    plane underneath them.
    """
    ego = world.ego if ego_pose is None else ego_pose
    pts, cols, ids, sp = _scene_points(world, ego, spacing, include_flat=False)
    images = []
    for view in rig:
        img = paint_ground(background(view), view, world, ego)
        if len(pts):
            buf = splat(pts, cols, ids, view, sp)
            filled = np.isfinite(buf.depth)
            img[filled] = buf.color[filled]
        images.append(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))
    return images


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass
class ObjectTruth:
    id: int
    cls: int
    center: tuple[float, float]  # ego frame, meters
    velocity: tuple[float, float]  # ego frame, m/s
    visibility: float = 1.0


def ground_truth_bev(world: SceneWorld, grid: BevGridSpec, ego_pose: EgoPose | None = None):
    """(H, W) class map plus the vehicles whose centers fall inside the grid."""
    ego = world.ego if ego_pose is None else ego_pose
    xs, ys = grid.cell_grid()
    ex, ey = grid.cell_to_world(xs, ys)
    wx, wy = ego.ego_to_world(ex, ey)
    labels = np.zeros(grid.shape, dtype=np.int64)
    order = sorted(world.objects, key=lambda o: (Z_ORDER[o.cls], o.id))
    for o in order:
        labels[o.contains(wx, wy)] = o.cls
    truths = []
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    for o in world.vehicles:
        cx, cy = ego.world_to_ego(o.center[0], o.center[1])
        u, v = grid.world_to_cell(cx, cy)
        if not (-0.5 <= u < grid.W - 0.5 and -0.5 <= v < grid.H - 0.5):
            continue
        vx = c * o.velocity[0] + s * o.velocity[1]
        vy = -s * o.velocity[0] + c * o.velocity[1]
        truths.append(ObjectTruth(o.id, o.cls, (float(cx), float(cy)), (float(vx), float(vy))))
    return labels, truths


def occlusion_labels(world: SceneWorld, rig: CameraRig, ego_pose: EgoPose | None = None, spacing: float = 0.1,
                     vis_spacing: float = 0.25, depth_tol: float = 0.05, objects=None) -> dict[int, float]:
    """Fraction of each vehicle's surface samples visible in at least one camera.

    A sample is visible in a view when it projects inside the image and no
    *other* solid object's splat is nearer at that pixel (self-occlusion is
    not counted).
    """
    ego = world.ego if ego_pose is None else ego_pose
    pts, cols, ids, sp = _scene_points(world, ego, spacing, include_flat=False)
    targets = world.vehicles if objects is None else objects
    buffers = [splat(pts, cols, ids, view, sp) if len(pts) else None for view in rig]
    out = {}
    for o in targets:
        samples, _ = surface_points(o, vis_spacing)
        samples = _world_to_ego_points(samples, ego)
        seen = np.zeros(len(samples), dtype=bool)
        for view, buf in zip(rig, buffers):
            homo = samples @ view.T[:, :3].T + view.T[:, 3]
            d = homo[:, 2]
            ok = d > 1e-3
            uv = np.where(ok[:, None], homo[:, :2] / np.where(ok, d, 1.0)[:, None], -1.0)
            px = np.floor(uv[:, 0]).astype(np.int64)
            py = np.floor(uv[:, 1]).astype(np.int64)
            inside = ok & (px >= 0) & (px < view.width) & (py >= 0) & (py < view.height)
            vis = inside.copy()
            if buf is not None:
                ii = np.flatnonzero(inside)
                occ_depth = np.where(buf.ids[py[ii], px[ii]] == o.id, buf.depth_other[py[ii], px[ii]], buf.depth[py[ii], px[ii]])
                vis[ii] = d[ii] <= occ_depth + depth_tol
            seen |= vis
        out[o.id] = float(seen.mean())
    return out
