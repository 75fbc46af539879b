import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevgrid.geometry import (
    AnchorHeights,
    BevGridSpec,
    BevState,
    CameraRig,
    CameraView,
    EgoPose,
    align_features,
    align_history_bev,
    bev_cell_to_world,
    camera_from_krt,
    extrinsic_noise,
    hit_views,
    look_rotation,
    make_pillar,
    perturb_extrinsics,
    project_point,
    ring_rig,
)

from oracles import project_homogeneous


def identity_view(w=640, h=480):
    return CameraView(np.hstack([np.eye(3), np.zeros((3, 1))]), w, h)


def random_camera(rng):
    f = rng.uniform(50, 800)
    K = np.array([[f, 0, rng.uniform(0, 640)], [0, f * rng.uniform(0.8, 1.2), rng.uniform(0, 480)], [0, 0, 1]])
    R = look_rotation(rng.uniform(-math.pi, math.pi), rng.uniform(-0.5, 0.5))
    c = rng.normal(0, 2, size=3)
    return camera_from_krt(K, R, -R @ c, 640, 480)


class TestBevGrid:
    def test_center_cell_is_origin(self):
        assert bev_cell_to_world((100, 100), BevGridSpec(200, 200, 0.512)) == (0.0, 0.0)

    def test_corner_reaches_perception_range(self):
        x, y = bev_cell_to_world((0, 0), BevGridSpec(200, 200, 0.512))
        assert x == pytest.approx(-51.2, abs=1e-12) and y == pytest.approx(-51.2, abs=1e-12)

    def test_small_grid(self):
        assert bev_cell_to_world((3, 1), BevGridSpec(4, 4, 1.0)) == (1.0, -1.0)

    def test_exhaustive_formula(self):
        for H, W, s in ((3, 5, 0.7), (8, 8, 0.25), (1, 1, 2.0)):
            g = BevGridSpec(H, W, s)
            for y in range(H):
                for x in range(W):
                    assert bev_cell_to_world((x, y), g) == ((x - W / 2) * s, (y - H / 2) * s)

    def test_custom_origin(self):
        g = BevGridSpec(300, 150, 0.5, origin_cell=(70, 150))
        assert bev_cell_to_world((70, 150), g) == (0.0, 0.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            BevGridSpec(0, 4, 1.0)
        with pytest.raises(ValueError):
            BevGridSpec(4, 4, 0.0)


class TestPillar:
    def test_default_anchors(self):
        a = AnchorHeights()
        np.testing.assert_allclose(a.z_levels, [-5, -7 / 3, 1 / 3, 3])
        pts = make_pillar((16, 16), BevGridSpec(32, 32, 1.0), a)
        np.testing.assert_allclose(pts, [[0, 0, z] for z in a.z_levels])

    def test_single_anchor(self):
        g = BevGridSpec(4, 4, 1.0)
        np.testing.assert_array_equal(make_pillar((3, 1), g, AnchorHeights((0.0,))), [[1.0, -1.0, 0.0]])

    @given(st.floats(-5, 40), st.floats(-5, 40))
    def test_shared_axis(self, x, y):
        g = BevGridSpec(32, 32, 0.5)
        pts = make_pillar((x, y), g, AnchorHeights())
        wx, wy = bev_cell_to_world((x, y), g)
        assert np.all(pts[:, 0] == wx) and np.all(pts[:, 1] == wy)

    def test_empty_anchors_rejected(self):
        with pytest.raises(ValueError):
            AnchorHeights(())


class TestProjection:
    def test_identity(self):
        assert project_point((0, 0, 5), identity_view()) == (0.0, 0.0, 5.0)

    def test_intrinsics_example(self):
        K = np.array([[100, 0, 320], [0, 100, 240], [0, 0, 1.0]])
        view = CameraView(K @ np.hstack([np.eye(3), np.zeros((3, 1))]), 640, 480)
        assert project_point((2, 1, 4), view) == pytest.approx((370, 265, 4))

    def test_behind_camera_misses(self):
        assert project_point((0, 0, -1), identity_view()) is None

    def test_closed_bounds(self):
        view = identity_view(10, 10)
        assert project_point((10, 10, 1), view) is not None
        assert project_point((10.001, 5, 1), view) is None

    def test_non_finite_matrix_rejected(self):
        T = np.zeros((3, 4))
        T[0, 0] = np.nan
        with pytest.raises(ValueError):
            CameraView(T, 4, 4)

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(0)
        n = 0
        while n < 2000:
            view = random_camera(rng)
            q = view.center + rng.normal(0, 10, size=3)
            a, b, c = project_homogeneous(view.T.tolist(), q.tolist())
            if c <= 0.1:
                continue
            n += 1
            got = project_point(q, view)
            inside = 0 <= a <= 640 and 0 <= b <= 480
            assert (got is not None) == inside
            if got is not None:
                np.testing.assert_allclose(got, (a, b, c), rtol=1e-9)


class TestRig:
    def test_ids_dense(self):
        v = ring_rig(2).views
        with pytest.raises(ValueError):
            CameraRig([v[1]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            CameraRig([])

    def test_ring_decomposition_recomposes(self):
        for view in ring_rig():
            np.testing.assert_allclose(view.intrinsics @ np.column_stack([view.rotation, view.translation]), view.T, atol=1e-12)


class TestHitViews:
    def two_cameras(self):
        K = np.array([[200, 0, 200], [0, 200, 150], [0, 0, 1.0]])
        views = []
        for i, yaw in enumerate((0.0, math.pi)):
            R = look_rotation(yaw)
            views.append(camera_from_krt(K, R, -R @ np.array([0, 0, 0.0]), 400, 300, i))
        return CameraRig(views)

    def test_front_pillar_hits_front_view_only(self):
        grid = BevGridSpec(40, 40, 1.0)
        anchors = AnchorHeights((-1.0, 0.0, 1.0, 2.0))
        rig = self.two_cameras()
        hits = hit_views((30, 20), grid, rig, anchors)
        assert {h.view_id for h in hits} == {0}
        assert sorted(h.ref_index for h in hits) == [0, 1, 2, 3]

    def test_overhead_pillar_has_no_hits(self):
        grid = BevGridSpec(40, 40, 1.0)
        hits = hit_views((20, 20), grid, self.two_cameras(), AnchorHeights((3.0, 5.0)))
        assert hits == []

    def test_consistent_with_projection(self):
        rng = np.random.default_rng(1)
        grid = BevGridSpec(32, 32, 1.0)
        rig = ring_rig()
        anchors = AnchorHeights((0.0, 1.0, 2.0))
        for _ in range(50):
            p = tuple(rng.uniform(0, 32, size=2))
            hits = {(h.view_id, h.ref_index): h for h in hit_views(p, grid, rig, anchors)}
            pillar = make_pillar(p, grid, anchors)
            for view in rig:
                for j, q in enumerate(pillar):
                    r = project_point(q, view)
                    assert ((view.id, j) in hits) == (r is not None)
                    if r is not None:
                        h = hits[(view.id, j)]
                        np.testing.assert_allclose((*h.pixel, h.depth), r, rtol=1e-12)
                        assert h.depth > 0
                        assert 0 <= h.pixel[0] <= view.width and 0 <= h.pixel[1] <= view.height


class TestAlignment:
    grid = BevGridSpec(16, 16, 0.5)

    def feats(self, seed=0):
        return np.random.default_rng(seed).normal(size=(16, 16, 3))

    def test_identity_bitwise(self):
        f = self.feats()
        pose = EgoPose((3.2, -1.1), 0.7)
        np.testing.assert_array_equal(align_features(f, pose, pose, self.grid), f)

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_integer_translation(self, k):
        f = self.feats()
        out = align_features(f, EgoPose((0, 0), 0.0), EgoPose((k * 0.5, 0), 0.0), self.grid)
        np.testing.assert_array_equal(out[:, : 16 - k], f[:, k:])
        assert not out[:, 16 - k :].any()

    def test_quarter_turn(self):
        f = self.feats()
        out = align_features(f, EgoPose((0, 0), 0.0), EgoPose((0, 0), math.pi / 2), self.grid)
        for y in range(1, 16):
            for x in range(16):
                np.testing.assert_array_equal(out[y, x], f[x, 16 - y])

    def test_lattice_round_trip(self):
        f = self.feats()
        a = EgoPose((1.0, 0.5), 0.0)
        b = EgoPose((2.0, -0.5), math.pi / 2)
        back = align_features(align_features(f, a, b, self.grid), b, a, self.grid)
        # cells whose round trip never leaves the grid
        xs, ys = np.meshgrid(np.arange(16), np.arange(16))
        ones = align_features(align_features(np.ones((16, 16, 1)), a, b, self.grid), b, a, self.grid)[..., 0]
        keep = ones == 1.0
        assert keep.sum() > 50
        np.testing.assert_array_equal(back[keep], f[keep])

    def test_interior_round_trip_off_lattice(self):
        f = np.random.default_rng(2).normal(size=(16, 16, 2))
        # a smooth (linear) field is reproduced exactly by bilinear sampling
        ys, xs = np.meshgrid(np.arange(16.0), np.arange(16.0), indexing="ij")
        f = np.stack([0.3 * xs - 0.2 * ys, xs + ys], axis=-1)
        a = EgoPose((0.0, 0.0), 0.0)
        b = EgoPose((0.37, -0.21), 0.13)
        back = align_features(align_features(f, a, b, self.grid), b, a, self.grid)
        np.testing.assert_allclose(back[5:11, 5:11], f[5:11, 5:11], atol=1e-5)

    def test_impulse_tracks_world_point(self):
        rng = np.random.default_rng(3)
        grid = BevGridSpec(32, 32, 0.5)
        for _ in range(20):
            prev_pose = EgoPose(tuple(rng.uniform(-2, 2, 2)), rng.uniform(-math.pi, math.pi))
            cur_pose = EgoPose(
                (prev_pose.translation[0] + rng.uniform(-1.5, 1.5), prev_pose.translation[1] + rng.uniform(-1.5, 1.5)),
                prev_pose.yaw + rng.uniform(-0.4, 0.4),
            )
            f = np.zeros((32, 32, 1))
            f[12:15, 12:15, 0] = [[0.5, 0.7, 0.5], [0.7, 1.0, 0.7], [0.5, 0.7, 0.5]]
            wx, wy = prev_pose.ego_to_world(*bev_cell_to_world((13, 13), grid))
            out = align_features(f, prev_pose, cur_pose, grid)[..., 0]
            y, x = np.unravel_index(out.argmax(), out.shape)
            ex, ey = cur_pose.world_to_ego(wx, wy)
            cx, cy = grid.world_to_cell(ex, ey)
            assert abs(x - cx) <= 1 and abs(y - cy) <= 1

    def test_history_state_carries_current_pose(self):
        st_ = BevState(self.feats(), 1.5, EgoPose((0, 0), 0))
        out = align_history_bev(st_, st_.pose, EgoPose((0.5, 0), 0.0), self.grid)
        assert out.pose == EgoPose((0.5, 0), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            align_features(np.zeros((8, 8, 2)), EgoPose(), EgoPose(), self.grid)


class TestExtrinsicNoise:
    def test_level_zero_is_identity(self):
        rig = ring_rig()
        out = perturb_extrinsics(rig, 0, seed=1)
        for a, b in zip(rig, out):
            np.testing.assert_array_equal(a.T, b.T)

    def test_deterministic(self):
        rig = ring_rig()
        a = perturb_extrinsics(rig, 3, seed=9)
        b = perturb_extrinsics(rig, 3, seed=9)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.T, v.T)

    def test_negative_level(self):
        with pytest.raises(ValueError):
            perturb_extrinsics(ring_rig(), -1, seed=0)

    def test_variance_is_level(self):
        rot, trans = extrinsic_noise(4, np.random.default_rng(0), n=100_000)
        np.testing.assert_allclose(rot.var(axis=0), 4.0, rtol=0.05)
        np.testing.assert_allclose(trans.var(axis=0), 20.0, rtol=0.05)

    def test_keeps_intrinsics_and_moves_pose(self):
        rig = ring_rig()
        out = perturb_extrinsics(rig, 4, seed=2)
        for a, b in zip(rig, out):
            np.testing.assert_allclose(a.intrinsics, b.intrinsics, atol=1e-9)
            shift = np.linalg.norm(a.center - b.center)
            assert 0 < shift < 0.5
            np.testing.assert_allclose(b.rotation @ b.rotation.T, np.eye(3), atol=1e-12)
