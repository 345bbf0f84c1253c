import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudolabel3d.errors import InvariantError
from pseudolabel3d.scene import (
    CameraFrame, SceneCloud, project_cloud, project_point, project_points,
    rescale_pixels, visible_in_frame,
)

import oracles
from scenes import random_rigid, random_scene


def frame_with(K=None, E=None, depth=None, rgb_size=(100, 100)):
    K = np.eye(3) if K is None else K
    E = np.eye(4) if E is None else E
    depth = np.full(rgb_size, 1000, np.uint16) if depth is None else depth
    return CameraFrame(0, K, E, depth, rgb_size)


def test_identity_projection():
    f = frame_with()
    assert project_point((0, 0, 1), f) == (0.0, 0.0, 1.0)


def test_behind_camera_is_none():
    assert project_point((0, 0, -1), frame_with()) is None
    assert project_point((0, 0, 0), frame_with()) is None


def test_pinhole_example_rows_then_cols():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    h, w, d = project_point((0.1, 0.2, 2.0), frame_with(K=K))
    # hand evaluation: u = 100*0.1/2 + 50 = 55 (column), v = 100*0.2/2 + 50 = 60 (row)
    assert h == pytest.approx(60.0, abs=1e-12)
    assert w == pytest.approx(55.0, abs=1e-12)
    assert d == 2.0


def test_visible_exact_depth():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    depth = np.full((100, 100), 2000, np.uint16)
    assert visible_in_frame((0.1, 0.2, 2.0), frame_with(K=K, depth=depth), 0.05) == (60, 55)


def test_visible_invalid_depth():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    depth = np.full((100, 100), 2000, np.uint16)
    depth[60, 55] = 0
    assert visible_in_frame((0.1, 0.2, 2.0), frame_with(K=K, depth=depth), 0.05) is None


def test_visible_occluded():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    tau = 0.05
    depth = np.full((100, 100), 2000, np.uint16)
    p = np.array([0.1, 0.2, 2.0]) * (2.0 + 2 * tau) / 2.0  # same ray, d = raster + 2 tau
    assert visible_in_frame(p, frame_with(K=K, depth=depth), tau) is None
    assert visible_in_frame(p, frame_with(K=K, depth=depth), 3 * tau) is not None


def test_visible_uses_depth_resolution():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    depth = np.zeros((50, 50), np.uint16)
    depth[30, 28] = 2000  # row 60 -> 30, col 55 -> floor(27.5 + 0.5) = 28
    f = frame_with(K=K, depth=depth)
    assert visible_in_frame((0.1, 0.2, 2.0), f, 0.05) == (60, 55)


def test_raster_boundary_rejected():
    K = np.array([[10.0, 0, 0], [0, 10.0, 0], [0, 0, 1]])
    f = frame_with(K=K, rgb_size=(10, 10), depth=np.full((10, 10), 1000, np.uint16))
    assert visible_in_frame((0.0, 0.0, 1.0), f, 0.05) == (0, 0)
    # row 9.6 rounds to 10 == H
    assert visible_in_frame((0.0, 0.96, 1.0), f, 0.05) is None
    assert visible_in_frame((0.0, -0.06, 1.0), f, 0.05) is None


def test_project_point_matches_matrix_product():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cloud, frame = random_scene(rng, n=20)
        for p in cloud.xyz:
            got = project_point(p, frame)
            cam = frame.extrinsic @ np.r_[p, 1.0]
            if cam[2] <= 0:
                assert got is None
                continue
            u, v, s = frame.intrinsic @ cam[:3]
            assert got[0] == pytest.approx(v / s, abs=1e-9)
            assert got[1] == pytest.approx(u / s, abs=1e-9)
            assert got[2] == pytest.approx(cam[2], abs=1e-12)


def test_rigid_motion_invariance():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        cloud, frame = random_scene(rng, n=30)
        T = random_rigid(rng)
        moved = (T @ np.c_[cloud.xyz, np.ones(len(cloud))].T).T[:, :3]
        f2 = CameraFrame(0, frame.intrinsic, frame.extrinsic @ np.linalg.inv(T), frame.depth,
                         frame.rgb_size)
        for p, q in zip(cloud.xyz, moved):
            a, b = project_point(p, frame), project_point(q, f2)
            assert (a is None) == (b is None)
            if a and b:
                worst = max(worst, abs(a[0] - b[0]), abs(a[1] - b[1]))
    assert worst < 1e-5


def test_project_cloud_equals_scalar_loop():
    rng = np.random.default_rng(5)
    for k in range(20):
        shape = [(48, 64), (24, 32), (36, 50)][k % 3]
        cloud, frame = random_scene(rng, n=500, depth_shape=shape)
        idx, pix = project_cloud(cloud, frame, 0.05)
        oidx, opix = oracles.project_cloud_loop(cloud.xyz, frame, 0.05)
        assert idx.tolist() == oidx
        assert [tuple(p) for p in pix.tolist()] == opix
        assert 0 < len(idx) < len(cloud)


def test_project_cloud_facing_away_is_empty():
    rng = np.random.default_rng(0)
    xyz = rng.uniform(-1, 1, (50, 3))
    xyz[:, 2] = -np.abs(xyz[:, 2]) - 0.5
    idx, pix = project_cloud(SceneCloud(xyz), frame_with(), 0.05)
    assert len(idx) == 0 and pix.shape == (0, 2)


def test_project_cloud_single_point():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    depth = np.full((100, 100), 2000, np.uint16)
    f = frame_with(K=K, depth=depth)
    idx, pix = project_cloud(SceneCloud(np.array([[0.1, 0.2, 2.0]])), f, 0.05)
    assert idx.tolist() == [0]
    assert tuple(pix[0]) == visible_in_frame((0.1, 0.2, 2.0), f, 0.05)


def test_project_points_nan_behind():
    rows, cols, d = project_points(np.array([[0, 0, 1.0], [0, 0, -1.0]]), frame_with())
    assert rows[0] == 0.0 and math.isnan(rows[1]) and math.isnan(cols[1])


@given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 200), st.integers(1, 200))
@settings(max_examples=200, deadline=None)
def test_rescale_pixels_matches_exact_fraction(H, W, Hr, Wr):
    pix = np.array([[0, 0], [H - 1, W - 1], [H // 2, W // 3]])
    got = rescale_pixels(pix, (H, W), (Hr, Wr))
    for (h, w), (gh, gw) in zip(pix.tolist(), got.tolist()):
        assert (gh, gw) == oracles.rescale_exact(h, w, (H, W), (Hr, Wr))
        assert 0 <= gh < Hr and 0 <= gw < Wr


def test_frame_invariants():
    bad_K = np.array([[100.0, 0, 50], [1.0, 100.0, 50], [0, 0, 1]])
    with pytest.raises(InvariantError):
        frame_with(K=bad_K)
    with pytest.raises(InvariantError):
        frame_with(K=np.diag([-1.0, 1.0, 1.0]))
    E = np.eye(4)
    E[0, 0] = -1.0  # reflection
    with pytest.raises(InvariantError):
        frame_with(E=E)
    E = np.eye(4)
    E[0, 1] = 1e-3
    with pytest.raises(InvariantError):
        frame_with(E=E)


def test_frame_is_immutable():
    f = frame_with()
    with pytest.raises(ValueError):
        f.depth[0, 0] = 7


def test_cloud_invariants():
    with pytest.raises(InvariantError):
        SceneCloud(np.zeros((0, 3)))
    with pytest.raises(InvariantError):
        SceneCloud(np.array([[0.0, np.nan, 0.0]]))
    assert len(SceneCloud(np.zeros((4, 3)))) == 4
