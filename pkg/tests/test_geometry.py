import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from egosplat.errors import ConfigurationError, ContractViolation, DatasetError, DomainError
from egosplat.geometry import (
    CameraModel,
    FrameMeta,
    Pose,
    Trajectory,
    build_rectification,
    pixel_time,
    query_pose,
    read_frame_meta,
    read_trajectory,
    reprojection_displacements,
    write_frame_meta,
    write_trajectory,
)

from conftest import yaw_trajectory

quat_st = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)
vec_st = st.lists(st.floats(-10, 10), min_size=3, max_size=3)


def _slerp_oracle(q0, q1, s):
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    omega = math.acos(min(dot, 1.0))
    return (math.sin((1 - s) * omega) * q0 + math.sin(s * omega) * q1) / math.sin(omega)


def _random_traj(seed=0, n=20):
    rng = np.random.default_rng(seed)
    times = np.cumsum(rng.uniform(0.001, 0.01, n))
    return Trajectory(times, Rotation.random(n, random_state=seed).as_quat(), rng.normal(size=(n, 3)))


# -- Pose ---------------------------------------------------------------------


@given(quat_st, vec_st)
def test_pose_inverse_composes_to_identity(q, t):
    pose = Pose(q, t)
    assert abs(np.linalg.norm(pose.rotation) - 1.0) < 1e-9
    ident = pose.compose(pose.inverse())
    assert np.allclose(ident.matrix, np.eye(3), atol=1e-9)
    assert np.allclose(ident.translation, 0.0, atol=1e-9)


def test_pose_rejects_zero_quaternion():
    with pytest.raises(ContractViolation):
        Pose([0, 0, 0, 0])


# -- Trajectory ----------------------------------------------------------------


def test_query_at_knot_is_bit_exact():
    traj = _random_traj()
    for k in range(len(traj)):
        pose = query_pose(traj, traj.times[k])
        assert np.array_equal(pose.rotation, traj.rotations[k])
        assert np.array_equal(pose.translation, traj.translations[k])


def test_linear_translation_midpoint():
    traj = Trajectory([0.0, 1.0], [[0, 0, 0, 1.0]] * 2, [[0, 0, 0], [1.0, 0, 0]])
    assert np.allclose(query_pose(traj, 0.5).translation, [0.5, 0, 0])


def test_slerp_midpoint_matches_closed_form():
    q1 = np.array([0, 0, math.sin(math.pi / 4), math.cos(math.pi / 4)])
    traj = Trajectory([0.0, 1.0], [[0, 0, 0, 1.0], q1], np.zeros((2, 3)))
    got = query_pose(traj, 0.5).rotation
    expect = _slerp_oracle(np.array([0, 0, 0, 1.0]), q1, 0.5)
    assert np.allclose(got, expect, atol=1e-12)
    assert np.allclose(got, [0, 0, math.sin(math.pi / 8), math.cos(math.pi / 8)], atol=1e-12)


@given(st.floats(0.0, 1.0))
def test_slerp_matches_oracle_everywhere(s):
    q0 = Rotation.from_rotvec([0.1, 0.2, -0.3]).as_quat()
    q1 = Rotation.from_rotvec([-0.4, 0.5, 0.6]).as_quat()
    traj = Trajectory([0.0, 1.0], [q0, q1], np.zeros((2, 3)))
    got = query_pose(traj, s).rotation
    expect = _slerp_oracle(q0, q1, s)
    assert min(np.abs(got - expect).max(), np.abs(got + expect).max()) < 1e-9


def test_query_outside_domain_names_interval():
    traj = _random_traj()
    with pytest.raises(DomainError, match="domain"):
        traj.pose(traj.times[-1] + 1e-6)
    with pytest.raises(DomainError):
        traj.query(np.array([traj.times[0] - 1.0]))


def test_continuity_at_knots():
    traj = _random_traj(3)
    eps = 1e-12
    for k in range(1, len(traj) - 1):
        t = traj.times[k]
        for side in (t - eps, t + eps):
            q, p = traj.query(side)
            assert min(np.abs(q - traj.rotations[k]).max(), np.abs(q + traj.rotations[k]).max()) < 1e-9
            assert np.abs(p - traj.translations[k]).max() < 1e-9


def test_trajectory_rejects_unsorted_times():
    with pytest.raises(ContractViolation):
        Trajectory([0.0, 0.0], [[0, 0, 0, 1.0]] * 2, np.zeros((2, 3)))


def test_body_offset_matches_pose_composition():
    traj = _random_traj(5)
    off = Pose(Rotation.from_rotvec([0.2, -0.1, 0.3]).as_quat(), [0.01, 0.02, -0.03])
    moved = traj.with_body_offset(off)
    for t in traj.times:
        expect = traj.pose(t).compose(off)
        got = moved.pose(t)
        assert np.allclose(got.matrix, expect.matrix, atol=1e-12)
        assert np.allclose(got.translation, expect.translation, atol=1e-12)


# -- Camera --------------------------------------------------------------------


@pytest.mark.parametrize("cam", [CameraModel.pinhole(64, 48, 50.0),
                                 CameraModel.fisheye(64, 64, 20.0),
                                 CameraModel.fisheye(64, 64, 20.0, distortion=(0.05, -0.01))])
def test_project_unproject_round_trip(cam):
    uv = cam.pixel_grid().reshape(-1, 2)
    rays = cam.unproject(uv, 1.0)
    ok = np.all(np.isfinite(rays), axis=1)
    back, front = cam.project(rays[ok])
    assert np.all(front)
    assert np.abs(back - uv[ok]).max() < 1e-9
    dirs = np.random.default_rng(0).normal(size=(200, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    uv2, front = cam.project(dirs)
    rec = cam.unproject(uv2[front], 1.0)
    d = dirs[front] / np.linalg.norm(dirs[front], axis=1, keepdims=True)
    r = rec / np.linalg.norm(rec, axis=1, keepdims=True)
    assert np.abs(d - r).max() < 1e-9


def test_in_bounds_projections_lie_inside_image():
    cam = CameraModel.pinhole(40, 30, 35.0)
    pts = np.random.default_rng(1).normal(size=(1000, 3)) + [0, 0, 2]
    uv, front = cam.project(pts)
    inside = front & cam.in_bounds(uv)
    assert np.all((uv[inside, 0] >= 0) & (uv[inside, 0] < cam.width))
    assert np.all((uv[inside, 1] >= 0) & (uv[inside, 1] < cam.height))


def test_camera_validation():
    with pytest.raises(ConfigurationError):
        CameraModel("pinhole", 10, 10, 5, 5, 10, 10, (0.1,))
    with pytest.raises(ConfigurationError):
        CameraModel.pinhole(0, 10, 10)


# -- pixel time ------------------------------------------------------------------


def test_pixel_time_examples():
    meta = FrameMeta(0, 1.0, 16e-3, 1e-3, 1.0)
    assert pixel_time(meta, 0.0) == 1.0
    assert pixel_time(meta, 1.0) == 1.0 + 16e-3
    assert abs(pixel_time(meta, 0.5) - (1.0 + 8e-3)) < 1e-15
    with pytest.raises(ContractViolation):
        pixel_time(meta, 1.2)
    with pytest.raises(ContractViolation):
        pixel_time(meta, -0.01)


@given(st.floats(0, 1), st.floats(0, 1))
def test_pixel_time_monotone(a, b):
    meta = FrameMeta(0, 0.0, 16e-3, 1e-3, 1.0)
    lo, hi = sorted((a, b))
    assert pixel_time(meta, lo) <= pixel_time(meta, hi)


def test_identity_rectification_reproduces_row_time():
    cam = CameraModel.pinhole(20, 16, 18.0)
    rect = build_rectification(cam, cam)
    grid = cam.pixel_grid()
    assert np.abs(rect.map_x - grid[..., 0]).max() < 1e-9
    assert np.abs(rect.map_y - grid[..., 1]).max() < 1e-9
    rows = np.arange(cam.height, dtype=np.float64)[:, None] / cam.height
    # ratio equals row / H up to the unproject/project round trip
    assert np.abs(rect.index_ratio - rows).max() < 1e-12
    meta = FrameMeta(0, 0.25, 16e-3, 1e-3, 1.0)
    t = pixel_time(meta, rect.index_ratio)
    assert np.abs(t - (0.25 + rows * 16e-3)).max() < 1e-12


def test_fisheye_ratio_matches_independent_projection():
    src = CameraModel.fisheye(80, 60, 25.0)
    dst = CameraModel.pinhole(50, 40, 30.0)
    rect = build_rectification(src, dst)
    rng = np.random.default_rng(0)
    for _ in range(50):
        i, j = rng.integers(dst.height), rng.integers(dst.width)
        if not rect.valid[i, j]:
            continue
        x = (j - dst.cx) / dst.fx
        y = (i - dst.cy) / dst.fy
        theta = math.atan(math.hypot(x, y))
        r = math.hypot(x, y)
        v = src.cy + src.fy * theta * (y / r if r > 0 else 0.0)
        assert abs(rect.index_ratio[i, j] - v / src.height) < 1e-6


def test_rectification_constant_image_round_trip():
    src = CameraModel.fisheye(64, 64, 18.0)
    dst = CameraModel.pinhole(48, 48, 20.0)
    rect = build_rectification(src, dst)
    out = rect.apply(np.full((64, 64, 3), 0.37))
    assert np.abs(out[rect.valid] - 0.37).max() < 1e-12
    assert np.all(out[~rect.valid] == 0.0)


def test_rectification_wider_than_source_only_grows_invalid_region():
    src = CameraModel.pinhole(40, 40, 40.0)
    narrow = build_rectification(src, CameraModel.pinhole(40, 40, 40.0))
    wide = build_rectification(src, CameraModel.pinhole(40, 40, 15.0))
    assert narrow.valid.all()
    assert 0 < wide.valid.sum() < wide.valid.size


def test_rectification_requires_distortion_free_target():
    fish = CameraModel.fisheye(32, 32, 10.0, distortion=(0.1,))
    with pytest.raises(ConfigurationError):
        build_rectification(CameraModel.pinhole(32, 32, 20.0), fish)
    with pytest.raises(ConfigurationError):
        build_rectification(fish, CameraModel.pinhole(16, 16, 8.0)).apply(np.zeros((10, 10)))


def test_bottom_to_top_flip():
    cam = CameraModel.pinhole(8, 10, 10.0)
    rect = build_rectification(cam, cam, bottom_to_top=True)
    assert abs(rect.index_ratio[0, 0] - 9 / 10) < 1e-12
    assert abs(rect.index_ratio[9, 3]) < 1e-12


# -- reprojection ----------------------------------------------------------------


def test_static_displacements_are_zero():
    cam = CameraModel.pinhole(64, 64, 50.0)
    traj = Trajectory.static(Pose(), 0.0, 1.0)
    meta = FrameMeta(0, 0.1, 16e-3, 1e-3, 1.0)
    pix = np.random.default_rng(0).uniform(0, 63, (30, 2))
    disp, excluded = reprojection_displacements(traj, cam, meta, pix, np.full(30, 2.0))
    assert excluded == 0
    assert np.abs(disp).max() < 1e-9


@pytest.mark.parametrize("depth", [0.5, 3.0, 40.0])
def test_pure_rotation_displacement_closed_form(depth):
    cam = CameraModel.pinhole(640, 480, 500.0)
    omega = math.radians(200.0)
    traj = yaw_trajectory(omega, t_end=0.05, n=51)
    meta = FrameMeta(0, 0.01, 16e-3, 1e-3, 1.0)
    disp, _ = reprojection_displacements(traj, cam, meta, [[cam.cx, cam.cy]], [depth])
    expect = cam.fx * math.tan(omega * 16e-3)
    assert abs(disp[0] - expect) / expect < 0.01


def test_fast_head_turn_tens_of_pixels():
    # full-resolution RGB camera (~1400 px wide at 110 deg) turning at 200 deg/s
    cam = CameraModel.pinhole(1408, 1408, 610.0)
    traj = yaw_trajectory(math.radians(200.0), t_end=0.05, n=51)
    meta = FrameMeta(0, 0.01, 16e-3, 1e-3, 1.0)
    pix = np.random.default_rng(0).uniform(200, 1200, (100, 2))
    disp, _ = reprojection_displacements(traj, cam, meta, pix, np.full(100, 2.0))
    assert 10.0 < np.median(disp) < 100.0


def test_displacements_exclude_points_behind_camera():
    cam = CameraModel.pinhole(64, 64, 20.0)
    traj = yaw_trajectory(math.radians(90.0) / 0.01, t_end=0.02, n=3)
    disp, excluded = reprojection_displacements(traj, cam, None, [[cam.cx, cam.cy], [0.0, 0.0]], [1.0, 1.0],
                                                window=(0.0, 0.02))
    assert excluded >= 1
    assert len(disp) + excluded == 2


@settings(max_examples=25, deadline=None)
@given(quat_st, vec_st)
def test_displacements_invariant_to_global_rigid_transform(q, t):
    cam = CameraModel.pinhole(64, 64, 50.0)
    base = yaw_trajectory(3.0, t_end=0.09, n=10)
    traj = Trajectory(base.times, base.rotations, base.translations + np.linspace(0, 0.05, 10)[:, None])
    g = Pose(q, t)
    moved = traj.transformed(g)
    pix = np.random.default_rng(1).uniform(10, 50, (20, 2))
    depth = np.random.default_rng(2).uniform(1, 4, 20)
    window = (traj.times[2], traj.times[6])
    a, na = reprojection_displacements(traj, cam, None, pix, depth, window)
    b, nb = reprojection_displacements(moved, cam, None, pix, depth, window)
    assert na == nb == 0
    assert np.abs(a - b).max() < 1e-9


# -- file formats ----------------------------------------------------------------


def test_trajectory_and_meta_files_round_trip(tmp_path):
    traj = _random_traj(2)
    times_ns = np.round(traj.times * 1e9) * 1e-9
    traj = Trajectory(times_ns, traj.rotations, traj.translations)
    write_trajectory(tmp_path / "t.txt", traj)
    back = read_trajectory(tmp_path / "t.txt")
    assert np.abs(back.times - traj.times).max() < 1e-15
    assert np.array_equal(back.translations, traj.translations)
    metas = [FrameMeta(i, 0.1 * i, 16e-3, 2e-3, 1.5) for i in range(3)]
    write_frame_meta(tmp_path / "m.txt", metas)
    got = read_frame_meta(tmp_path / "m.txt")
    assert [m.frame_id for m in got] == [0, 1, 2]
    assert all(abs(a.t0 - b.t0) < 1e-9 and a.gain == b.gain for a, b in zip(metas, got))


def test_malformed_trajectory_file(tmp_path):
    (tmp_path / "t.txt").write_text("100 0 0 0 0 0 0 1\n50 0 0 0 0 0 0 1\n")
    with pytest.raises(DatasetError):
        read_trajectory(tmp_path / "t.txt")
    (tmp_path / "u.txt").write_text("100 0 0 0\n")
    with pytest.raises(DatasetError):
        read_trajectory(tmp_path / "u.txt")
