import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egosplat.errors import ContractViolation
from egosplat.geometry import Pose, quat_from_axis_angle
from egosplat.metrics import (
    PSNR_CAP,
    ablation_table,
    psnr,
    reproj_percentiles,
    ssim,
    ssim_and_grad,
    ssim_reference,
    write_reproj_report,
)
from egosplat.simulator import MotionProfile, SensorProfile, capture, generate_scene

from conftest import tiny_capture

images = arrays(np.float64, (12, 12, 3), elements=st.floats(0.0, 1.0))


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_psnr_uniform_difference_closed_form():
    a = np.full((10, 10, 3), 0.2)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_psnr_and_ssim_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(images, images, images)
def test_metrics_ignore_masked_out_pixels(a, b, junk):
    mask = np.zeros((12, 12), bool)
    mask[2:9, 3:11] = True
    a2 = np.where(mask[..., None], a, junk)
    assert psnr(a, b, mask) == psnr(a2, b, mask)
    assert ssim(a, b, mask) == pytest.approx(ssim(a2, b, mask), abs=1e-12)


def _ssim_direct(a, b):
    """SSIM straight from its definition with explicit window sums (zero padding)."""
    size, sigma = 11, 1.5
    r = size // 2
    g1 = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma * sigma))
    w = np.outer(g1, g1) / g1.sum() ** 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, wd = a.shape
    pa, pb = np.pad(a, r), np.pad(b, r)
    vals = []
    for i in range(h):
        for j in range(wd):
            xa = pa[i:i + size, j:j + size]
            xb = pb[i:i + size, j:j + size]
            mu_a, mu_b = (w * xa).sum(), (w * xb).sum()
            va = (w * xa * xa).sum() - mu_a ** 2
            vb = (w * xb * xb).sum() - mu_b ** 2
            cov = (w * xa * xb).sum() - mu_a * mu_b
            vals.append((2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_checkerboard_against_direct_formula():
    board = (np.indices((24, 24)).sum(axis=0) % 2).astype(np.float64)
    inv = 1.0 - board
    value = ssim(board, inv)
    assert value == pytest.approx(_ssim_direct(board, inv), abs=1e-10)
    # away from the zero-padded border the two are almost perfectly anti-correlated
    big = (np.indices((96, 96)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(big, 1.0 - big) < -0.8


def test_ssim_random_against_direct_formula():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(15, 13)), rng.uniform(size=(15, 13))
    assert ssim(a, b) == pytest.approx(_ssim_direct(a, b), abs=1e-10)


def test_ssim_gradient_fd():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(13, 13, 2)), rng.uniform(size=(13, 13, 2))
    mask = rng.uniform(size=(13, 13)) > 0.3
    _, g = ssim_and_grad(a, b, mask)
    h = 1e-6
    for idx in [(0, 0, 0), (6, 6, 1), (12, 3, 0), (4, 9, 1)]:
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        fd = (ssim(p, b, mask) - ssim(m, b, mask)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_metric_input_errors():
    with pytest.raises(ContractViolation):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ContractViolation):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))


def test_reproj_static_is_zero():
    _, ds = tiny_capture(frames=3, size=24, kind="static")
    rows, skipped = reproj_percentiles(ds, ds.trajectory_gt)
    assert skipped == 0 and len(rows) == 3
    assert all(r.p25 == r.p50 == r.p75 == 0.0 for r in rows)


def test_reproj_orbit_is_constant():
    motion = MotionProfile(kind="orbit", duration=1.2, peak_deg_s=90.0, orbit_radius=1.5)
    ds = capture(generate_scene("clutter", 150, seed=1), motion, SensorProfile(width=48, height=48),
                 n_frames=10)
    rows, _ = reproj_percentiles(ds, ds.trajectory_gt)
    p50 = np.array([r.p50 for r in rows])
    assert p50.min() > 0.0
    assert np.all(np.abs(p50 / p50.mean() - 1.0) < 0.1)


def test_reproj_pure_rotation_matches_closed_form():
    # zero-radius orbit: rotation about the camera's y axis at a constant rate
    rate = 45.0
    motion = MotionProfile(kind="orbit", duration=1.2, peak_deg_s=rate, orbit_radius=0.0,
                           center=(0.0, 0.0, -1.5))
    sensor = SensorProfile(width=48, height=48)
    ds = capture(generate_scene("clutter", 150, seed=1), motion, sensor, n_frames=10)
    rows, _ = reproj_percentiles(ds, ds.trajectory_gt)
    cam = ds.camera
    c, s = math.cos(math.radians(rate) * sensor.readout), math.sin(math.radians(rate) * sensor.readout)
    for row, anchors in zip(rows, ds.sparse_depth):
        x = (anchors[:, 0] - cam.cx) / cam.fx
        y = (anchors[:, 1] - cam.cy) / cam.fy
        xr, zr = c * x + s, -s * x + c
        du = cam.fx * (xr / zr - x)
        dv = cam.fy * (y / zr - y)
        assert row.p50 == pytest.approx(float(np.median(np.hypot(du, dv))), rel=1e-6)


def test_reproj_head_scan_reaches_thirty_pixels():
    # focal chosen so a 200 deg/s head turn sweeps ~30 px during a 16 ms readout
    motion = MotionProfile(kind="head_scan", duration=0.4, peak_deg_s=200.0,
                           base_pose=Pose(translation=[0, 0, -1.5]))
    sensor = SensorProfile(width=96, height=96, focal=540.0)
    ds = capture(generate_scene("grid", 400, seed=0), motion, sensor, n_frames=1)
    rows, _ = reproj_percentiles(ds, ds.trajectory_gt)
    assert rows[0].p50 == pytest.approx(30.0, rel=0.1)


def test_reproj_invariant_to_rigid_world_transform():
    _, ds = tiny_capture(frames=4, size=32, peak_deg_s=150.0)
    world = Pose(quat_from_axis_angle([0.3, 1.0, -0.2], 0.7), [1.0, -2.0, 0.5])
    a, _ = reproj_percentiles(ds, ds.trajectory_gt)
    b, _ = reproj_percentiles(ds, ds.trajectory_gt.transformed(world))
    for ra, rb in zip(a, b):
        assert ra.p50 == pytest.approx(rb.p50, rel=1e-6, abs=1e-9)


def test_reproj_skips_frames_without_depth(tmp_path):
    _, ds = tiny_capture(frames=3, size=24)
    ds.sparse_depth[1] = np.zeros((0, 3))
    rows, skipped = reproj_percentiles(ds)
    assert skipped == 1 and len(rows) == 2
    table, plot = write_reproj_report(rows, tmp_path)
    assert len(table.read_text().splitlines()) == 3
    assert plot.stat().st_size > 0


def test_ablation_table(tmp_path):
    single = ablation_table({"full": {"room": {"psnr": 30.0, "ssim": 0.9}}})
    assert len(single.splitlines()) == 3
    reports = {
        "full": {"room": {"psnr": 31.234, "ssim": 0.91}},
        "w/o VIBA": {"room": {"psnr": 29.0, "ssim": 0.95}},
    }
    text = ablation_table(reports, tmp_path / "t.csv")
    lines = text.splitlines()
    assert "**31.23**" in lines[2] and "**0.9500**" in lines[3]
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "config,room_psnr,room_ssim" and rows[1].startswith("full,31.234")
    with pytest.raises(ContractViolation):
        ablation_table({})


def test_cached_reference_is_bit_identical():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(20, 18, 3)), rng.uniform(size=(20, 18, 3))
    mask = rng.uniform(size=(20, 18)) > 0.1
    ref = ssim_reference(b, mask)
    v1, g1 = ssim_and_grad(a, b, mask)
    v2, g2 = ssim_and_grad(a, b, mask, reference=ref)
    assert v1 == v2 and np.array_equal(g1, g2)
    with pytest.raises(ContractViolation):
        ssim_and_grad(a, b, ~mask, reference=ref)
