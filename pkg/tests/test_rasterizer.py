import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egosplat.errors import ConfigurationError, ContractViolation, NumericalError
from egosplat.geometry import CameraModel, Pose, quat_from_axis_angle
from egosplat.rasterizer import GradientBuffer, RasterSettings, rasterize, rasterize_backward
from egosplat.scene import GaussianScene, logit

from conftest import fd_check, random_scene

SMOOTH = RasterSettings(extent_sigma=math.inf)


def _iso(means, sigma, opac, colors):
    n = len(means)
    return GaussianScene(means, np.tile([0, 0, 0, 1.0], (n, 1)), np.log(np.full((n, 3), sigma)),
                         logit(np.asarray(opac, dtype=float)), colors)


def test_empty_scene_is_background(small_cam):
    out = rasterize(GaussianScene.empty(), small_cam, Pose(), background=(0.1, 0.2, 0.3))
    assert np.all(out.alpha == 0.0)
    assert np.allclose(out.color, [0.1, 0.2, 0.3])


def test_opaque_gaussian_on_axis_peaks_at_principal_point():
    cam = CameraModel.pinhole(33, 33, 30.0)
    scene = _iso([[0, 0, 2.0]], 0.2, [0.999999], [[0.2, 0.6, 0.9]])
    out = rasterize(scene, cam, Pose())
    lum = out.color.sum(axis=2)
    i, j = np.unravel_index(np.argmax(lum), lum.shape)
    assert (j, i) == (cam.cx, cam.cy)
    # the per-splat opacity clamp keeps the peak 1% short of the color
    assert np.allclose(out.color[i, j], [0.2, 0.6, 0.9], rtol=0.011)


def test_two_gaussian_compositing_closed_form():
    cam = CameraModel.pinhole(21, 21, 25.0)
    c1, c2 = np.array([0.9, 0.1, 0.2]), np.array([0.1, 0.8, 0.4])
    scene = _iso([[0, 0, 2.0], [0.02, 0, 1.0]], 0.05, [0.6, 0.7], [c2, c1])
    out = rasterize(scene, cam, Pose(), settings=SMOOTH)
    v, u = np.mgrid[0:21, 0:21].astype(float)

    def alpha(mu_x, z, o):
        var = (0.05 * 25.0 / z) ** 2 + 0.3
        cx = 25.0 * mu_x / z + cam.cx
        # first-order covariance has a small x-z coupling for off-axis means
        j = np.array([[25.0 / z, 0, -25.0 * mu_x / z**2], [0, 25.0 / z, 0]])
        cov = j @ (np.eye(3) * 0.05**2) @ j.T + np.eye(2) * 0.3
        inv = np.linalg.inv(cov)
        dx, dy = u - cx, v - cam.cy
        power = -0.5 * (inv[0, 0] * dx * dx + inv[1, 1] * dy * dy) - inv[0, 1] * dx * dy
        return np.minimum(o * np.exp(power), 0.99), var

    a_near, _ = alpha(0.02, 1.0, 0.7)
    a_far, _ = alpha(0.0, 2.0, 0.6)
    expect = c1 * a_near[..., None] + c2 * (a_far * (1 - a_near))[..., None]
    assert np.abs(out.color - expect).max() < 1e-6


def test_near_plane_culls(small_cam):
    scene = _iso([[0, 0, 0.005]], 0.01, [0.9], [[1, 1, 1]])
    assert np.all(rasterize(scene, small_cam, Pose()).alpha == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_alpha_in_unit_interval(seed, n):
    out = rasterize(random_scene(n, seed), CameraModel.pinhole(24, 20, 20.0), Pose())
    assert np.all((out.alpha >= 0.0) & (out.alpha <= 1.0))


def test_storage_order_invariance(scene10, small_cam):
    perm = np.random.default_rng(3).permutation(10)
    shuffled = GaussianScene(scene10.means[perm], scene10.quats[perm], scene10.log_scales[perm],
                             scene10.opacity_logits[perm], scene10.colors[perm])
    a = rasterize(scene10, small_cam, Pose()).color
    b = rasterize(shuffled, small_cam, Pose()).color
    assert np.abs(a - b).max() < 1e-9


def test_translation_equivariance(scene10, small_cam):
    shift = np.array([1.5, -2.0, 0.25])
    pose = Pose(quat_from_axis_angle([0, 1, 0], 0.1), [0.05, 0, 0])
    moved = scene10.copy()
    moved.means = moved.means + shift
    a = rasterize(scene10, small_cam, pose).color
    b = rasterize(moved, small_cam, Pose(pose.rotation, pose.translation + shift)).color
    assert np.abs(a - b).max() < 1e-9


def test_tile_binning_matches_single_tile(scene10):
    cam = CameraModel.pinhole(70, 50, 60.0)
    a = rasterize(scene10, cam, Pose(), settings=RasterSettings(tile=16))
    b = rasterize(scene10, cam, Pose(), settings=RasterSettings(tile=4096))
    assert np.abs(a.color - b.color).max() < 1e-9
    assert np.abs(a.alpha - b.alpha).max() < 1e-9


def test_pixel_mask_leaves_masked_pixels_identical(scene10, small_cam):
    mask = np.zeros((small_cam.height, small_cam.width), dtype=bool)
    mask[5:15, 3:20] = True
    full = rasterize(scene10, small_cam, Pose()).color
    part = rasterize(scene10, small_cam, Pose(), pixel_mask=mask).color
    assert np.array_equal(full[mask], part[mask])


def test_non_finite_parameter_names_index(scene10, small_cam):
    scene10.colors[4, 0] = np.inf
    with pytest.raises(NumericalError, match="Gaussian 4"):
        rasterize(scene10, small_cam, Pose())


def test_fisheye_camera_rejected(scene10):
    with pytest.raises(ConfigurationError):
        rasterize(scene10, CameraModel.fisheye(16, 16, 8.0), Pose())


def test_zero_upstream_gives_zero_gradient(scene10, small_cam):
    grad = rasterize_backward(scene10, small_cam, Pose(), np.zeros((24, 32, 3)))
    assert isinstance(grad, GradientBuffer) and grad.is_zero()


def test_mismatched_gradient_shape(scene10, small_cam):
    with pytest.raises(ContractViolation):
        rasterize_backward(scene10, small_cam, Pose(), np.zeros((10, 10, 3)))


def test_single_gaussian_color_gradient_fd():
    cam = CameraModel.pinhole(24, 24, 30.0)
    scene = _iso([[0.05, -0.02, 2.0]], 0.15, [0.7], [[0.3, 0.5, 0.8]])
    up = np.ones((24, 24, 3))
    grad = rasterize_backward(scene, cam, Pose(), up, settings=SMOOTH)
    worst, n = fd_check(lambda s: rasterize(s, cam, Pose(), settings=SMOOTH).color.sum(), scene, grad,
                        names=("colors",))
    assert n == 3 and worst < 1e-4


def test_random_scene_all_gradients_fd():
    cam = CameraModel.pinhole(40, 32, 36.0)
    scene = random_scene(10, seed=5)
    scene.means[0, 0] += 2.0  # one splat outside the field of view
    pose = Pose(quat_from_axis_angle([0.3, 1, 0], 0.05), [0.02, -0.01, 0.1])
    up = np.random.default_rng(1).normal(size=(32, 40, 3))
    bg = (0.1, 0.05, 0.2)
    grad = rasterize_backward(scene, cam, pose, up, bg, settings=SMOOTH)
    worst, n = fd_check(lambda s: np.sum(rasterize(s, cam, pose, bg, settings=SMOOTH).color * up), scene, grad)
    assert n > 100
    assert worst < 1e-4


def test_backward_with_forward_context_matches(scene10, small_cam):
    up = np.random.default_rng(0).normal(size=(24, 32, 3))
    fwd = rasterize(scene10, small_cam, Pose(), keep_context=True)
    a = rasterize_backward(scene10, small_cam, Pose(), up, forward=fwd)
    b = rasterize_backward(scene10, small_cam, Pose(), up)
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k])
