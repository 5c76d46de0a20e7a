"""Differentiable Gaussian rasterization for a single camera pose.

Forward: project each Gaussian with a perspective camera and first-order
covariance propagation, sort by camera-space depth, and alpha-composite
front to back per pixel. Backward: exact analytic gradients of the
composited color with respect to every per-Gaussian parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractViolation, NumericalError
from .geometry import CameraModel, Pose, quat_to_matrix
from .scene import GaussianScene, sigmoid

__all__ = [
    "RasterSettings",
    "RenderedSample",
    "GradientBuffer",
    "rasterize",
    "rasterize_backward",
]


@dataclass(frozen=True)
class RasterSettings:
    """Rasterizer constants.

    ``extent_sigma`` bounds each splat's screen footprint (in standard
    deviations of its largest axis); ``inf`` evaluates every Gaussian at
    every pixel, which makes the image a smooth function of all parameters.
    """

    near: float = 0.01
    extent_sigma: float = 3.0
    dilation: float = 0.3
    min_transmittance: float = 1e-4
    tile: int = 16


DEFAULT_SETTINGS = RasterSettings()


@dataclass
class _Projected:
    visible: np.ndarray
    order: np.ndarray
    p_cam: np.ndarray
    mean2d: np.ndarray
    cov3d: np.ndarray
    rot: np.ndarray
    var: np.ndarray
    jac: np.ndarray
    world_to_cam: np.ndarray
    conic: np.ndarray
    opac: np.ndarray
    color: np.ndarray
    bbox: np.ndarray


@dataclass
class RenderedSample:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray | None = None
    _ctx: dict | None = field(default=None, repr=False)


@dataclass
class GradientBuffer:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    radiance_scale: float = 0.0

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "GradientBuffer":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), 0.0)

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        self.means += other.means
        self.quats += other.quats
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        self.radiance_scale += other.radiance_scale
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "quats": self.quats, "log_scales": self.log_scales,
                "opacity_logits": self.opacity_logits, "colors": self.colors}

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays().values()) and self.radiance_scale == 0.0


FOV_CLAMP = 1.3


def _clamped_xy(x, y, zs, cam: CameraModel):
    limx = FOV_CLAMP * 0.5 * cam.width / cam.fx
    limy = FOV_CLAMP * 0.5 * cam.height / cam.fy
    ux, uy = x / zs, y / zs
    cx, cy = np.abs(ux) > limx, np.abs(uy) > limy
    return np.clip(ux, -limx, limx) * zs, np.clip(uy, -limy, limy) * zs, cx, cy


def _project(scene: GaussianScene, cam: CameraModel, pose: Pose, settings: RasterSettings) -> _Projected:
    if cam.kind != "pinhole":
        raise ConfigurationError("rasterizer supports the rectified pinhole model only")
    if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
        raise ContractViolation("pose must be finite")
    scene.check_finite()
    n = len(scene)
    world_to_cam = pose.matrix.T
    p_cam = (scene.means - pose.translation) @ world_to_cam.T
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    front = z > settings.near
    zs = np.where(front, z, 1.0)
    fx, fy = cam.fx, cam.fy
    mean2d = np.stack([fx * x / zs + cam.cx, fy * y / zs + cam.cy], axis=1)
    # the affine approximation is clamped just outside the field of view so
    # grazing splats near the camera cannot cover the whole image
    tx, ty, _, _ = _clamped_xy(x, y, zs, cam)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * tx / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * ty / zs**2
    rot = quat_to_matrix(scene.quats) if n else np.zeros((0, 3, 3))
    var = np.exp(2.0 * scene.log_scales)
    cov3d = (rot * var[:, None, :]) @ rot.transpose(0, 2, 1)
    m = jac @ world_to_cam
    cov2d = m @ cov3d @ m.transpose(0, 2, 1)
    a = cov2d[:, 0, 0] + settings.dilation
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + settings.dilation
    det = a * c - b * b
    front &= det > 0
    det = np.where(front, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    w, h = cam.width, cam.height
    if np.isinf(settings.extent_sigma):
        bbox = np.tile(np.array([0, w - 1, 0, h - 1], dtype=np.int64), (n, 1))
    else:
        radius = settings.extent_sigma * np.sqrt(lam)
        with np.errstate(invalid="ignore"):
            lo_x = np.ceil(mean2d[:, 0] - radius)
            hi_x = np.floor(mean2d[:, 0] + radius)
            lo_y = np.ceil(mean2d[:, 1] - radius)
            hi_y = np.floor(mean2d[:, 1] + radius)
        front &= (hi_x >= 0) & (lo_x <= w - 1) & (hi_y >= 0) & (lo_y <= h - 1)
        bbox = np.zeros((n, 4), dtype=np.int64)
        sel = front
        bbox[sel, 0] = np.clip(lo_x[sel], 0, w - 1)
        bbox[sel, 1] = np.clip(hi_x[sel], 0, w - 1)
        bbox[sel, 2] = np.clip(lo_y[sel], 0, h - 1)
        bbox[sel, 3] = np.clip(hi_y[sel], 0, h - 1)
    idx = np.flatnonzero(front)
    order = idx[np.lexsort((idx, z[idx]))]
    opac = sigmoid(scene.opacity_logits) if n else np.zeros(0)
    color = np.maximum(scene.colors, 0.0)
    return _Projected(front, order.astype(np.int64), p_cam, mean2d, cov3d, rot, var, jac,
                      world_to_cam, conic, opac, color, bbox)


def _bin(proj: _Projected, cam: CameraModel, settings: RasterSettings):
    tile = settings.tile
    tiles_x = (cam.width + tile - 1) // tile
    tiles_y = (cam.height + tile - 1) // tile
    offsets, entries = _kernels.bin_tiles(proj.order, proj.bbox, tile, tiles_x, tiles_y)
    return tile, tiles_x, offsets, entries


def _mask_args(cam: CameraModel, pixel_mask):
    if pixel_mask is None:
        return np.ones((1, 1), dtype=np.bool_), False
    mask = np.asarray(pixel_mask, dtype=np.bool_)
    if mask.shape != (cam.height, cam.width):
        raise ContractViolation(f"pixel mask shape {mask.shape} != {(cam.height, cam.width)}")
    return mask, True


def rasterize(scene: GaussianScene, cam: CameraModel, pose: Pose, background=(0.0, 0.0, 0.0),
              settings: RasterSettings = DEFAULT_SETTINGS, pixel_mask: np.ndarray | None = None,
              keep_context: bool = False) -> RenderedSample:
    """Render ``scene`` from ``pose`` (world-from-camera).

    Colors are composited in whatever space the scene stores them. Pixels
    outside ``pixel_mask`` are not evaluated and hold the background.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = _project(scene, cam, pose, settings)
    tile, tiles_x, offsets, entries = _bin(proj, cam, settings)
    mask, use_mask = _mask_args(cam, pixel_mask)
    color, t_final, n_contrib, depth = _kernels.forward(
        offsets, entries, tile, tiles_x, cam.width, cam.height, mask, use_mask,
        proj.mean2d, proj.conic, proj.opac, proj.color, proj.p_cam[:, 2].copy(), proj.bbox, bg,
        settings.min_transmittance)
    ctx = None
    if keep_context:
        ctx = {"proj": proj, "bin": (tile, tiles_x, offsets, entries), "t_final": t_final,
               "n_contrib": n_contrib, "bg": bg, "mask": (mask, use_mask)}
    return RenderedSample(color, 1.0 - t_final, depth, ctx)


def _quat_backward(quats: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norm
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_rot
    gx = 2 * (y * (g[:, 0, 1] + g[:, 1, 0]) + z * (g[:, 0, 2] + g[:, 2, 0])
              - 2 * x * (g[:, 1, 1] + g[:, 2, 2]) + w * (g[:, 2, 1] - g[:, 1, 2]))
    gy = 2 * (x * (g[:, 0, 1] + g[:, 1, 0]) + z * (g[:, 1, 2] + g[:, 2, 1])
              - 2 * y * (g[:, 0, 0] + g[:, 2, 2]) + w * (g[:, 0, 2] - g[:, 2, 0]))
    gz = 2 * (x * (g[:, 0, 2] + g[:, 2, 0]) + y * (g[:, 1, 2] + g[:, 2, 1])
              - 2 * z * (g[:, 0, 0] + g[:, 1, 1]) + w * (g[:, 1, 0] - g[:, 0, 1]))
    gw = 2 * (x * (g[:, 2, 1] - g[:, 1, 2]) + y * (g[:, 0, 2] - g[:, 2, 0])
              + z * (g[:, 1, 0] - g[:, 0, 1]))
    gq = np.stack([gx, gy, gz, gw], axis=1)
    gq = gq - q * np.sum(q * gq, axis=1, keepdims=True)
    return gq / norm


def rasterize_backward(scene: GaussianScene, cam: CameraModel, pose: Pose, grad_color: np.ndarray,
                       background=(0.0, 0.0, 0.0), settings: RasterSettings = DEFAULT_SETTINGS,
                       pixel_mask: np.ndarray | None = None,
                       forward: RenderedSample | None = None) -> GradientBuffer:
    """Gradients of ``sum(grad_color * rendered_color)`` w.r.t. scene parameters.

    Pass the :class:`RenderedSample` from a ``keep_context=True`` forward call
    to skip recomputing the forward pass.
    """
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (cam.height, cam.width, 3):
        raise ContractViolation(
            f"upstream gradient shape {grad_color.shape} != {(cam.height, cam.width, 3)}")
    out = GradientBuffer.zeros_like(scene)
    if len(scene) == 0 or not np.any(grad_color):
        return out
    if forward is None or forward._ctx is None:
        forward = rasterize(scene, cam, pose, background, settings, pixel_mask, keep_context=True)
    ctx = forward._ctx
    proj: _Projected = ctx["proj"]
    tile, tiles_x, offsets, entries = ctx["bin"]
    mask, use_mask = ctx["mask"]
    g_mean2d, g_conic, g_opac, g_color = _kernels.backward(
        offsets, entries, tile, tiles_x, cam.width, cam.height, mask, use_mask,
        proj.mean2d, proj.conic, proj.opac, proj.color, proj.bbox, ctx["bg"], ctx["t_final"],
        ctx["n_contrib"], np.ascontiguousarray(grad_color), len(scene))

    vis = proj.visible
    out.colors = np.where(scene.colors > 0.0, g_color, 0.0)
    out.opacity_logits = g_opac * proj.opac * (1.0 - proj.opac)

    # conic (A, B, C) -> symmetric 2D covariance
    conic = proj.conic
    qmat = np.empty((len(scene), 2, 2))
    qmat[:, 0, 0] = conic[:, 0]
    qmat[:, 0, 1] = qmat[:, 1, 0] = conic[:, 1]
    qmat[:, 1, 1] = conic[:, 2]
    gq = np.empty_like(qmat)
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -qmat @ gq @ qmat

    w2c = proj.world_to_cam
    m = proj.jac @ w2c
    mt = m.transpose(0, 2, 1)
    g_cov3d = mt @ g_cov2d @ m
    g_m = 2.0 * (g_cov2d @ m @ proj.cov3d)
    g_jac = g_m @ w2c.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    zs = np.where(vis, z, 1.0)
    fx, fy = cam.fx, cam.fy
    tx, ty, clx, cly = _clamped_xy(x, y, zs, cam)
    gp = np.zeros((len(scene), 3))
    gp[:, 0] = g_mean2d[:, 0] * fx / zs + np.where(clx, 0.0, g_jac[:, 0, 2] * (-fx / zs**2))
    gp[:, 1] = g_mean2d[:, 1] * fy / zs + np.where(cly, 0.0, g_jac[:, 1, 2] * (-fy / zs**2))
    gp[:, 2] = (g_mean2d[:, 0] * (-fx * x / zs**2) + g_mean2d[:, 1] * (-fy * y / zs**2)
                + g_jac[:, 0, 0] * (-fx / zs**2) + g_jac[:, 1, 1] * (-fy / zs**2)
                + g_jac[:, 0, 2] * np.where(clx, 1.0, 2.0) * fx * tx / zs**3
                + g_jac[:, 1, 2] * np.where(cly, 1.0, 2.0) * fy * ty / zs**3)
    out.means = np.where(vis[:, None], gp @ w2c, 0.0)

    rot, var = proj.rot, proj.var
    g_var = np.einsum("nki,nki->ni", g_cov3d @ rot, rot)
    out.log_scales = np.where(vis[:, None], g_var * 2.0 * var, 0.0)
    g_rot = 2.0 * (g_cov3d @ rot) * var[:, None, :]
    out.quats = np.where(vis[:, None], _quat_backward(scene.quats, g_rot), 0.0)
    if not all(np.all(np.isfinite(a)) for a in out.arrays().values()):
        bad = np.flatnonzero(~np.all(np.isfinite(np.concatenate(
            [a.reshape(len(scene), -1) for a in out.arrays().values()], axis=1)), axis=1))
        raise NumericalError(f"non-finite gradient for Gaussian {int(bad[0])}", index=int(bad[0]))
    return out
