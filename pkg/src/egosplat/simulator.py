"""Synthetic egocentric capture: scenes, head-motion trajectories and a sensor model.

The simulator runs the image-formation model forward with the true
trajectory, adds auto-exposure, lens shading and photon noise, and emits a
:class:`~egosplat.dataset.CaptureDataset` whose ground truth is exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .dataset import CaptureDataset
from .errors import ConfigurationError, ContractViolation
from .formation import (
    FormationConfig,
    MotionSamplePlan,
    PixelMaps,
    apply_shot_noise,
    form_image,
    invert_response,
)
from .geometry import CameraModel, FrameMeta, Pose, Trajectory, build_rectification
from .scene import GaussianScene, compress_radiance, logit

__all__ = [
    "MotionProfile",
    "SensorProfile",
    "PoseDegradation",
    "generate_scene",
    "default_viewpoint",
    "perturb_scene",
    "generate_trajectory",
    "degrade_trajectory",
    "vignette_image",
    "capture",
]

SCENE_KINDS = ("grid", "room", "clutter")


# --------------------------------------------------------------------------
# Scenes
# --------------------------------------------------------------------------


def _hdr_palette(rng: np.random.Generator, n: int, decades: float = 2.5) -> np.ndarray:
    hue = rng.uniform(0, 1, n)
    base = np.stack([np.abs(np.sin(np.pi * (hue + k / 3.0))) for k in range(3)], axis=1)
    base = 0.2 + 0.8 * base
    level = 10.0 ** rng.uniform(-decades, 0.0, n)
    return base * level[:, None]


def _quat_z_to(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating +z onto ``normal``."""
    z = np.array([0.0, 0.0, 1.0])
    n = normal / np.linalg.norm(normal)
    axis = np.cross(z, n)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.array([0.0, 0.0, 0.0, 1.0]) if n[2] > 0 else np.array([1.0, 0.0, 0.0, 0.0])
    return Rotation.from_rotvec(axis / s * math.atan2(s, float(np.dot(z, n)))).as_quat()


def generate_scene(kind: str = "grid", count: int = 100, seed: int = 0,
                   gamma: float = 2.2) -> GaussianScene:
    """Deterministic ground-truth scene inside ``[-1, 1]^3``.

    ``grid``: square grid of isotropic blobs on the ``z = 0`` plane.
    ``room``: flattened splats tiling five walls of a box around the
    origin, with a bright window patch. ``clutter``: random anisotropic
    Gaussians in a ball of radius 0.5. All kinds use colors spanning more
    than two decades of linear radiance.
    """
    if count < 1:
        raise ContractViolation("count must be >= 1")
    if kind not in SCENE_KINDS:
        raise ConfigurationError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    if count == 1:
        return GaussianScene(np.zeros((1, 3)), [[0, 0, 0, 1.0]], np.log([[0.05] * 3]), [logit(0.9)],
                             compress_radiance(np.array([[0.8, 0.5, 0.3]]), gamma), gamma=gamma)
    if kind == "grid":
        n = int(round(math.sqrt(count)))
        m = int(math.ceil(count / n))
        spacing = 1.0 / max(n, m)
        xs = (np.arange(n) - (n - 1) / 2.0) * spacing
        ys = (np.arange(m) - (m - 1) / 2.0) * spacing
        gx, gy = np.meshgrid(xs, ys)
        means = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)[:count]
        log_scales = np.full((count, 3), math.log(spacing / 6.0))
        quats = np.tile([0.0, 0.0, 0.0, 1.0], (count, 1))
        opac = np.full(count, logit(0.9))
        colors = _hdr_palette(rng, count)
    elif kind == "room":
        # walls: front z=+1 (weighted), left/right x=-/+1, floor/ceiling y=+/-0.75
        walls = [
            (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), (2.0, 1.5), 3.0),
            (np.array([-1.0, 0.0, 0.0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0]), (2.0, 1.5), 1.0),
            (np.array([1.0, 0.0, 0.0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0]), (2.0, 1.5), 1.0),
            (np.array([0.0, 0.75, 0.0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), (2.0, 2.0), 0.5),
            (np.array([0.0, -0.75, 0.0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), (2.0, 2.0), 0.5),
        ]
        weights = np.array([w[3][0] * w[3][1] * w[4] for w in walls])
        alloc = np.floor(count * weights / weights.sum()).astype(int)
        alloc[0] += count - alloc.sum()
        means, normals, sizes, colors = [], [], [], []
        for (center, ax_u, ax_v, (su, sv), _), k in zip(walls, alloc):
            if k == 0:
                continue
            nu = max(int(round(math.sqrt(k * su / sv))), 1)
            nv = int(math.ceil(k / nu))
            uu, vv = np.meshgrid((np.arange(nu) + 0.5) / nu - 0.5, (np.arange(nv) + 0.5) / nv - 0.5)
            uu = uu.ravel()[:k] * su + rng.normal(0, 0.1 * su / nu, k)
            vv = vv.ravel()[:k] * sv + rng.normal(0, 0.1 * sv / nv, k)
            pts = center + uu[:, None] * ax_u + vv[:, None] * ax_v
            means.append(pts)
            normals.append(np.repeat(-center[None] / np.linalg.norm(center), k, axis=0))
            sizes.append(np.full(k, 0.45 * max(su / nu, sv / nv)))
            # texture: stripes + checker modulated albedo
            tex = 0.5 + 0.5 * np.sign(np.sin(9.0 * uu) * np.sin(7.0 * vv))
            tex = 0.03 + 0.35 * tex * (0.6 + 0.4 * np.cos(23.0 * uu + 5.0 * vv))
            tint = _hdr_palette(rng, k, decades=0.3)
            col = tint * tex[:, None]
            if center[2] > 0:
                window = (np.abs(uu - 0.45) < 0.25) & (np.abs(vv + 0.25) < 0.2)
                col[window] = np.clip(0.8 + 0.2 * rng.uniform(size=(window.sum(), 3)), 0, 1)
                shadow = (np.abs(uu + 0.5) < 0.3) & (vv > 0.2)
                col[shadow] *= 0.04
            colors.append(col)
        means = np.concatenate(means)
        normals = np.concatenate(normals)
        sizes = np.concatenate(sizes)
        colors = np.concatenate(colors)
        quats = np.stack([_quat_z_to(nv) for nv in normals])
        log_scales = np.log(np.stack([sizes, sizes, 0.15 * sizes], axis=1))
        opac = np.full(count, logit(0.95))
    else:
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * (0.5 * rng.uniform(0, 1, count) ** (1 / 3))[:, None]
        quats = Rotation.random(count, random_state=seed).as_quat()
        log_scales = np.log(rng.uniform(0.01, 0.06, (count, 3)))
        opac = logit(rng.uniform(0.5, 0.95, count))
        colors = _hdr_palette(rng, count)
    return GaussianScene(means, quats, log_scales, opac, compress_radiance(np.clip(colors, 0, None), gamma),
                         gamma=gamma)


def default_viewpoint(kind: str) -> Pose:
    """Camera pose that frames a generated scene (camera looks along +z)."""
    if kind == "room":
        return Pose()
    return Pose(translation=[0.0, 0.0, -1.5])


def perturb_scene(scene: GaussianScene, seed: int = 0, position_sigma: float = 0.005,
                  log_scale_sigma: float = 0.1) -> GaussianScene:
    """Training start point derived from a ground-truth scene.

    Colors are replaced by uniform random values, opacities reset to 0.5,
    means jittered by ``position_sigma`` and log-scales by
    ``log_scale_sigma``. Geometry stays close to the truth so that
    reconstruction quality reflects the image-formation model rather than
    the lack of densification.
    """
    rng = np.random.default_rng(seed)
    out = scene.copy()
    out.colors[...] = rng.uniform(0.2, 0.8, out.colors.shape)
    out.opacity_logits[...] = 0.0
    out.means += rng.normal(scale=position_sigma, size=out.means.shape)
    out.log_scales += rng.normal(scale=log_scale_sigma, size=out.log_scales.shape)
    out.radiance_scale = 1.0
    return out


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class MotionProfile:
    """Device motion.

    ``kind``: ``static``, ``orbit`` (constant-rate circle around
    ``center`` looking at it) or ``head_scan`` (sinusoidal yaw about the
    camera's vertical axis with peak rate ``peak_deg_s`` plus a lateral
    translation sweep).
    """

    kind: str = "head_scan"
    duration: float = 3.5
    knot_rate: float = 1000.0
    peak_deg_s: float = 200.0
    period: float = 2.0
    translation_amplitude: float = 0.05
    orbit_radius: float = 1.5
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    base_pose: Pose | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        bp = self.base_pose or Pose()
        d["base_pose"] = {"rotation": bp.rotation.tolist(), "translation": bp.translation.tolist()}
        return d


def generate_trajectory(profile: MotionProfile) -> Trajectory:
    if profile.duration <= 0 or profile.knot_rate <= 0:
        raise ConfigurationError("duration and knot rate must be positive")
    n = int(round(profile.duration * profile.knot_rate)) + 1
    t = np.arange(n) / profile.knot_rate
    base = profile.base_pose or Pose()
    if profile.kind == "static":
        return Trajectory(t, np.tile(base.rotation, (n, 1)), np.tile(base.translation, (n, 1)))
    omega = math.radians(profile.peak_deg_s)
    if profile.kind == "orbit":
        theta = omega * t
        c = np.asarray(profile.center, dtype=np.float64)
        r = profile.orbit_radius
        pos = c + r * np.stack([np.sin(theta), np.zeros(n), -np.cos(theta)], axis=1)
        rot = Rotation.from_rotvec(np.stack([np.zeros(n), -theta, np.zeros(n)], axis=1))
        return Trajectory(t, rot.as_quat(), pos)
    if profile.kind == "head_scan":
        amp = omega * profile.period / (2 * math.pi)
        yaw = amp * np.sin(2 * math.pi * t / profile.period)
        local = Rotation.from_rotvec(np.stack([np.zeros(n), yaw, np.zeros(n)], axis=1))
        rot = Rotation.from_quat(base.rotation) * local
        sweep = profile.translation_amplitude * np.sin(2 * math.pi * t / (1.7 * profile.period))
        pos = base.translation + sweep[:, None] * (base.matrix @ np.array([1.0, 0.0, 0.0]))
        return Trajectory(t, rot.as_quat(), pos)
    raise ConfigurationError(f"unknown motion kind {profile.kind!r}")


@dataclass
class PoseDegradation:
    """Pre-refinement pose error: random walks in rotation/translation plus a clock offset.

    Walk amplitudes are the standard deviation reached after one second.
    """

    rotation_deg: float = 0.0
    translation_mm: float = 0.0
    time_offset_ms: float = 0.0
    seed: int = 0

    @property
    def is_zero(self) -> bool:
        return self.rotation_deg == 0.0 and self.translation_mm == 0.0 and self.time_offset_ms == 0.0


def degrade_trajectory(traj: Trajectory, deg: PoseDegradation) -> Trajectory:
    if deg.is_zero:
        return Trajectory(traj.times, traj.rotations, traj.translations)
    rng = np.random.default_rng(deg.seed)
    n = len(traj)
    t = traj.times
    dt = np.diff(t, prepend=t[0])
    offset = deg.time_offset_ms * 1e-3
    lo, hi = traj.domain
    q, p = traj.query(np.clip(t - offset, lo, hi))
    step = np.sqrt(dt)[:, None]
    rot_walk = np.cumsum(rng.normal(size=(n, 3)) * step, axis=0) * math.radians(deg.rotation_deg)
    trans_walk = np.cumsum(rng.normal(size=(n, 3)) * step, axis=0) * deg.translation_mm * 1e-3
    rot = Rotation.from_quat(q) * Rotation.from_rotvec(rot_walk)
    return Trajectory(t, rot.as_quat(), p + trans_walk)


# --------------------------------------------------------------------------
# Sensor
# --------------------------------------------------------------------------


@dataclass
class SensorProfile:
    width: int = 128
    height: int = 128
    focal: float | None = None
    readout: float = 16e-3
    exposure_policy: str = "auto"
    exposure: float = 1e-3
    exposure_cap: float = 2e-3
    exposure_ref: float = 2e-3
    max_gain: float = 32.0
    ae_target: float = 0.18
    ae_deadband: float = 0.05
    vignette_corner: float = 0.6
    photons_per_unit: float | None = None
    frame_rate: float = 10.0
    gamma: float = 2.2
    raw_model: str = "pinhole"
    sparse_points: int = 200
    min_samples_divisor: int = 8
    start_margin: float = 0.05

    def __post_init__(self):
        if self.readout < 0 or self.exposure_cap <= 0 or self.exposure <= 0:
            raise ConfigurationError("readout must be >= 0 and exposures > 0")
        if not 0.0 < self.vignette_corner <= 1.0:
            raise ConfigurationError("vignette corner attenuation must lie in (0, 1]")
        if self.exposure_policy not in ("auto", "fixed"):
            raise ConfigurationError(f"unknown exposure policy {self.exposure_policy!r}")
        if self.raw_model not in ("pinhole", "fisheye"):
            raise ConfigurationError(f"unknown raw camera model {self.raw_model!r}")

    def camera(self) -> CameraModel:
        f = self.focal if self.focal is not None else self.width / 2.0
        if self.raw_model == "fisheye":
            return CameraModel.fisheye(self.width, self.height, f)
        return CameraModel.pinhole(self.width, self.height, f)


def vignette_image(cam: CameraModel, corner: float) -> np.ndarray:
    """Radial quadratic falloff: 1 at the principal point, ``corner`` at the farthest corner."""
    uv = cam.pixel_grid()
    r2 = (uv[..., 0] - cam.cx) ** 2 + (uv[..., 1] - cam.cy) ** 2
    r2max = max((x - cam.cx) ** 2 + (y - cam.cy) ** 2
                for x in (0, cam.width - 1) for y in (0, cam.height - 1))
    return 1.0 - (1.0 - corner) * r2 / r2max


class _AutoExposure:
    def __init__(self, sensor: SensorProfile):
        self.s = sensor
        self.exposure = sensor.exposure if sensor.exposure_policy == "fixed" else min(sensor.exposure, sensor.exposure_cap)
        self.gain = 1.0

    def settings(self) -> tuple[float, float]:
        return self.exposure, self.gain

    def update(self, mean_linear: float) -> None:
        s = self.s
        if s.exposure_policy == "fixed":
            return
        if mean_linear > 0 and abs(mean_linear / s.ae_target - 1.0) <= s.ae_deadband:
            return
        ratio = s.ae_target / mean_linear if mean_linear > 0 else 4.0
        total = self.exposure * self.gain * min(max(ratio, 0.05), 20.0)
        self.exposure = min(max(total, 1e-6), s.exposure_cap)
        self.gain = float(np.clip(total / self.exposure, 1.0, s.max_gain))


def _mean_linear(pixels: np.ndarray, valid: np.ndarray, gamma: float) -> float:
    return float(np.mean(invert_response(pixels, gamma)[valid]))


def capture(scene: GaussianScene, motion: MotionProfile | None = None,
            sensor: SensorProfile | None = None, degradation: PoseDegradation | None = None,
            seed: int = 0, n_frames: int | None = None) -> CaptureDataset:
    """Simulate a rolling-shutter recording of ``scene``.

    Frames start ``sensor.start_margin`` seconds into the trajectory and
    repeat at ``sensor.frame_rate`` until the trajectory runs out (or
    ``n_frames`` are taken). The returned dataset carries the degraded
    trajectory as ``trajectory`` and the true one as ``trajectory_gt``.
    """
    motion = motion or MotionProfile()
    sensor = sensor or SensorProfile()
    degradation = degradation or PoseDegradation()
    if scene.color_space != "gamma":
        scene = scene.with_color_space("gamma")
    rng = np.random.default_rng(seed)
    true_traj = generate_trajectory(motion)
    raw_cam = sensor.camera()
    formation = FormationConfig(gamma=sensor.gamma, exposure_ref=sensor.exposure_ref)
    raw_vignette = vignette_image(raw_cam, sensor.vignette_corner)

    if sensor.raw_model == "pinhole":
        render_cam = raw_cam
        render_maps = PixelMaps.identity(raw_cam, raw_vignette)
        to_raw = None
        raw_valid = np.ones((raw_cam.height, raw_cam.width), dtype=bool)
    else:
        # render through a wide pinhole whose index ratio encodes fisheye rows, then warp to the fisheye
        half_fov = min(raw_cam.width / 2.0 / raw_cam.fx, math.radians(60.0))
        scale = 1.5
        rw, rh = int(raw_cam.width * scale), int(raw_cam.height * scale)
        render_cam = CameraModel.pinhole(rw, rh, (rw / 2.0) / math.tan(half_fov))
        rect = build_rectification(raw_cam, render_cam)
        render_maps = PixelMaps.from_rectification(rect, raw_vignette)
        to_raw = build_rectification(render_cam, raw_cam)
        raw_valid = to_raw.valid.copy()

    period = 1.0 / sensor.frame_rate
    lo, hi = true_traj.domain
    metas_t0 = []
    t0 = lo + sensor.start_margin
    while t0 + sensor.readout + sensor.exposure_cap + sensor.start_margin <= hi + 1e-12:
        metas_t0.append(t0)
        if n_frames is not None and len(metas_t0) >= n_frames:
            break
        t0 += period
    if not metas_t0:
        raise ConfigurationError("trajectory too short for a single frame")
    n_samples = max(sensor.height // sensor.min_samples_divisor, 1)

    ae = _AutoExposure(sensor)
    # meter before recording so the first frame is already exposed correctly
    if sensor.exposure_policy == "auto":
        for _ in range(8):
            te, g = ae.settings()
            meta = FrameMeta(-1, metas_t0[0], sensor.readout, te, g)
            img = form_image(scene, true_traj, render_cam, meta, render_maps, None, "center_row_only",
                             formation)
            before = (ae.exposure, ae.gain)
            ae.update(_mean_linear(img.pixels, img.valid, sensor.gamma))
            if (ae.exposure, ae.gain) == before:
                break

    metas, images, depths = [], [], []
    empty = 0
    for k, t0 in enumerate(metas_t0):
        te, g = ae.settings()
        meta = FrameMeta(k, t0, sensor.readout, te, g)
        plan = MotionSamplePlan.uniform(meta, n_samples)
        formed = form_image(scene, true_traj, render_cam, meta, render_maps, plan, "full", formation)
        pixels = formed.pixels
        if to_raw is not None:
            pixels = np.clip(to_raw.apply(pixels), 0.0, 1.0)
        if sensor.photons_per_unit is not None:
            pixels = apply_shot_noise(pixels, g, sensor.photons_per_unit, rng, sensor.gamma)
            pixels = np.where(raw_valid[..., None], pixels, 0.0)
        ae.update(_mean_linear(pixels, raw_valid, sensor.gamma))
        metas.append(meta)
        images.append(pixels)

        pose = true_traj.pose(meta.center_row_time)
        pc = (scene.means - pose.translation) @ pose.matrix
        uv, front = raw_cam.project(pc)
        inside = front & raw_cam.in_bounds(uv)
        if not np.any(inside):
            empty += 1
            depths.append(np.zeros((0, 3)))
            continue
        idx = np.flatnonzero(inside)
        if len(idx) > sensor.sparse_points:
            idx = np.sort(rng.choice(idx, sensor.sparse_points, replace=False))
        depths.append(np.column_stack([uv[idx], pc[idx, 2]]))
    if empty:
        warnings.warn(f"{empty} frame(s) see no scene content", RuntimeWarning, stacklevel=2)

    lin_colors = invert_response(np.maximum(scene.colors, 0.0), scene.gamma) * scene.radiance_scale
    points = np.column_stack([scene.means, np.clip(lin_colors, 0.0, 1.0)])
    manifest = {
        "seed": seed,
        "motion": motion.to_dict(),
        "sensor": asdict(sensor),
        "degradation": asdict(degradation),
        "empty_frames": empty,
        "samples_per_frame": n_samples,
    }
    raw_maps = PixelMaps.identity(raw_cam, np.where(raw_valid, raw_vignette, 0.0))
    if to_raw is not None:
        raw_maps = PixelMaps(np.where(raw_valid, raw_maps.index_ratio, np.nan), raw_maps.vignette, raw_valid)
    return CaptureDataset(
        camera=raw_cam, metas=metas, images=images,
        trajectory=degrade_trajectory(true_traj, degradation), maps=raw_maps, sparse_depth=depths,
        trajectory_gt=true_traj, formation=formation, manifest=manifest, points=points,
        rectified=sensor.raw_model == "pinhole",
    )
