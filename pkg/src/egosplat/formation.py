"""Physical image formation: rolling shutter, exposure, gain, vignette, response.

A frame is formed by rasterizing the scene at a handful of poses sampled
across the frame's readout + exposure bracket, gathering for every pixel
the samples that fall inside that pixel's exposure window, averaging them
in linear radiance, weighting by gain, lens shading, global radiance scale
and exposure, and finally applying the gamma response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, DomainError
from .geometry import (
    CameraModel,
    FrameMeta,
    Pose,
    Rectification,
    Trajectory,
    pixel_time,
    reprojection_displacements,
)
from .rasterizer import (
    DEFAULT_SETTINGS,
    GradientBuffer,
    RasterSettings,
    rasterize,
    rasterize_backward,
)
from .scene import GaussianScene

__all__ = [
    "PixelMaps",
    "MotionSamplePlan",
    "FormationConfig",
    "FormedImage",
    "FormationMode",
    "weight_map",
    "plan_motion_samples",
    "assign_samples",
    "form_image",
    "form_image_backward",
    "apply_response",
    "invert_response",
    "apply_shot_noise",
]


@dataclass(frozen=True)
class PixelMaps:
    """Per-pixel lookups in the rectified image.

    ``index_ratio`` is NaN outside ``valid``; ``vignette`` is the rectified
    lens-shading image (multiplicative, in (0, 1]).
    """

    index_ratio: np.ndarray
    vignette: np.ndarray
    valid: np.ndarray
    flip_readout: bool = False

    def __post_init__(self):
        ratio = np.asarray(self.index_ratio, dtype=np.float64)
        vig = np.asarray(self.vignette, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool) & np.isfinite(ratio)
        if ratio.shape != vig.shape or ratio.shape != valid.shape:
            raise ConfigurationError("pixel map shapes disagree")
        r = ratio[valid]
        if np.any((r < 0.0) | (r > 1.0)):
            raise ContractViolation("index ratio values must lie in [0, 1]")
        object.__setattr__(self, "index_ratio", np.where(valid, ratio, np.nan))
        object.__setattr__(self, "vignette", np.where(valid, vig, 0.0))
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def identity(cls, cam: CameraModel, vignette: np.ndarray | None = None) -> "PixelMaps":
        """Maps of an unrectified sensor: ratio ``row / H``, everything valid."""
        h, w = cam.height, cam.width
        ratio = np.repeat((np.arange(h, dtype=np.float64) / h)[:, None], w, axis=1)
        vig = np.ones((h, w)) if vignette is None else np.asarray(vignette, dtype=np.float64)
        return cls(ratio, vig, np.ones((h, w), dtype=bool))

    @classmethod
    def from_rectification(cls, rect: Rectification, raw_vignette: np.ndarray | None = None,
                           flip_readout: bool = False) -> "PixelMaps":
        if raw_vignette is None:
            vig = np.where(rect.valid, 1.0, 0.0)
        else:
            vig = rect.apply(raw_vignette)
        return cls(rect.index_ratio, vig, rect.valid, flip_readout)

    def check_camera(self, cam: CameraModel) -> None:
        if self.shape != (cam.height, cam.width):
            raise ConfigurationError(
                f"pixel maps {self.shape} do not match camera {(cam.height, cam.width)}")


@dataclass(frozen=True)
class MotionSamplePlan:
    """Pose sample times for one frame; ``interval`` drives the exposure-coverage rule."""

    times: np.ndarray
    interval: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(times) < 1:
            raise ContractViolation("a plan needs at least one sample")
        if np.any(np.diff(times) < 0):
            raise ContractViolation("plan sample times must be sorted")
        object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return len(self.times)

    @classmethod
    def uniform(cls, meta: FrameMeta, n: int) -> "MotionSamplePlan":
        """Centers of ``n`` equal sub-brackets of ``[t0, t0 + readout + exposure]``."""
        a, b = meta.bracket
        length = (b - a) / n
        return cls(a + (np.arange(n) + 0.5) * length, length)

    @classmethod
    def from_times(cls, times) -> "MotionSamplePlan":
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        interval = float(np.median(np.diff(times))) if len(times) > 1 else math.inf
        return cls(times, interval)

    @classmethod
    def center_row(cls, meta: FrameMeta) -> "MotionSamplePlan":
        return cls(np.array([meta.center_row_time]), math.inf)


@dataclass(frozen=True)
class FormationMode:
    motion_sampling: bool = True
    scene_gamma: bool = True

    @classmethod
    def parse(cls, mode) -> "FormationMode":
        if isinstance(mode, FormationMode):
            return mode
        table = {
            "full": cls(True, True),
            "center_row_only": cls(False, True),
            "no_gamma": cls(True, False),
            "center_row_no_gamma": cls(False, False),
        }
        if mode not in table:
            raise ConfigurationError(f"unknown formation mode {mode!r}")
        return table[mode]


@dataclass(frozen=True)
class FormationConfig:
    """Formation constants shared by a dataset."""

    gamma: float = 2.2
    exposure_ref: float = 2e-3
    max_samples: int = 16
    threshold_px: float = 1.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    raster: RasterSettings = DEFAULT_SETTINGS


@dataclass
class FormedImage:
    pixels: np.ndarray
    valid: np.ndarray
    linear: np.ndarray | None = None
    _ctx: dict | None = field(default=None, repr=False)


def apply_response(x, gamma: float = 2.2):
    """Camera response ``x ** (1 / gamma)`` for ``x >= 0``."""
    return np.power(np.maximum(np.asarray(x, dtype=np.float64), 0.0), 1.0 / gamma)


def invert_response(y, gamma: float = 2.2):
    return np.power(np.maximum(np.asarray(y, dtype=np.float64), 0.0), gamma)


def weight_map(meta: FrameMeta, maps: PixelMaps, radiance_scale: float,
               exposure_ref: float) -> np.ndarray:
    """``gain * vignette * radiance_scale * exposure / exposure_ref``; zero off the valid mask."""
    return meta.gain * maps.vignette * radiance_scale * (meta.exposure / exposure_ref)


# --------------------------------------------------------------------------
# Motion sampling
# --------------------------------------------------------------------------


def _angular_bound_samples(traj: Trajectory, cam: CameraModel, meta: FrameMeta, max_n: int,
                           threshold: float) -> int:
    a, b = meta.bracket
    times = traj.times
    lo = max(int(np.searchsorted(times, a, side="right")) - 1, 0)
    hi = min(int(np.searchsorted(times, b, side="left")) + 1, len(times))
    seg = Trajectory(times[lo:hi], traj.rotations[lo:hi], traj.translations[lo:hi]) if hi - lo >= 2 else None
    omega = float(np.max(seg.angular_speed())) if seg is not None else 0.0
    focal = max(cam.fx, cam.fy)
    length = b - a
    for n in range(1, max_n + 1):
        if focal * math.tan(min(omega * length / n, 1.5)) < threshold:
            return n
    return max_n


def plan_motion_samples(traj: Trajectory, cam: CameraModel, meta: FrameMeta,
                        anchor_pixels: np.ndarray | None, anchor_depths: np.ndarray | None,
                        max_n: int = 16, threshold: float = 1.0) -> MotionSamplePlan:
    """Fewest equal sub-brackets whose median anchor displacement stays under ``threshold``.

    The bracket is ``[t0, t0 + readout + exposure]``. For ``N = 1, 2, ...``
    every sub-bracket's median reprojection displacement must be strictly
    below ``threshold`` pixels; the first such ``N`` (capped at ``max_n``)
    wins and the sub-bracket centers become the sample times. Without
    anchors, ``N`` comes from the peak angular speed on the optical axis.
    """
    if threshold <= 0:
        raise ContractViolation("threshold must be positive")
    if max_n < 1:
        raise ContractViolation("max_n must be >= 1")
    a, b = meta.bracket
    if not traj.contains([a, b]):
        lo, hi = traj.domain
        raise DomainError(
            f"frame {meta.frame_id}: bracket [{a}, {b}] s exceeds trajectory [{lo}, {hi}] s")
    if anchor_pixels is None or len(anchor_pixels) == 0:
        return MotionSamplePlan.uniform(meta, _angular_bound_samples(traj, cam, meta, max_n, threshold))
    length = b - a
    for n in range(1, max_n + 1):
        ok = True
        for k in range(n):
            window = (a + k * length / n, a + (k + 1) * length / n)
            disp, _ = reprojection_displacements(traj, cam, meta, anchor_pixels, anchor_depths, window)
            if len(disp) and not np.median(disp) < threshold:
                ok = False
                break
        if ok:
            return MotionSamplePlan.uniform(meta, n)
    return MotionSamplePlan.uniform(meta, max_n)


def assign_samples(plan: MotionSamplePlan, meta: FrameMeta, maps: PixelMaps) -> np.ndarray:
    """Per-sample pixel weights ``(N, H, W)``; each valid pixel's weights sum to 1.

    A pixel exposes during ``[t(u), t(u) + exposure]`` with
    ``t(u) = t0 + ratio * readout``. If the exposure spans at least two
    sample intervals every sample inside that window is averaged;
    otherwise the sample nearest the exposure midpoint is used, ties going
    to the earlier one.
    """
    valid = maps.valid
    ratio = np.where(valid, maps.index_ratio, 0.0)
    start = pixel_time(meta, ratio, flip=maps.flip_readout)
    start = np.asarray(start, dtype=np.float64).reshape(valid.shape)
    times = plan.times
    n = len(times)
    weights = np.zeros((n,) + valid.shape)
    if n == 1:
        weights[0] = valid
        return weights
    mid = start + 0.5 * meta.exposure
    hi = np.clip(np.searchsorted(times, mid, side="left"), 1, n - 1)
    lo = hi - 1
    pick = np.where(mid - times[lo] <= times[hi] - mid, lo, hi)
    nearest = np.zeros((n,) + valid.shape, dtype=bool)
    np.put_along_axis(nearest, pick[None], True, axis=0)
    if meta.exposure >= 2.0 * plan.interval:
        inside = (times[:, None, None] >= start[None]) & (times[:, None, None] <= start[None] + meta.exposure)
        count = inside.sum(axis=0)
        chosen = np.where(count[None] > 0, inside, nearest)
    else:
        chosen = nearest
    chosen &= valid[None]
    weights[:] = chosen
    total = weights.sum(axis=0)
    weights /= np.where(total > 0, total, 1.0)[None]
    return weights


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def form_image(scene: GaussianScene, traj: Trajectory, cam: CameraModel, meta: FrameMeta,
               maps: PixelMaps, plan: MotionSamplePlan | None, mode="full",
               config: FormationConfig | None = None, keep_context: bool = False) -> FormedImage:
    """Render a frame through the full sensor model.

    ``mode`` is ``"full"``, ``"center_row_only"`` (single pose at the
    center-row exposure midpoint) or ``"no_gamma"`` (scene colors are
    composited and stored as linear radiance), or a :class:`FormationMode`.
    """
    cfg = config or FormationConfig(gamma=scene.gamma)
    fmode = FormationMode.parse(mode)
    maps.check_camera(cam)
    if fmode.scene_gamma != (scene.color_space == "gamma"):
        raise ConfigurationError(
            f"scene colors are {scene.color_space} but the mode expects "
            f"{'gamma' if fmode.scene_gamma else 'linear'} colors")
    if not fmode.motion_sampling or plan is None:
        plan = MotionSamplePlan.center_row(meta)
    if not traj.contains(plan.times):
        lo, hi = traj.domain
        raise DomainError(f"plan times {plan.times.min()}..{plan.times.max()} s outside "
                          f"trajectory [{lo}, {hi}] s")
    weights = assign_samples(plan, meta, maps)
    gamma = cfg.gamma
    q, p = traj.query(plan.times)
    radiance = np.zeros((cam.height, cam.width, 3))
    rad_flat = radiance.reshape(-1, 3)
    samples = []
    for k in range(plan.n):
        w = weights[k]
        sel = np.flatnonzero(w)
        if len(sel) == 0:
            samples.append(None)
            continue
        pose = Pose(q[k], p[k])
        rendered = rasterize(scene, cam, pose, cfg.background, cfg.raster, pixel_mask=w > 0,
                             keep_context=keep_context)
        # only the pixels assigned to this sample are touched
        comp = np.maximum(rendered.color.reshape(-1, 3)[sel], 0.0)
        lin = comp ** gamma if fmode.scene_gamma else comp
        rad_flat[sel] += w.ravel()[sel, None] * lin
        samples.append((pose, rendered, sel, comp))
    omega = weight_map(meta, maps, scene.radiance_scale, cfg.exposure_ref)
    linear = omega[..., None] * radiance
    pixels = np.clip(apply_response(linear, gamma), 0.0, 1.0)
    pixels = np.where(maps.valid[..., None], pixels, 0.0)
    ctx = None
    if keep_context:
        ctx = {"scene": scene, "cam": cam, "weights": weights, "samples": samples,
               "omega": omega, "radiance": radiance, "mode": fmode, "config": cfg,
               "valid": maps.valid}
    return FormedImage(pixels, maps.valid.copy(), linear, ctx)


def form_image_backward(formed: FormedImage, grad_pixels: np.ndarray) -> GradientBuffer:
    """Gradient of ``sum(grad_pixels * formed.pixels)`` w.r.t. the scene, including its radiance scale."""
    ctx = formed._ctx
    if ctx is None:
        raise ContractViolation("form_image must be called with keep_context=True")
    scene: GaussianScene = ctx["scene"]
    cam: CameraModel = ctx["cam"]
    cfg: FormationConfig = ctx["config"]
    gamma = cfg.gamma
    grad_pixels = np.asarray(grad_pixels, dtype=np.float64)
    if grad_pixels.shape != formed.pixels.shape:
        raise ContractViolation("gradient shape does not match the formed image")
    linear = formed.linear
    active = ctx["valid"][..., None] & (linear > 0.0) & (linear < 1.0)
    safe = np.where(active, linear, 1.0)
    d_linear = np.where(active, grad_pixels * (1.0 / gamma) * safe ** (1.0 / gamma - 1.0), 0.0)
    omega = ctx["omega"]
    out = GradientBuffer.zeros_like(scene)
    out.radiance_scale = float(np.sum(d_linear * ctx["radiance"] * omega[..., None])) / scene.radiance_scale
    d_radiance = (d_linear * omega[..., None]).reshape(-1, 3)
    for w, sample in zip(ctx["weights"], ctx["samples"]):
        if sample is None:
            continue
        pose, rendered, sel, comp = sample
        d_sel = d_radiance[sel] * w.ravel()[sel, None]
        if ctx["mode"].scene_gamma:
            d_sel = d_sel * gamma * comp ** (gamma - 1.0)
        d_sel = np.where(rendered.color.reshape(-1, 3)[sel] >= 0.0, d_sel, 0.0)
        d_comp = np.zeros((cam.height * cam.width, 3))
        d_comp[sel] = d_sel
        out += rasterize_backward(scene, cam, pose, d_comp.reshape(cam.height, cam.width, 3),
                                  cfg.background, cfg.raster, forward=rendered)
    return out


# --------------------------------------------------------------------------
# Shot noise
# --------------------------------------------------------------------------


def apply_shot_noise(img: FormedImage | np.ndarray, gain: float, photons_per_unit: float,
                     seed: int | np.random.Generator | None = 0, gamma: float = 2.2):
    """Poisson photon noise on a response-space image.

    Linear values are converted to photon counts with mean
    ``value * photons_per_unit / gain``, sampled, scaled back and
    re-compressed. Returns the same type that was passed in.
    """
    pixels = img.pixels if isinstance(img, FormedImage) else np.asarray(img, dtype=np.float64)
    if np.any((pixels < 0.0) | (pixels > 1.0)):
        raise ContractViolation("pixel values must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    linear = invert_response(pixels, gamma)
    if math.isinf(photons_per_unit):
        noisy = linear
    else:
        per_photon = gain / photons_per_unit
        counts = rng.poisson(linear / per_photon)
        noisy = counts * per_photon
    out = np.clip(apply_response(noisy, gamma), 0.0, 1.0)
    if isinstance(img, FormedImage):
        out = np.where(img.valid[..., None], out, 0.0)
        return FormedImage(out, img.valid.copy(), None)
    return out
