"""Continuous-time trajectories, camera models and rolling-shutter timing.

Conventions
-----------
* Quaternions are stored scalar-last ``(x, y, z, w)``.
* A :class:`Pose` maps camera coordinates to world coordinates:
  ``p_world = R @ p_cam + t``.
* Camera frame follows OpenCV: ``+x`` right, ``+y`` down, ``+z`` forward.
* Pixel ``(u, v)`` refers to the *center* of column ``u`` / row ``v``,
  so an image spans ``[0, W-1] x [0, H-1]`` in continuous coordinates.
* Times are float seconds on one device clock; files carry integer
  nanoseconds and are converted on read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractViolation, DatasetError, DomainError

__all__ = [
    "Pose",
    "Trajectory",
    "CameraModel",
    "FrameMeta",
    "Rectification",
    "quat_to_matrix",
    "quat_multiply",
    "quat_from_axis_angle",
    "slerp",
    "query_pose",
    "pixel_time",
    "build_rectification",
    "reprojection_displacements",
    "read_trajectory",
    "write_trajectory",
    "read_frame_meta",
    "write_frame_meta",
]


# --------------------------------------------------------------------------
# Quaternion helpers (vectorized over leading axes)
# --------------------------------------------------------------------------


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) ``xyzw`` quaternion."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` of ``xyzw`` quaternions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([axis * math.sin(half), [math.cos(half)]])


def slerp(q0: np.ndarray, q1: np.ndarray, s: np.ndarray | float) -> np.ndarray:
    """Shortest-path spherical interpolation; ``s`` broadcasts over leading axes."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    near = sin_theta < 1e-12
    safe = np.where(near, 1.0, sin_theta)
    w0 = np.where(near, 1.0 - s, np.sin((1.0 - s) * theta) / safe)
    w1 = np.where(near, s, np.sin(s * theta) / safe)
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Pose / Trajectory
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ContractViolation("pose rotation must be a finite non-zero quaternion")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_matrix(rot).as_quat(), translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix4(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.matrix
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        rot = quat_multiply(self.rotation, other.rotation)
        trans = self.matrix @ other.translation + self.translation
        return Pose(rot, trans)

    def inverse(self) -> "Pose":
        inv_rot = quat_conjugate(self.rotation)
        return Pose(inv_rot, -(quat_to_matrix(inv_rot) @ self.translation))

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


class Trajectory:
    """Piecewise pose interpolant: linear translation, slerp rotation.

    Parameters
    ----------
    times:
        Strictly increasing knot timestamps in seconds.
    rotations:
        ``(n, 4)`` world-from-camera quaternions (``xyzw``).
    translations:
        ``(n, 3)`` camera centers in world coordinates, meters.
    """

    def __init__(self, times, rotations, translations):
        times = np.array(times, dtype=np.float64).reshape(-1)
        rotations = np.array(rotations, dtype=np.float64).reshape(-1, 4)
        translations = np.array(translations, dtype=np.float64).reshape(-1, 3)
        if not (len(times) == len(rotations) == len(translations)):
            raise ContractViolation("trajectory arrays must have matching lengths")
        if len(times) < 1:
            raise ContractViolation("trajectory needs at least one knot")
        if np.any(np.diff(times) <= 0.0):
            raise ContractViolation("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(rotations))
                and np.all(np.isfinite(translations))):
            raise ContractViolation("trajectory contains non-finite values")
        rotations = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
        for arr in (times, rotations, translations):
            arr.flags.writeable = False
        self.times = times
        self.rotations = rotations
        self.translations = translations

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Iterable[Pose]) -> "Trajectory":
        poses = list(poses)
        return cls(times, [p.rotation for p in poses], [p.translation for p in poses])

    @classmethod
    def static(cls, pose: Pose, t_start: float, t_end: float) -> "Trajectory":
        return cls.from_poses([t_start, t_end], [pose, pose])

    def __len__(self) -> int:
        return len(self.times)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def contains(self, t) -> bool:
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.domain
        return bool(np.all((t >= lo) & (t <= hi)))

    def _check_domain(self, t: np.ndarray) -> None:
        lo, hi = self.domain
        bad = ~((t >= lo) & (t <= hi))
        if np.any(bad):
            worst = float(np.asarray(t)[bad].flat[0])
            raise DomainError(
                f"time {worst!r} s is outside the trajectory domain [{lo!r}, {hi!r}] s"
            )

    def query(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized query: returns ``(quaternions (..., 4), translations (..., 3))``."""
        t = np.asarray(t, dtype=np.float64)
        self._check_domain(t)
        n = len(self.times)
        if n == 1:
            shape = t.shape
            return (np.broadcast_to(self.rotations[0], shape + (4,)).copy(),
                    np.broadcast_to(self.translations[0], shape + (3,)).copy())
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, n - 2)
        t_a = self.times[idx]
        t_b = self.times[idx + 1]
        s = (t - t_a) / (t_b - t_a)
        q0 = self.rotations[idx]
        q1 = self.rotations[idx + 1]
        p0 = self.translations[idx]
        p1 = self.translations[idx + 1]
        q = slerp(q0, q1, s)
        p = (1.0 - s)[..., None] * p0 + s[..., None] * p1
        # knots are returned verbatim
        at_a = (s == 0.0)[..., None]
        at_b = (s == 1.0)[..., None]
        q = np.where(at_a, q0, np.where(at_b, q1, q))
        p = np.where(at_a, p0, np.where(at_b, p1, p))
        return q, p

    def pose(self, t: float) -> Pose:
        q, p = self.query(float(t))
        return Pose(q, p)

    def transformed(self, world_from_world: Pose) -> "Trajectory":
        """Trajectory re-expressed after a rigid change of world frame."""
        rot = quat_multiply(np.broadcast_to(world_from_world.rotation, self.rotations.shape),
                            self.rotations)
        trans = world_from_world.transform_points(self.translations)
        return Trajectory(self.times, rot, trans)

    def with_body_offset(self, body_from_camera: Pose) -> "Trajectory":
        """Trajectory of a camera rigidly attached at ``body_from_camera``."""
        rot = quat_multiply(self.rotations,
                            np.broadcast_to(body_from_camera.rotation, self.rotations.shape))
        trans = self.translations + np.einsum("nij,j->ni", quat_to_matrix(self.rotations),
                                              body_from_camera.translation)
        return Trajectory(self.times, rot, trans)

    def angular_speed(self) -> np.ndarray:
        """Angular speed (rad/s) between consecutive knots."""
        if len(self.times) < 2:
            return np.zeros(0)
        rel = quat_multiply(quat_conjugate(self.rotations[:-1]), self.rotations[1:])
        ang = 2.0 * np.arctan2(np.linalg.norm(rel[:, :3], axis=1), np.abs(rel[:, 3]))
        return ang / np.diff(self.times)


def query_pose(traj: Trajectory, t: float) -> Pose:
    """Pose of ``traj`` at time ``t``; raises :class:`DomainError` outside the knots."""
    return traj.pose(t)


# --------------------------------------------------------------------------
# Camera model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole or equidistant (Kannala-Brandt style) fisheye camera.

    For ``kind == "fisheye"`` the distorted angle is
    ``theta_d = theta * (1 + k1 theta^2 + k2 theta^4 + ...)`` and the image
    radius is ``f * theta_d``. An empty coefficient list gives the ideal
    equidistant model.
    """

    kind: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("pinhole", "fisheye"):
            raise ConfigurationError(f"unknown camera kind {self.kind!r}")
        if self.kind == "pinhole" and len(self.distortion) > 0:
            raise ConfigurationError("pinhole model takes no distortion coefficients")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ConfigurationError(f"invalid resolution {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "distortion", tuple(float(k) for k in self.distortion))

    @classmethod
    def pinhole(cls, width: int, height: int, focal: float, cx: float | None = None,
                cy: float | None = None) -> "CameraModel":
        return cls("pinhole", focal, focal,
                   (width - 1) / 2.0 if cx is None else cx,
                   (height - 1) / 2.0 if cy is None else cy, width, height)

    @classmethod
    def fisheye(cls, width: int, height: int, focal: float, distortion: Sequence[float] = (),
                cx: float | None = None, cy: float | None = None) -> "CameraModel":
        return cls("fisheye", focal, focal,
                   (width - 1) / 2.0 if cx is None else cx,
                   (height - 1) / 2.0 if cy is None else cy, width, height, tuple(distortion))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def is_distortion_free(self) -> bool:
        return len(self.distortion) == 0

    def _theta_d(self, theta: np.ndarray) -> np.ndarray:
        t2 = theta * theta
        poly = np.ones_like(theta)
        tp = np.ones_like(theta)
        for k in self.distortion:
            tp = tp * t2
            poly = poly + k * tp
        return theta * poly

    def _theta_from_theta_d(self, theta_d: np.ndarray) -> np.ndarray:
        if not self.distortion:
            return theta_d.copy()
        theta = theta_d.copy()
        for _ in range(30):
            t2 = theta * theta
            f = np.zeros_like(theta)
            df = np.zeros_like(theta)
            tp = np.ones_like(theta)
            for i, k in enumerate(self.distortion, start=1):
                tp = tp * t2
                f = f + k * tp
                df = df + (2 * i + 1) * k * tp
            residual = theta * (1.0 + f) - theta_d
            theta = theta - residual / (1.0 + df)
        return theta

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project camera-frame points; returns ``(uv (..., 2), front mask)``."""
        p = np.asarray(points, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        if self.kind == "pinhole":
            ok = z > 0.0
            zs = np.where(ok, z, 1.0)
            u = self.fx * x / zs + self.cx
            v = self.fy * y / zs + self.cy
        else:
            r = np.hypot(x, y)
            theta = np.arctan2(r, z)
            ok = (theta < 0.5 * math.pi) & (np.linalg.norm(p, axis=-1) > 0.0)
            td = self._theta_d(theta)
            rs = np.where(r > 0.0, r, 1.0)
            scale = np.where(r > 0.0, td / rs, 0.0)
            u = self.fx * scale * x + self.cx
            v = self.fy * scale * y + self.cy
        return np.stack([u, v], axis=-1), ok

    def unproject(self, uv: np.ndarray, depth: np.ndarray | float = 1.0) -> np.ndarray:
        """Camera-frame points with ``z == depth`` along each pixel's ray."""
        uv = np.asarray(uv, dtype=np.float64)
        mx = (uv[..., 0] - self.cx) / self.fx
        my = (uv[..., 1] - self.cy) / self.fy
        if self.kind == "pinhole":
            x, y = mx, my
        else:
            theta_d = np.hypot(mx, my)
            theta = self._theta_from_theta_d(theta_d)
            # rays at or beyond 90 degrees have no finite z=1 intersection
            tan_t = np.where(theta < 0.5 * math.pi, np.tan(np.minimum(theta, 0.5 * math.pi - 1e-12)), np.nan)
            scale = np.where(theta_d > 0.0, tan_t / np.where(theta_d > 0.0, theta_d, 1.0), 1.0)
            x, y = mx * scale, my * scale
        depth = np.asarray(depth, dtype=np.float64)
        return np.stack([x * depth, y * depth, np.ones_like(x) * depth], axis=-1)

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0.0) & (uv[..., 0] <= self.width - 1)
                & (uv[..., 1] >= 0.0) & (uv[..., 1] <= self.height - 1))

    def pixel_grid(self) -> np.ndarray:
        """``(H, W, 2)`` array of pixel-center coordinates."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "distortion": list(self.distortion),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["kind"], float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), tuple(d.get("distortion", ())))


# --------------------------------------------------------------------------
# Frame metadata and rolling-shutter time
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameMeta:
    """Per-image sensor record. All times in seconds."""

    frame_id: int
    t0: float
    readout: float
    exposure: float
    gain: float

    def __post_init__(self):
        if not self.readout >= 0.0:
            raise ContractViolation(f"frame {self.frame_id}: readout must be >= 0")
        if not self.exposure > 0.0:
            raise ContractViolation(f"frame {self.frame_id}: exposure must be > 0")
        if not self.gain > 0.0:
            raise ContractViolation(f"frame {self.frame_id}: gain must be > 0")

    @property
    def bracket(self) -> tuple[float, float]:
        """Time span touched by any pixel: ``[t0, t0 + readout + exposure]``."""
        return self.t0, self.t0 + self.readout + self.exposure

    @property
    def center_row_time(self) -> float:
        """Exposure midpoint of the center row; the global-shutter stand-in."""
        return self.t0 + 0.5 * self.readout + 0.5 * self.exposure

    def check_within(self, traj: Trajectory) -> None:
        a, b = self.bracket
        if not traj.contains([a, b]):
            lo, hi = traj.domain
            raise DomainError(
                f"frame {self.frame_id}: bracket [{a}, {b}] s not inside trajectory [{lo}, {hi}] s"
            )


def pixel_time(meta: FrameMeta, ratio, flip: bool = False):
    """Capture start time of a pixel given its index ratio: ``t0 + ratio * readout``.

    ``flip`` models bottom-to-top readout (the ratio is mirrored).
    """
    r = np.asarray(ratio, dtype=np.float64)
    if not np.all((r >= 0.0) & (r <= 1.0)):
        raise ContractViolation("index ratio must lie in [0, 1]")
    if flip:
        r = 1.0 - r
    out = meta.t0 + r * meta.readout
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Rectification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rectification:
    """Lookup from rectified (dst) pixels into the raw (src) image.

    ``map_x``/``map_y`` hold fractional source coordinates, ``index_ratio``
    holds ``source_row / source_height`` (NaN where invalid) and ``valid``
    marks rectified pixels that see the source image.
    """

    src: CameraModel
    dst: CameraModel
    map_x: np.ndarray
    map_y: np.ndarray
    index_ratio: np.ndarray
    valid: np.ndarray

    def apply(self, image: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Bilinearly resample a source image (``H, W`` or ``H, W, C``) into the dst grid."""
        img = np.asarray(image, dtype=np.float64)
        if img.shape[:2] != (self.src.height, self.src.width):
            raise ConfigurationError(
                f"image shape {img.shape[:2]} does not match source camera "
                f"{(self.src.height, self.src.width)}"
            )
        coords = np.stack([np.where(self.valid, self.map_y, 0.0),
                           np.where(self.valid, self.map_x, 0.0)])
        if img.ndim == 2:
            out = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
            return np.where(self.valid, out, fill)
        chans = [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest")
                 for c in range(img.shape[2])]
        out = np.stack(chans, axis=-1)
        return np.where(self.valid[..., None], out, fill)


def build_rectification(src: CameraModel, dst: CameraModel, src_from_dst: Pose | None = None,
                        bottom_to_top: bool = False) -> Rectification:
    """Remap table and rectified index-ratio image from ``src`` to ``dst``.

    ``src_from_dst`` rotates rectified rays into the source camera frame
    (translation is ignored: rectification is a pure re-projection of rays).
    With ``bottom_to_top`` the sensor is read from the last row upward and
    the ratio becomes ``(H - 1 - row) / H``.
    """
    if not dst.is_distortion_free:
        raise ConfigurationError("rectified camera must be distortion-free")
    rays = dst.unproject(dst.pixel_grid())
    if src_from_dst is not None:
        rays = rays @ src_from_dst.matrix.T
    src_uv, front = src.project(rays)
    finite = np.all(np.isfinite(src_uv), axis=-1) & np.all(np.isfinite(rays), axis=-1)
    valid = front & finite & src.in_bounds(np.where(finite[..., None], src_uv, -1.0))
    map_x = np.where(valid, src_uv[..., 0], np.nan)
    map_y = np.where(valid, src_uv[..., 1], np.nan)
    row = (src.height - 1 - map_y) if bottom_to_top else map_y
    ratio = np.where(valid, row / src.height, np.nan)
    for arr in (map_x, map_y, ratio, valid):
        arr.flags.writeable = False
    return Rectification(src, dst, map_x, map_y, ratio, valid)


# --------------------------------------------------------------------------
# Reprojection analysis
# --------------------------------------------------------------------------


def reprojection_displacements(traj: Trajectory, cam: CameraModel, meta: FrameMeta | None,
                               pixels: np.ndarray, depths: np.ndarray,
                               window: tuple[float, float] | None = None
                               ) -> tuple[np.ndarray, int]:
    """Pixel motion of depth anchors between two instants.

    Each anchor ``(u, v)`` with z-depth ``d`` is lifted to 3D at the pose at
    ``window[0]`` and reprojected at ``window[1]``. The window defaults to the
    frame's readout ``[t0, t0 + readout]``.

    Returns
    -------
    displacements:
        ``|delta pixel|`` for every anchor still in front of the camera,
        in input order.
    n_excluded:
        Number of anchors dropped because they left the camera's front
        hemisphere.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if len(pixels) != len(depths):
        raise ContractViolation("pixels and depths must have the same length")
    if np.any(depths <= 0.0):
        raise ContractViolation("anchor depths must be positive")
    if window is None:
        if meta is None:
            raise ContractViolation("either meta or an explicit window is required")
        window = (meta.t0, meta.t0 + meta.readout)
    t_a, t_b = float(window[0]), float(window[1])
    if len(pixels) == 0:
        traj.query(np.array([t_a, t_b]))
        return np.zeros(0), 0
    q, p = traj.query(np.array([t_a, t_b]))
    r_a, r_b = quat_to_matrix(q)
    pts_cam = cam.unproject(pixels, depths)
    world = pts_cam @ r_a.T + p[0]
    cam_b = (world - p[1]) @ r_b
    uv_b, front = cam.project(cam_b)
    ok = front & np.all(np.isfinite(uv_b), axis=-1)
    disp = np.linalg.norm(uv_b - pixels, axis=-1)
    return disp[ok], int(np.count_nonzero(~ok))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def _ns_to_s(ns: int) -> float:
    return int(ns) * 1e-9


def _s_to_ns(s: float) -> int:
    return int(round(float(s) * 1e9))


def read_trajectory(path: str | Path) -> Trajectory:
    """Read ``timestamp_ns tx ty tz qx qy qz qw`` rows."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"trajectory file not found: {path}")
    times, rots, trans = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            times.append(_ns_to_s(int(parts[0])))
            trans.append([float(x) for x in parts[1:4]])
            rots.append([float(x) for x in parts[4:8]])
    try:
        return Trajectory(times, rots, trans)
    except ContractViolation as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    with Path(path).open("w") as fh:
        fh.write("# timestamp_ns tx ty tz qx qy qz qw\n")
        for t, q, p in zip(traj.times, traj.rotations, traj.translations):
            vals = " ".join(repr(float(v)) for v in (*p, *q))
            fh.write(f"{_s_to_ns(t)} {vals}\n")


def read_frame_meta(path: str | Path) -> list[FrameMeta]:
    """Read ``frame_id t0_ns readout_ns exposure_ns gain`` rows."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"frame metadata file not found: {path}")
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DatasetError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            out.append(FrameMeta(int(parts[0]), _ns_to_s(int(parts[1])), _ns_to_s(int(parts[2])),
                                 _ns_to_s(int(parts[3])), float(parts[4])))
    return out


def write_frame_meta(path: str | Path, metas: Iterable[FrameMeta]) -> None:
    with Path(path).open("w") as fh:
        fh.write("# frame_id t0_ns readout_ns exposure_ns gain\n")
        for m in metas:
            fh.write(f"{m.frame_id} {_s_to_ns(m.t0)} {_s_to_ns(m.readout)} "
                     f"{_s_to_ns(m.exposure)} {float(m.gain)!r}\n")
