"""Gaussian scene representation with gamma-compressed color."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, DatasetError, NumericalError
from .geometry import quat_to_matrix

__all__ = [
    "GaussianScene",
    "InitConfig",
    "covariance",
    "compress_radiance",
    "decompress_radiance",
    "sigmoid",
    "logit",
    "init_from_points",
    "read_points",
]

DEFAULT_GAMMA = 2.2


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def compress_radiance(r, gamma: float = DEFAULT_GAMMA):
    """Linear radiance to gamma space, ``r ** (1 / gamma)``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0.0):
        raise ContractViolation("radiance must be non-negative")
    out = r ** (1.0 / gamma)
    return out if out.ndim else float(out)


def decompress_radiance(c, gamma: float = DEFAULT_GAMMA):
    """Gamma space back to linear radiance, ``c ** gamma``."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0.0):
        raise ContractViolation("gamma-space value must be non-negative")
    out = c ** gamma
    return out if out.ndim else float(out)


@dataclass
class GaussianScene:
    """Flat arrays of per-Gaussian parameters.

    ``quats`` are ``xyzw`` (normalized at use), ``log_scales`` are natural
    logs of the per-axis standard deviations, ``opacity_logits`` are
    pre-sigmoid opacities and ``colors`` are stored in gamma space (or in
    linear space when the scene is used without gamma compression).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    gamma: float = DEFAULT_GAMMA
    radiance_scale: float = 1.0
    color_space: str = "gamma"

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.array(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        if not self.gamma > 0:
            raise ContractViolation("gamma must be positive")
        if not self.radiance_scale > 0:
            raise ContractViolation("radiance scale must be positive")
        if self.color_space not in ("gamma", "linear"):
            raise ContractViolation(f"unknown color space {self.color_space!r}")

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, gamma: float = DEFAULT_GAMMA) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), gamma=gamma)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        rot = quat_to_matrix(self.quats)
        var = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", rot, var, rot)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.colors.copy(), self.gamma,
                             self.radiance_scale, self.color_space)

    def with_color_space(self, space: str) -> "GaussianScene":
        """Copy with colors re-expressed in ``"gamma"`` or ``"linear"`` radiance."""
        out = self.copy()
        if space == self.color_space:
            return out
        c = np.maximum(self.colors, 0.0)
        out.colors = decompress_radiance(c, self.gamma) if space == "linear" else compress_radiance(c, self.gamma)
        out.color_space = space
        return out

    def extent(self) -> float:
        """Radius of the mean cloud around its centroid (1.0 for tiny scenes)."""
        if len(self) < 2:
            return 1.0
        c = self.means.mean(axis=0)
        r = float(np.max(np.linalg.norm(self.means - c, axis=1)))
        return r if r > 0 else 1.0

    def check_finite(self) -> None:
        for name in ("means", "quats", "log_scales", "opacity_logits", "colors"):
            arr = getattr(self, name)
            arr = arr[:, None] if arr.ndim == 1 else arr
            bad = ~np.all(np.isfinite(arr), axis=1)
            if np.any(bad):
                idx = int(np.flatnonzero(bad)[0])
                raise NumericalError(f"Gaussian {idx} has non-finite {name}", index=idx)
        if not np.isfinite(self.radiance_scale):
            raise NumericalError("non-finite radiance scale")

    # -- checkpoint ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Plain-text checkpoint: header with gamma/scale, then one row per Gaussian."""
        path = Path(path)
        table = np.concatenate([self.means, self.quats, self.log_scales,
                                self.opacity_logits[:, None], self.colors], axis=1)
        header = (f"egosplat-scene v1\ngamma {self.gamma!r}\nradiance_scale {self.radiance_scale!r}\n"
                  f"color_space {self.color_space}\n"
                  f"count {len(self)}\nmx my mz qx qy qz qw ls0 ls1 ls2 alpha_pre c0 c1 c2")
        np.savetxt(path, table.reshape(-1, 14), fmt="%.17g", header=header)

    @classmethod
    def load(cls, path: str | Path) -> "GaussianScene":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"scene checkpoint not found: {path}")
        gamma, scale, space = DEFAULT_GAMMA, 1.0, "gamma"
        with path.open() as fh:
            first = fh.readline()
            if "egosplat-scene" not in first:
                raise DatasetError(f"{path} is not a scene checkpoint")
            for line in fh:
                if not line.startswith("#"):
                    break
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "gamma":
                    gamma = float(parts[1])
                elif len(parts) == 2 and parts[0] == "radiance_scale":
                    scale = float(parts[1])
                elif len(parts) == 2 and parts[0] == "color_space":
                    space = parts[1]
        table = np.loadtxt(path, ndmin=2).reshape(-1, 14)
        return cls(table[:, 0:3], table[:, 3:7], table[:, 7:10], table[:, 10], table[:, 11:14],
                   gamma=gamma, radiance_scale=scale, color_space=space)


def covariance(quat, log_scale) -> np.ndarray:
    """``R diag(exp(2 log_scale)) R^T`` for one Gaussian."""
    rot = quat_to_matrix(np.asarray(quat, dtype=np.float64))
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (rot * var) @ rot.T


@dataclass
class InitConfig:
    k_neighbors: int = 3
    default_scale: float = 0.01
    initial_opacity: float = 0.1
    gamma: float = DEFAULT_GAMMA
    use_gamma: bool = True
    min_scale: float = 1e-4


def init_from_points(points: np.ndarray, colors: np.ndarray, config: InitConfig | None = None
                     ) -> GaussianScene:
    """One isotropic Gaussian per point, sized by mean distance to its nearest neighbors."""
    cfg = config or InitConfig()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ContractViolation("cannot initialize a scene from zero points")
    if len(cols) != len(pts):
        raise ContractViolation("points and colors must have the same length")
    n = len(pts)
    k = min(cfg.k_neighbors, n - 1)
    if k == 0:
        dist = np.full(n, cfg.default_scale)
    else:
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        dist = d[:, 1:].reshape(n, k).mean(axis=1)
        dist = np.where(dist > 0, dist, cfg.default_scale)
    dist = np.maximum(dist, cfg.min_scale)
    log_scales = np.repeat(np.log(dist)[:, None], 3, axis=1)
    quats = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
    opac = np.full(n, logit(cfg.initial_opacity))
    stored = compress_radiance(cols, cfg.gamma) if cfg.use_gamma else cols.copy()
    return GaussianScene(pts.copy(), quats, log_scales, opac, stored, gamma=cfg.gamma,
                         color_space="gamma" if cfg.use_gamma else "linear")


def read_points(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``x y z r g b`` rows (linear colors in [0, 1])."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"point file not found: {path}")
    table = np.loadtxt(path, ndmin=2)
    if table.shape[1] != 6:
        raise DatasetError(f"{path}: expected 6 columns, got {table.shape[1]}")
    return table[:, :3], table[:, 3:]
