"""Photometric training of a Gaussian scene through the image-formation model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import CaptureDataset
from .errors import ConfigurationError, ContractViolation, NumericalError
from .formation import (
    FormationMode,
    FormedImage,
    MotionSamplePlan,
    form_image,
    form_image_backward,
    plan_motion_samples,
)
from .metrics import SsimReference, psnr, ssim, ssim_and_grad, ssim_reference
from .rasterizer import GradientBuffer
from .scene import GaussianScene

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "Adam",
    "split_holdout",
    "photometric_loss",
    "frame_plans",
    "evaluate",
    "train",
]


@dataclass
class TrainConfig:
    iterations: int = 30000
    rs_enable_iter: int = 7500
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_colors: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_radiance_scale: float = 1e-3
    ssim_weight: float = 0.2
    use_viba_trajectory: bool = True
    use_motion_sampling: bool = True
    use_scene_gamma: bool = True
    holdout_stride: int = 8
    eval_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.rs_enable_iter > self.iterations and self.iterations > 0:
            raise ConfigurationError("rs_enable_iter must not exceed iterations")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ConfigurationError("ssim_weight must lie in [0, 1]")
        if self.holdout_stride < 2:
            raise ConfigurationError("holdout_stride must be >= 2")

    def zero_learning_rates(self) -> "TrainConfig":
        d = asdict(self)
        for k in d:
            if k.startswith("lr_"):
                d[k] = 0.0
        return TrainConfig(**d)


@dataclass
class TrainReport:
    evals: list[dict] = field(default_factory=list)
    final_psnr: float = float("nan")
    final_ssim: float = float("nan")
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    gradient_frames: dict[int, int] = field(default_factory=dict)
    train_frames: list[int] = field(default_factory=list)
    eval_frames: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Everything except timing; stable across identical runs."""
        return {
            "final_psnr": self.final_psnr,
            "final_ssim": self.final_ssim,
            "evals": self.evals,
            "losses": self.losses,
            "train_frames": self.train_frames,
            "eval_frames": self.eval_frames,
            "config": self.config,
        }

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.json"
        path.write_text(json.dumps(self.metrics(), indent=1, sort_keys=True))
        (out_dir / "timing.json").write_text(json.dumps({"wall_time_s": self.wall_time}))
        with (out_dir / "evals.csv").open("w") as fh:
            fh.write("iteration,psnr,ssim\n")
            for e in self.evals:
                fh.write(f"{e['iteration']},{e['psnr']!r},{e['ssim']!r}\n")
        return path


class TrainingDiverged(NumericalError):
    """Raised when the loss turns non-finite; carries the last good scene."""

    def __init__(self, message: str, scene: GaussianScene, iteration: int):
        super().__init__(message)
        self.scene = scene
        self.iteration = iteration


def split_holdout(frames: Sequence, stride: int = 8) -> tuple[list, list]:
    """Every ``stride``-th frame (index 0, stride, 2*stride, ...) is held out."""
    if stride < 2:
        raise ContractViolation("stride must be >= 2")
    frames = list(frames)
    if len(frames) < stride:
        raise ContractViolation(f"need at least {stride} frames for a holdout split, got {len(frames)}")
    train = [f for i, f in enumerate(frames) if i % stride != 0]
    held = [f for i, f in enumerate(frames) if i % stride == 0]
    return train, held


def photometric_loss(rendered, captured, mask=None, ssim_weight: float = 0.2,
                     reference: SsimReference | None = None):
    """``(1 - w) * L1 + w * (1 - SSIM)`` over the mask, with its gradient w.r.t. ``rendered``.

    ``reference`` is an optional cache of the capture's SSIM statistics.
    """
    x = rendered.pixels if isinstance(rendered, FormedImage) else np.asarray(rendered, dtype=np.float64)
    y = np.asarray(captured, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"image shapes differ: {x.shape} vs {y.shape}")
    if mask is None:
        mask = rendered.valid if isinstance(rendered, FormedImage) else np.ones(x.shape[:2], bool)
    mask = np.asarray(mask, dtype=bool)
    m = mask[..., None] if x.ndim == 3 else mask
    count = float(np.count_nonzero(mask)) * (x.shape[2] if x.ndim == 3 else 1)
    if count == 0:
        raise ContractViolation("mask selects no pixels")
    diff = x - y
    l1 = float(np.sum(np.abs(diff) * m) / count)
    grad = (1.0 - ssim_weight) * np.sign(diff) * m / count
    loss = (1.0 - ssim_weight) * l1
    if ssim_weight > 0.0:
        s, ds = ssim_and_grad(x, y, mask, reference=reference)
        loss += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * ds
    return loss, grad


class Adam:
    """Adam with one step size per parameter group."""

    GROUPS = ("means", "quats", "log_scales", "opacity_logits", "colors", "log_radiance_scale")

    def __init__(self, scene: GaussianScene, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {g: np.zeros_like(self._param(scene, g)) for g in self.GROUPS}
        self.v = {g: np.zeros_like(self._param(scene, g)) for g in self.GROUPS}
        self.t = 0

    @staticmethod
    def _param(scene, group):
        if group == "log_radiance_scale":
            return np.array(math.log(scene.radiance_scale))
        return getattr(scene, group)

    def step(self, scene: GaussianScene, grads: GradientBuffer) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        garr = grads.arrays()
        garr["log_radiance_scale"] = np.array(grads.radiance_scale * scene.radiance_scale)
        for g in self.GROUPS:
            lr = self.lrs.get(g, 0.0)
            if lr == 0.0:
                continue
            grad = garr[g]
            self.m[g] = b1 * self.m[g] + (1 - b1) * grad
            self.v[g] = b2 * self.v[g] + (1 - b2) * grad * grad
            update = lr * (self.m[g] / c1) / (np.sqrt(self.v[g] / c2) + self.eps)
            if g == "log_radiance_scale":
                scene.radiance_scale = float(math.exp(math.log(scene.radiance_scale) - float(update)))
            else:
                getattr(scene, g)[...] -= update


def _mean_lr(cfg: TrainConfig, extent: float, it: int) -> float:
    if cfg.lr_means == 0.0:
        return 0.0
    if cfg.iterations <= 1:
        return cfg.lr_means * extent
    frac = min(max(it / (cfg.iterations - 1), 0.0), 1.0)
    return extent * math.exp((1 - frac) * math.log(cfg.lr_means) + frac * math.log(cfg.lr_means_final))


def frame_plans(dataset: CaptureDataset, traj, indices: Sequence[int]) -> dict[int, MotionSamplePlan]:
    """Motion-sample plan for each requested frame."""
    cfg = dataset.formation
    plans = {}
    for i in indices:
        anchors = dataset.sparse_depth[i]
        pix = anchors[:, :2] if anchors is not None and len(anchors) else None
        dep = anchors[:, 2] if pix is not None else None
        plans[i] = plan_motion_samples(traj, dataset.camera, dataset.metas[i], pix, dep,
                                       cfg.max_samples, cfg.threshold_px)
    return plans


def evaluate(scene: GaussianScene, dataset: CaptureDataset, traj, indices: Sequence[int],
             plans: dict[int, MotionSamplePlan], mode: FormationMode,
             references: Sequence[np.ndarray] | None = None) -> tuple[float, float, list[np.ndarray]]:
    """Mean PSNR / SSIM of formed images against captures (or ``references``)."""
    ps, ss, renders = [], [], []
    for j, i in enumerate(indices):
        img = form_image(scene, traj, dataset.camera, dataset.metas[i], dataset.maps, plans.get(i),
                         mode, dataset.formation)
        ref = dataset.images[i] if references is None else references[j]
        ps.append(psnr(img.pixels, ref, img.valid))
        ss.append(ssim(img.pixels, ref, img.valid))
        renders.append(img.pixels)
    return float(np.mean(ps)), float(np.mean(ss)), renders


def train(dataset: CaptureDataset, scene: GaussianScene, config: TrainConfig | None = None,
          out_dir: str | Path | None = None, eval_references: Sequence[np.ndarray] | None = None,
          progress: bool = False) -> tuple[GaussianScene, TrainReport]:
    """Fit ``scene`` to the training split of ``dataset``.

    Before ``rs_enable_iter`` every frame is formed from the single
    center-row pose; afterwards (when motion sampling is enabled) the full
    per-frame plan is used. Holdout frames are only ever rendered for
    evaluation. ``eval_references`` optionally replaces the holdout images
    as evaluation targets (e.g. clean renders for noisy captures).
    """
    cfg = config or TrainConfig()
    t_start = time.perf_counter()
    if not dataset.rectified:
        raise ConfigurationError("dataset must be preprocessed (rectified) before training")
    space = "gamma" if cfg.use_scene_gamma else "linear"
    scene = scene.with_color_space(space)
    scene.check_finite()
    traj = dataset.refined_trajectory() if cfg.use_viba_trajectory else dataset.trajectory
    indices = list(range(len(dataset)))
    train_idx, eval_idx = split_holdout(indices, cfg.holdout_stride)
    plans = frame_plans(dataset, traj, indices) if cfg.use_motion_sampling else {}
    rng = np.random.default_rng(cfg.seed)
    extent = scene.extent()
    adam = Adam(scene, {
        "means": 0.0, "quats": cfg.lr_quats, "log_scales": cfg.lr_scales,
        "opacity_logits": cfg.lr_opacity, "colors": cfg.lr_colors,
        "log_radiance_scale": cfg.lr_radiance_scale,
    })
    report = TrainReport(train_frames=train_idx, eval_frames=eval_idx,
                         config=asdict(cfg))
    out_dir = Path(out_dir) if out_dir is not None else None

    def current_mode(it: int) -> FormationMode:
        rs = cfg.use_motion_sampling and it >= cfg.rs_enable_iter
        return FormationMode(motion_sampling=rs, scene_gamma=cfg.use_scene_gamma)

    def run_eval(it: int) -> None:
        p, s, renders = evaluate(scene, dataset, traj, eval_idx, plans, current_mode(it), eval_references)
        report.evals.append({"iteration": it, "psnr": p, "ssim": s})
        log.info("iter %d holdout psnr %.3f ssim %.4f", it, p, s)
        if out_dir is not None:
            from .dataset import _save_rgb

            d = out_dir / "renders" / f"iter_{it:06d}"
            d.mkdir(parents=True, exist_ok=True)
            for i, img in zip(eval_idx, renders):
                _save_rgb(d / f"{dataset.metas[i].frame_id:06d}.png", img)

    last_good = scene.copy()
    ssim_refs: dict[int, SsimReference] = {}
    for it in range(cfg.iterations):
        if it % cfg.eval_every == 0:
            run_eval(it)
        i = int(train_idx[rng.integers(len(train_idx))])
        formed = form_image(scene, traj, dataset.camera, dataset.metas[i], dataset.maps, plans.get(i),
                            current_mode(it), dataset.formation, keep_context=True)
        if i not in ssim_refs:
            ssim_refs[i] = ssim_reference(dataset.images[i], formed.valid)
        loss, dpix = photometric_loss(formed, dataset.images[i], formed.valid, cfg.ssim_weight, ssim_refs[i])
        if not math.isfinite(loss):
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                last_good.save(out_dir / "last_good.scene")
            raise TrainingDiverged(f"non-finite loss at iteration {it}", last_good, it)
        grads = form_image_backward(formed, dpix)
        report.losses.append(loss)
        report.gradient_frames[i] = report.gradient_frames.get(i, 0) + 1
        adam.lrs["means"] = _mean_lr(cfg, extent, it)
        if it % 100 == 0:
            last_good = scene.copy()
        adam.step(scene, grads)
        if progress and it % 100 == 0:
            log.info("iter %d loss %.5f", it, loss)
    run_eval(cfg.iterations)
    report.final_psnr = report.evals[-1]["psnr"]
    report.final_ssim = report.evals[-1]["ssim"]
    report.wall_time = time.perf_counter() - t_start
    if out_dir is not None:
        report.write(out_dir)
        scene.save(out_dir / "scene.txt")
    return scene, report
