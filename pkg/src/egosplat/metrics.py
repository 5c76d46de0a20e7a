"""Image-quality metrics, reprojection statistics and report tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._kernels import blur2d, ssim_terms
from .errors import ContractViolation
from .geometry import Trajectory, reprojection_displacements

__all__ = [
    "PSNR_CAP",
    "psnr",
    "ssim",
    "ssim_and_grad",
    "ssim_reference",
    "SsimReference",
    "gaussian_window",
    "reproj_percentiles",
    "write_reproj_report",
    "ablation_table",
]

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _prep(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ContractViolation(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not np.any(mask):
        raise ContractViolation("mask selects no pixels")
    return a, b, mask


def psnr(a, b, mask=None) -> float:
    """Masked PSNR in dB for images in [0, 1], capped at :data:`PSNR_CAP`."""
    a, b, mask = _prep(a, b, mask)
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two spatial axes; self-adjoint for a symmetric window
    flat = np.ascontiguousarray(img, dtype=np.float64).reshape(img.shape[0], img.shape[1], -1)
    return blur2d(flat, np.asarray(win, dtype=np.float64)).reshape(img.shape)


@dataclass
class SsimReference:
    """Blurred statistics of a fixed SSIM target under a fixed mask.

    Training compares many renders against the same capture; computing
    these once per frame saves a third of the filtering work.
    """

    mask: np.ndarray
    y: np.ndarray
    my: np.ndarray
    eyy: np.ndarray


def ssim_reference(b, mask=None) -> SsimReference:
    b_arr = np.asarray(b, dtype=np.float64)
    _, b3, mask = _prep(b_arr, b_arr, mask)
    y = b3 * mask[..., None]
    my, eyy = np.moveaxis(_blur(np.stack([y, y * y], axis=-1), gaussian_window()), -1, 0)
    return SsimReference(mask, y, my, eyy)


def ssim_and_grad(a, b, mask=None, want_grad: bool = True, reference: SsimReference | None = None):
    """Masked mean SSIM of ``a`` against ``b`` and its gradient w.r.t. ``a``.

    Pixels outside ``mask`` are zeroed in both images before filtering so
    they cannot influence the result. ``reference`` optionally supplies
    precomputed statistics of ``b`` (see :func:`ssim_reference`).
    """
    a, b, mask = _prep(a, b, mask)
    squeeze = np.asarray(a).shape != a.shape
    m = mask[..., None].astype(np.float64)
    x = a * m
    win = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    if reference is not None:
        if reference.mask.shape != mask.shape or not np.array_equal(reference.mask, mask):
            raise ContractViolation("SSIM reference was computed under a different mask")
        y, my, eyy = reference.y, reference.my, reference.eyy
        mx, exx, exy = np.moveaxis(_blur(np.stack([x, x * x, x * y], axis=-1), win), -1, 0)
    else:
        y = b * m
        mx, my, exx, eyy, exy = np.moveaxis(_blur(np.stack([x, y, x * x, y * y, x * y], axis=-1), win), -1, 0)
    count = float(np.count_nonzero(mask)) * a.shape[2]
    total, seeds = ssim_terms(mx, my, exx, eyy, exy, mask, c1, c2, 1.0 / count, want_grad)
    value = total / count
    if not want_grad:
        return value, None
    b_mx, b_exx, b_exy = np.moveaxis(_blur(seeds, win), -1, 0)
    grad = (b_mx + 2.0 * x * b_exx + y * b_exy) * m
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def ssim(a, b, mask=None) -> float:
    """Masked mean SSIM (11x11 Gaussian window, sigma 1.5, k1=0.01, k2=0.03)."""
    return ssim_and_grad(a, b, mask, want_grad=False)[0]


# --------------------------------------------------------------------------
# Reprojection statistics
# --------------------------------------------------------------------------


@dataclass
class ReprojRow:
    frame_id: int
    time: float
    p25: float
    p50: float
    p75: float
    n_points: int


def reproj_percentiles(dataset, traj: Trajectory | None = None) -> tuple[list[ReprojRow], int]:
    """Per-frame 25/50/75th percentiles of readout-window anchor displacement.

    Returns the rows and the number of frames skipped for lack of depth.
    """
    traj = dataset.trajectory if traj is None else traj
    rows, skipped = [], 0
    for meta, anchors in zip(dataset.metas, dataset.sparse_depth):
        if anchors is None or len(anchors) == 0:
            skipped += 1
            continue
        disp, _ = reprojection_displacements(traj, dataset.camera, meta, anchors[:, :2], anchors[:, 2],
                                             (meta.t0, meta.t0 + meta.readout))
        if len(disp) == 0:
            skipped += 1
            continue
        p25, p50, p75 = np.percentile(disp, [25, 50, 75])
        rows.append(ReprojRow(meta.frame_id, meta.t0, float(p25), float(p50), float(p75), len(disp)))
    return rows, skipped


def write_reproj_report(rows: Sequence[ReprojRow], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``reproj_percentiles.csv`` and a static ``reproj_percentiles.png`` plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "reproj_percentiles.csv"
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "time_s", "p25_px", "p50_px", "p75_px", "n_points"])
        for r in rows:
            writer.writerow([r.frame_id, f"{r.time:.9f}", f"{r.p25:.6f}", f"{r.p50:.6f}",
                             f"{r.p75:.6f}", r.n_points])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3))
    t = [r.time for r in rows]
    ax.fill_between(t, [r.p25 for r in rows], [r.p75 for r in rows], alpha=0.3, label="25-75%")
    ax.plot(t, [r.p50 for r in rows], label="median")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("readout displacement [px]")
    ax.legend()
    fig.tight_layout()
    plot = out_dir / "reproj_percentiles.png"
    fig.savefig(plot, dpi=100)
    plt.close(fig)
    return table, plot


# --------------------------------------------------------------------------
# Ablation table
# --------------------------------------------------------------------------


def ablation_table(reports: Mapping[str, Mapping[str, Mapping[str, float]]],
                   csv_path: str | Path | None = None) -> str:
    """Render ``{config: {scene: {"psnr": .., "ssim": ..}}}`` as aligned text.

    The best value of each column is wrapped in ``**``. If ``csv_path`` is
    given the same table is written there as comma-separated values.
    """
    if not reports:
        raise ContractViolation("ablation table needs at least one report")
    configs = list(reports)
    scenes: list[str] = []
    for cfg in configs:
        for scene in reports[cfg]:
            if scene not in scenes:
                scenes.append(scene)
    columns = [(s, m) for s in scenes for m in ("psnr", "ssim")]
    best = {}
    for col in columns:
        vals = [reports[c].get(col[0], {}).get(col[1]) for c in configs]
        vals = [v for v in vals if v is not None]
        best[col] = max(vals) if vals else None
    header = ["config"] + [f"{s} {m.upper()}" for s, m in columns]
    body = []
    for c in configs:
        row = [c]
        for col in columns:
            v = reports[c].get(col[0], {}).get(col[1])
            if v is None:
                row.append("-")
                continue
            txt = f"{v:.2f}" if col[1] == "psnr" else f"{v:.4f}"
            row.append(f"**{txt}**" if v == best[col] else txt)
        body.append(row)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(r, widths)) for r in body]
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config"] + [f"{s}_{m}" for s, m in columns])
            for c in configs:
                writer.writerow([c] + [repr(reports[c].get(s, {}).get(m, "")) for s, m in columns])
    return "\n".join(lines)
