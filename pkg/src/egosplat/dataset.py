"""Directory-backed capture datasets and the rectification preprocessing step.

Layout::

    images/NNNNNN.png        8-bit RGB, response space
    meta.txt                 frame_id t0_ns readout_ns exposure_ns gain
    trajectory.txt           pose file as delivered (possibly degraded)
    trajectory_gt.txt        ground-truth / refined trajectory (optional)
    vignette.png             16-bit monochrome lens shading in [0, 1]
    index_ratio.png          8-bit, 0 = invalid, k -> (k - 1) / 254
    sparse_depth/NNNNNN.txt  u v depth_m rows
    points.txt               x y z r g b initialization cloud (optional)
    camera.json              camera description
    manifest.json            seeds, profiles, formation constants
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .formation import FormationConfig, PixelMaps
from .geometry import (
    CameraModel,
    FrameMeta,
    Pose,
    Trajectory,
    build_rectification,
    read_frame_meta,
    read_trajectory,
    write_frame_meta,
    write_trajectory,
)

__all__ = [
    "CaptureDataset",
    "encode_index_ratio",
    "decode_index_ratio",
    "load_dataset",
    "preprocess",
]

REQUIRED_FILES = ("meta.txt", "trajectory.txt", "camera.json", "manifest.json", "index_ratio.png",
                  "vignette.png")


def encode_index_ratio(ratio: np.ndarray) -> np.ndarray:
    """Float ratios (NaN = invalid) to the 8-bit interchange code."""
    ratio = np.asarray(ratio, dtype=np.float64)
    valid = np.isfinite(ratio)
    code = np.zeros(ratio.shape, dtype=np.uint8)
    code[valid] = np.clip(np.rint(ratio[valid] * 254.0) + 1, 1, 255).astype(np.uint8)
    return code


def decode_index_ratio(code: np.ndarray) -> np.ndarray:
    code = np.asarray(code)
    return np.where(code > 0, (code.astype(np.float64) - 1.0) / 254.0, np.nan)


def _save_rgb(path: Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _save_mono16(path: Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(img) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(data).save(path)


def _load_mono(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


@dataclass
class CaptureDataset:
    """Images plus everything needed to re-form them.

    ``camera`` is the camera the images are expressed in. For a raw
    (unrectified) capture ``rectified`` is False and ``maps`` describe the
    raw sensor; run :func:`preprocess` before training.
    """

    camera: CameraModel
    metas: list[FrameMeta]
    images: list[np.ndarray]
    trajectory: Trajectory
    maps: PixelMaps
    sparse_depth: list[np.ndarray]
    trajectory_gt: Trajectory | None = None
    formation: FormationConfig = field(default_factory=FormationConfig)
    manifest: dict = field(default_factory=dict)
    points: np.ndarray | None = None
    rectified: bool = True

    def __len__(self) -> int:
        return len(self.metas)

    def refined_trajectory(self) -> Trajectory:
        """The high-quality trajectory if one is shipped, else the delivered one."""
        return self.trajectory_gt if self.trajectory_gt is not None else self.trajectory

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "sparse_depth").mkdir(exist_ok=True)
        for meta, img in zip(self.metas, self.images):
            _save_rgb(root / "images" / f"{meta.frame_id:06d}.png", img)
        for meta, depth in zip(self.metas, self.sparse_depth):
            arr = np.zeros((0, 3)) if depth is None else np.asarray(depth).reshape(-1, 3)
            np.savetxt(root / "sparse_depth" / f"{meta.frame_id:06d}.txt", arr, fmt="%.9f",
                       header="u v depth_m")
        write_frame_meta(root / "meta.txt", self.metas)
        write_trajectory(root / "trajectory.txt", self.trajectory)
        if self.trajectory_gt is not None:
            write_trajectory(root / "trajectory_gt.txt", self.trajectory_gt)
        _save_mono16(root / "vignette.png", self.maps.vignette)
        Image.fromarray(encode_index_ratio(self.maps.index_ratio)).save(root / "index_ratio.png")
        if self.points is not None:
            np.savetxt(root / "points.txt", self.points, fmt="%.9f", header="x y z r g b")
        (root / "camera.json").write_text(json.dumps(self.camera.to_dict(), indent=2))
        manifest = dict(self.manifest)
        manifest.update({
            "format": "egosplat-capture",
            "version": 1,
            "frames": len(self.metas),
            "rectified": self.rectified,
            "flip_readout": self.maps.flip_readout,
            "formation": {
                "gamma": self.formation.gamma,
                "exposure_ref": self.formation.exposure_ref,
                "max_samples": self.formation.max_samples,
                "threshold_px": self.formation.threshold_px,
                "background": list(self.formation.background),
            },
        })
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return root


def load_dataset(root: str | Path) -> CaptureDataset:
    """Load and validate a dataset directory against its manifest."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    missing = [f for f in REQUIRED_FILES if not (root / f).exists()]
    if missing:
        raise DatasetError(f"{root}: missing required files: {', '.join(missing)}")
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != "egosplat-capture":
        raise DatasetError(f"{root}/manifest.json: not an egosplat capture manifest")
    camera = CameraModel.from_dict(json.loads((root / "camera.json").read_text()))
    metas = read_frame_meta(root / "meta.txt")
    if manifest.get("frames") != len(metas):
        raise DatasetError(
            f"{root}: manifest lists {manifest.get('frames')} frames but meta.txt has {len(metas)}; "
            "regenerate the dataset or fix the manifest")
    images, depths = [], []
    for meta in metas:
        path = root / "images" / f"{meta.frame_id:06d}.png"
        if not path.exists():
            raise DatasetError(f"missing image for frame {meta.frame_id}: {path}")
        img = _load_rgb(path)
        if img.shape[:2] != (camera.height, camera.width):
            raise DatasetError(f"{path}: size {img.shape[:2]} does not match camera.json")
        images.append(img)
        dpath = root / "sparse_depth" / f"{meta.frame_id:06d}.txt"
        depths.append(np.loadtxt(dpath, ndmin=2).reshape(-1, 3) if dpath.exists() else np.zeros((0, 3)))
    ratio = decode_index_ratio(np.asarray(Image.open(root / "index_ratio.png")))
    vignette = _load_mono(root / "vignette.png")
    maps = PixelMaps(ratio, vignette, np.isfinite(ratio), bool(manifest.get("flip_readout", False)))
    maps.check_camera(camera)
    traj = read_trajectory(root / "trajectory.txt")
    gt = read_trajectory(root / "trajectory_gt.txt") if (root / "trajectory_gt.txt").exists() else None
    f = manifest.get("formation", {})
    formation = FormationConfig(gamma=float(f.get("gamma", 2.2)),
                                exposure_ref=float(f.get("exposure_ref", 2e-3)),
                                max_samples=int(f.get("max_samples", 16)),
                                threshold_px=float(f.get("threshold_px", 1.0)),
                                background=tuple(f.get("background", (0.0, 0.0, 0.0))))
    points = np.loadtxt(root / "points.txt", ndmin=2) if (root / "points.txt").exists() else None
    for meta in metas:
        meta.check_within(traj)
    return CaptureDataset(camera, metas, images, traj, maps, depths, gt, formation, manifest, points,
                          bool(manifest.get("rectified", True)))


def preprocess(raw: CaptureDataset, target: CameraModel, src_from_dst: Pose | None = None
               ) -> CaptureDataset:
    """Rectify a raw capture into ``target``.

    Images, vignette and the index-ratio image are resampled through one
    remap table, and each frame's sparse depth anchors are re-projected
    into the rectified camera. With a rotation ``src_from_dst`` the
    trajectories are re-expressed for the rectified camera frame.
    """
    rect = build_rectification(raw.camera, target, src_from_dst)
    ratio_src = np.where(raw.maps.valid, raw.maps.index_ratio, 0.0)
    ratio = rect.apply(ratio_src)
    coverage = rect.apply(raw.maps.valid.astype(np.float64))
    valid = rect.valid & (coverage > 1.0 - 1e-9)
    ratio = np.where(valid, np.clip(ratio, 0.0, 1.0), np.nan)
    vignette = rect.apply(raw.maps.vignette)
    maps = PixelMaps(ratio, vignette, valid, raw.maps.flip_readout)
    images = [np.where(valid[..., None], rect.apply(img), 0.0) for img in raw.images]
    dst_from_src = (src_from_dst.inverse().matrix if src_from_dst is not None else np.eye(3))
    depths = []
    for anchors in raw.sparse_depth:
        if anchors is None or len(anchors) == 0:
            depths.append(np.zeros((0, 3)))
            continue
        pts = raw.camera.unproject(anchors[:, :2], anchors[:, 2]) @ dst_from_src.T
        uv, front = target.project(pts)
        keep = front & target.in_bounds(uv)
        ij = np.clip(np.rint(uv[keep]).astype(int), 0, [target.width - 1, target.height - 1])
        keep_idx = np.flatnonzero(keep)[valid[ij[:, 1], ij[:, 0]]]
        depths.append(np.column_stack([uv[keep_idx], pts[keep_idx, 2]]))
    manifest = dict(raw.manifest)
    manifest["preprocessed_from"] = raw.camera.to_dict()
    traj, gt = raw.trajectory, raw.trajectory_gt
    if src_from_dst is not None:
        traj = traj.with_body_offset(src_from_dst)
        gt = gt.with_body_offset(src_from_dst) if gt is not None else None
    return replace(raw, camera=target, images=images, maps=maps, sparse_depth=depths,
                   trajectory=traj, trajectory_gt=gt, manifest=manifest, rectified=True)
