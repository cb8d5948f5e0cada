"""Dataset manifests: frame lists with cameras, times, images, and masks.

The on-disk layout is a ``transforms.json`` in the NeRF-synthetic family:
global intrinsics (fl_x, fl_y, cx, cy, w, h), and a ``frames`` array whose
entries carry ``file_path``, a 4x4 ``transform_matrix`` (camera-to-world),
an optional ``time`` in [0, 1], an optional ``mask_path``, and an optional
``split`` ("train" or "test", default "train").
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import ORTHO_TOL, Camera
from .core import Bounds
from .errors import (BadCameraMatrix, EmptyDataset, ManifestMissing,
                     MissingFile, ShapeMismatch)
from .fileio import read_png

MANIFEST_NAME = "transforms.json"
ROTATION_REPAIR_TOL = 1e-3  # manifests rounded to few decimals still load
MASK_THRESHOLD = 127.5 / 255.0  # 8-bit value > 127 counts as foreground


@dataclass
class Frame:
    image_path: Path
    mask_path: Path | None
    time: float
    camera: Camera
    split: str = "train"
    extras: dict = field(default_factory=dict)


@dataclass
class Dataset:
    root: Path
    frames: list[Frame]
    scene_bounds: Bounds
    mode: str  # "multiview" | "monocular"

    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split != "test"]

    def test_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "test"]

    def timestamps(self) -> list[float]:
        return sorted({f.time for f in self.frames})

    def has_masks(self) -> bool:
        return all(f.mask_path is not None for f in self.frames)

    def load_image(self, frame: Frame) -> np.ndarray:
        img = read_png(frame.image_path)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        if img.shape[2] > 3:
            img = img[:, :, :3]
        cam = frame.camera
        if img.shape[:2] != (cam.height, cam.width):
            raise ShapeMismatch(
                f"{frame.image_path}: image is {img.shape[1]}x{img.shape[0]}, "
                f"camera declares {cam.width}x{cam.height}")
        return img

    def load_mask(self, frame: Frame) -> np.ndarray | None:
        if frame.mask_path is None:
            return None
        raw = read_png(frame.mask_path)
        if raw.ndim == 3:
            raw = raw[:, :, 0]
        cam = frame.camera
        if raw.shape != (cam.height, cam.width):
            raise ShapeMismatch(
                f"{frame.mask_path}: mask is {raw.shape[1]}x{raw.shape[0]}, "
                f"camera declares {cam.width}x{cam.height}")
        return (raw > MASK_THRESHOLD).astype(np.float64)


def _repaired_rotation(matrix: np.ndarray) -> np.ndarray:
    """Snap a near-orthonormal rotation block to the closest rotation.

    Rejects blocks further than ROTATION_REPAIR_TOL from orthonormal, so
    manifests rounded to a few decimals load while genuinely malformed
    matrices are refused.
    """
    r = matrix[:3, :3]
    err = float(np.abs(r @ r.T - np.eye(3)).max())
    if err > ROTATION_REPAIR_TOL:
        raise BadCameraMatrix(
            f"rotation block departs from orthonormal by {err:.2e}")
    if err <= ORTHO_TOL:
        return matrix  # already clean: keep it bit-exact
    u, _, vt = np.linalg.svd(r)
    fixed = matrix.copy()
    fixed[:3, :3] = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    return fixed


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise MissingFile(str(path))
    return path


def load_dataset(root: str | Path) -> Dataset:
    """Parse root/transforms.json, validating files, cameras, and times."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestMissing(str(manifest_path))
    manifest = json.loads(manifest_path.read_text())

    required = ("fl_x", "fl_y", "cx", "cy", "w", "h")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise ManifestMissing(
            f"{manifest_path}: missing intrinsics {', '.join(missing)}")
    raw_frames = manifest.get("frames", [])
    if not raw_frames:
        raise EmptyDataset(f"{manifest_path} declares no frames")

    z_near = float(manifest.get("z_near", 0.01))
    n = len(raw_frames)
    frames: list[Frame] = []
    core_keys = {"file_path", "mask_path", "time", "split", "transform_matrix"}
    for index, entry in enumerate(raw_frames):
        matrix = np.asarray(entry["transform_matrix"], dtype=np.float64)
        if matrix.shape != (4, 4):
            raise BadCameraMatrix(
                f"frame {index}: transform_matrix has shape {matrix.shape}")
        camera = Camera(
            fx=float(manifest["fl_x"]), fy=float(manifest["fl_y"]),
            cx=float(manifest["cx"]), cy=float(manifest["cy"]),
            width=int(manifest["w"]), height=int(manifest["h"]),
            camera_to_world=_repaired_rotation(matrix), z_near=z_near)
        time = entry.get("time")
        if time is None:
            time = 0.0 if n == 1 else index / (n - 1)
        time = float(time)
        if not 0.0 <= time <= 1.0:
            raise ValueError(f"frame {index}: time {time} outside [0, 1]")
        image_path = _require_file(root / entry["file_path"])
        mask_path = entry.get("mask_path")
        if mask_path is not None:
            mask_path = _require_file(root / mask_path)
        frames.append(Frame(
            image_path=image_path, mask_path=mask_path, time=time,
            camera=camera, split=str(entry.get("split", "train")),
            extras={k: v for k, v in entry.items() if k not in core_keys}))

    if "scene_bounds" in manifest:
        bounds = Bounds.from_json(manifest["scene_bounds"])
    else:
        bounds = _bounds_from_cameras(frames)
    mode = str(manifest.get("mode", "multiview"))
    return Dataset(root=root, frames=frames, scene_bounds=bounds, mode=mode)


def _bounds_from_cameras(frames: list[Frame]) -> Bounds:
    """Fallback bounds: a cube around the camera centroid reaching every
    camera, which covers the mutually-observed region for inward-facing rigs."""
    centers = np.stack([f.camera.center for f in frames])
    centroid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers - centroid, axis=1).max())
    radius = max(radius, 1e-3)
    return Bounds(lo=centroid - radius, hi=centroid + radius)
