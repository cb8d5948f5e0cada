"""Pinhole camera with OpenCV axis conventions (x right, y down, z forward).

Pixel (i, j) = (column, row) samples the ray through (i + 0.5, j + 0.5).
camera_to_world is a rigid 4x4; its rotation columns are the camera axes in
world coordinates and its last column the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import BadCameraMatrix

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray  # (4,4)
    z_near: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "camera_to_world",
                           np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4))
        if not (self.fx > 0 and self.fy > 0):
            raise BadCameraMatrix(f"focal lengths must be positive: fx={self.fx} fy={self.fy}")
        check_rotation(self.camera_to_world[:3, :3], tol=ORTHO_TOL)

    @property
    def rotation(self) -> np.ndarray:
        """World-from-camera rotation (columns = camera axes in world space)."""
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def world_to_camera(self) -> np.ndarray:
        r = self.rotation
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ self.center
        return out

    @property
    def view_dir(self) -> np.ndarray:
        """Optical axis (+z of the camera) in world space."""
        return self.rotation[:, 2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) to camera coordinates."""
        return (np.atleast_2d(points) - self.center) @ self.rotation

    def project(self, points: np.ndarray) -> np.ndarray:
        """World-space points (N,3) to pixel coordinates (N,2); caller guards z>0."""
        points_cam = self.to_camera(np.atleast_2d(points))
        z = points_cam[:, 2]
        return np.stack([self.fx * points_cam[:, 0] / z + self.cx,
                         self.fy * points_cam[:, 1] / z + self.cy], axis=1)

    def pixel_ray(self, px: float, py: float) -> tuple[np.ndarray, np.ndarray]:
        """World-space (origin, unit direction) through pixel center (px+0.5, py+0.5)."""
        d_cam = np.array([(px + 0.5 - self.cx) / self.fx,
                          (py + 0.5 - self.cy) / self.fy, 1.0])
        d = self.rotation @ d_cam
        return self.center.copy(), d / np.linalg.norm(d)

    def ray_grid(self) -> np.ndarray:
        """Unit world-space directions for every pixel, shape (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def resized(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy,
                       cx=self.cx * sx, cy=self.cy * sy, width=width, height=height)


def check_rotation(r: np.ndarray, tol: float) -> None:
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise BadCameraMatrix(f"rotation block departs from orthonormal by {err:.2e}")


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """camera_to_world for a camera at `eye` looking at `target`.

    +z points from eye to target; +y is the image-down direction, built so the
    world `up` maps to image-up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:
        raise BadCameraMatrix("look direction parallel to up vector")
    right = right / nrm
    down = np.cross(fwd, right)  # unit: fwd and right are orthonormal
    out = np.eye(4)
    out[:3, 0] = right
    out[:3, 1] = down
    out[:3, 2] = fwd
    out[:3, 3] = eye
    return out
