"""Analytic test scenes: ray-traced image/mask sequences with exact meshes.

Two presets: ``deforming_sphere`` (a textured sphere translating and scaling
sinusoidally, seen from a 12-camera ring) and ``occlusion_pair`` (a small
slab that starts fully hidden behind a larger one and slides out halfway
through the sequence, seen from a narrow frontal arc).

The tracer here is deliberately independent of the splatting renderer: it
intersects analytic spheres and boxes per pixel ray, so end-to-end training
tests have an external oracle for both images and geometry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .cameras import Camera, look_at
from .core import Bounds
from .fileio import structured_from_columns, write_ply, write_png

PRESETS = ("deforming_sphere", "occlusion_pair")
_RAY_EPS = 1e-6


# --------------------------------------------------------------------------
# Analytic objects
# --------------------------------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: Callable[[np.ndarray], np.ndarray]  # local unit coords -> colors

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = float(oc @ oc) - self.radius ** 2
        disc = b * b - c
        t = np.where(disc >= 0.0, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        return np.where(t > _RAY_EPS, t, np.inf)

    def colors(self, points):
        local = (points - self.center) / self.radius
        return self.albedo(local)

    def mesh(self, n_lat=48, n_lon=96):
        return uv_sphere_mesh(self.center, self.radius, n_lat, n_lon)


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    albedo: Callable[[np.ndarray], np.ndarray]  # local coords -> colors

    def intersect(self, origin, dirs):
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        near = np.nanmax(np.minimum(t1, t2), axis=-1)
        far = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (far >= near) & (far > _RAY_EPS)
        t = np.where(near > _RAY_EPS, near, far)  # enter, or exit if inside
        return np.where(hit, t, np.inf)

    def colors(self, points):
        return self.albedo(points - self.center)

    def mesh(self):
        return box_mesh(self.center, self.half)


def trace(camera: Camera, objects) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-trace a frame. Returns (color HxWx3, mask HxW, object_id HxW).

    object_id is the index of the first-hit object, -1 on background.
    """
    dirs = camera.ray_grid()
    origin = camera.center
    t_best = np.full(dirs.shape[:2], np.inf)
    obj_id = np.full(dirs.shape[:2], -1, dtype=np.int32)
    for k, obj in enumerate(objects):
        t = obj.intersect(origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        obj_id = np.where(closer, k, obj_id)
    color = np.zeros(dirs.shape[:2] + (3,))
    for k, obj in enumerate(objects):
        sel = obj_id == k
        if np.any(sel):
            points = origin + t_best[sel, None] * dirs[sel]
            color[sel] = np.clip(obj.colors(points), 0.0, 1.0)
    mask = (obj_id >= 0).astype(np.float64)
    return color, mask, obj_id


# --------------------------------------------------------------------------
# Exact meshes
# --------------------------------------------------------------------------

def uv_sphere_mesh(center, radius, n_lat=48, n_lon=96):
    """Latitude/longitude triangulation with pole fans. Returns (verts, faces)."""
    lats = np.pi * np.arange(1, n_lat) / n_lat
    lons = 2 * np.pi * np.arange(n_lon) / n_lon
    lat, lon = np.meshgrid(lats, lons, indexing="ij")
    ring = np.stack([np.sin(lat) * np.cos(lon), np.cos(lat),
                     np.sin(lat) * np.sin(lon)], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0.0, 1.0, 0.0]], ring, [[0.0, -1.0, 0.0]]])
    verts = np.asarray(center) + radius * verts

    top, bottom = 0, len(verts) - 1
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)
    faces = []
    for j in range(n_lon):
        faces.append([top, idx(0, j + 1), idx(0, j)])
        faces.append([bottom, idx(n_lat - 2, j), idx(n_lat - 2, j + 1)])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b = idx(i, j), idx(i, j + 1)
            c, d = idx(i + 1, j), idx(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    return verts, np.asarray(faces, dtype=np.int64)


def box_mesh(center, half):
    """Axis-aligned box as 8 vertices and 12 outward-facing triangles."""
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                      for z in (-1, 1)], dtype=np.float64)
    verts = np.asarray(center) + signs * np.asarray(half)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ], dtype=np.int64)
    return verts, faces


def save_mesh_ply(path, verts, faces):
    vertex = structured_from_columns(
        {"x": verts[:, 0], "y": verts[:, 1], "z": verts[:, 2]})
    write_ply(path, vertex, faces=np.asarray(faces, dtype=np.int64))


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

N_TIMESTAMPS = 16
IMAGE_SIZE = 96


def _sphere_state(t: float) -> tuple[np.ndarray, float]:
    center = np.array([0.25 * np.sin(2 * np.pi * t),
                       0.10 * np.sin(4 * np.pi * t), 0.0])
    radius = 0.45 * (1.0 + 0.18 * np.sin(2 * np.pi * t + np.pi / 3))
    return center, radius


def _sphere_albedo(local):
    return np.stack([0.55 + 0.35 * np.sin(3.1 * local[:, 0] + 0.3),
                     0.55 + 0.35 * np.sin(4.3 * local[:, 1] + 1.1),
                     0.55 + 0.35 * np.sin(5.7 * local[:, 2] + 2.0)], axis=-1)


def _deforming_sphere_objects(t: float):
    center, radius = _sphere_state(t)
    return [Sphere(center=center, radius=radius, albedo=_sphere_albedo)]


def _ring_cameras(n=12, radius=3.0, height=0.8, f=110.0, size=IMAGE_SIZE):
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = np.array([radius * np.cos(a), height, radius * np.sin(a)])
        pose = look_at(eye, np.zeros(3))
        cams.append(Camera(fx=f, fy=f, cx=size / 2, cy=size / 2,
                           width=size, height=size, camera_to_world=pose))
    return cams


def _rear_slab_offset(t: float) -> float:
    s = np.clip((t - 0.5) / 0.5, 0.0, 1.0)
    return 0.85 * (3 * s * s - 2 * s ** 3)  # smooth slide-out after t=0.5


def _front_albedo(local):
    return np.stack([0.70 + 0.25 * np.sin(6.0 * local[:, 0] + 1.0)
                     * np.sin(5.0 * local[:, 1] + 2.0),
                     0.35 + 0.20 * np.sin(4.0 * local[:, 0]),
                     0.30 + 0.10 * np.sin(3.0 * local[:, 1])], axis=-1)


def _rear_albedo(local):
    return np.stack([0.25 + 0.10 * np.sin(5.0 * local[:, 1]),
                     0.45 + 0.20 * np.sin(7.0 * local[:, 0] + 0.5),
                     0.75 + 0.20 * np.sin(6.0 * local[:, 0]
                                          + 4.0 * local[:, 1])], axis=-1)


def _occlusion_pair_objects(t: float):
    front = Box(center=np.array([0.0, 0.0, 0.2]),
                half=np.array([0.45, 0.45, 0.02]), albedo=_front_albedo)
    rear = Box(center=np.array([_rear_slab_offset(t), 0.0, -0.2]),
               half=np.array([0.25, 0.25, 0.02]), albedo=_rear_albedo)
    return [front, rear]


def _arc_cameras(n=8, radius=3.0, f=120.0, size=IMAGE_SIZE):
    cams = []
    azimuths = np.deg2rad(np.linspace(-15.0, 15.0, n))
    for k, a in enumerate(azimuths):
        elev = np.deg2rad(8.0 if k % 2 else -8.0)
        eye = radius * np.array([np.sin(a) * np.cos(elev), np.sin(elev),
                                 np.cos(a) * np.cos(elev)])
        pose = look_at(eye, np.zeros(3))
        cams.append(Camera(fx=f, fy=f, cx=size / 2, cy=size / 2,
                           width=size, height=size, camera_to_world=pose))
    return cams


_PRESET_TABLE = {
    "deforming_sphere": {
        "cameras": _ring_cameras,
        "objects": _deforming_sphere_objects,
        "test_cameras": (2, 8),
        "bounds": Bounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])),
        "hidden_object": None,
    },
    "occlusion_pair": {
        "cameras": _arc_cameras,
        "objects": _occlusion_pair_objects,
        "test_cameras": (),
        "bounds": Bounds(np.array([-0.9, -0.9, -0.6]), np.array([1.4, 0.9, 0.6])),
        "hidden_object": 1,  # rear slab: must be invisible for t < 0.5
    },
}


def generate_synthetic_scene(preset: str, out: str | Path, seed: int = 0) -> dict:
    """Write images, masks, exact meshes, and transforms.json; return the manifest.

    Output is a deterministic function of (preset, seed): rerunning produces
    byte-identical files.
    """
    if preset not in _PRESET_TABLE:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    spec = _PRESET_TABLE[preset]
    out = Path(out)
    for sub in ("images", "masks", "meshes"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    cameras = spec["cameras"]()
    times = [i / (N_TIMESTAMPS - 1) for i in range(N_TIMESTAMPS)]
    frames = []
    for ti, t in enumerate(times):
        objects = spec["objects"](t)
        for ci, camera in enumerate(cameras):
            color, mask, obj_id = trace(camera, objects)
            hidden = spec["hidden_object"]
            if hidden is not None and t < 0.5 and np.any(obj_id == hidden):
                raise AssertionError(
                    f"occluded object visible at t={t:.3f}, camera {ci}")
            index = ti * len(cameras) + ci
            image_rel = f"images/f_{index:04d}.png"
            mask_rel = f"masks/f_{index:04d}.png"
            write_png(out / image_rel, color)
            write_png(out / mask_rel, mask)
            frames.append({
                "file_path": image_rel,
                "mask_path": mask_rel,
                "time": t,
                "split": "test" if ci in spec["test_cameras"] else "train",
                "camera_index": ci,
                "time_index": ti,
                "transform_matrix": camera.camera_to_world.tolist(),
            })
        verts, mesh_faces = _ground_truth_mesh(spec["objects"](t))
        save_mesh_ply(out / "meshes" / f"t_{ti:02d}.ply", verts, mesh_faces)

    cam0 = cameras[0]
    manifest = {
        "preset": preset,
        "seed": int(seed),
        "mode": "multiview",
        "fl_x": cam0.fx, "fl_y": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
        "w": cam0.width, "h": cam0.height,
        "scene_bounds": spec["bounds"].to_json(),
        "frames": frames,
    }
    (out / "transforms.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _ground_truth_mesh(objects):
    all_verts, all_faces = [], []
    base = 0
    for obj in objects:
        verts, faces = obj.mesh()
        all_verts.append(verts)
        all_faces.append(np.asarray(faces) + base)
        base += len(verts)
    return np.concatenate(all_verts), np.concatenate(all_faces)
