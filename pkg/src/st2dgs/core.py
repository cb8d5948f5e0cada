"""2D Gaussian surfel data model: raw parameters, activation, and alpha evaluation.

A surfel is a flat elliptical disk with a center, an orthonormal tangent frame
(t_u, t_v, n), two scales, an opacity, and spherical-harmonic color. Raw
parameters live in unconstrained space (log scales, opacity logit, raw
quaternion); activation maps them to their geometric form. Everything here is
a pure function over small value records; the batched torch equivalents used
for training live in `model.py` and are cross-checked against these.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateQuaternion, NonFiniteParameter, St2dgsError
from .fileio import read_ply, write_ply

# Real SH basis constants (splatting lineage convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

GRAZING_EPS = 1e-6  # |n . dir| below this is treated as a miss
QUAT_NORM_EPS = 1e-8


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned box in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if not np.all(self.hi >= self.lo):
            raise St2dgsError(f"degenerate bounds: {self.lo} .. {self.hi}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def extent(self) -> float:
        """Largest side length."""
        return float(np.max(self.size))

    @property
    def diameter(self) -> float:
        """Diagonal length."""
        return float(np.linalg.norm(self.size))

    def expanded(self, factor: float) -> "Bounds":
        half = 0.5 * self.size * factor
        return Bounds(self.center - half, self.center + half)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "Bounds":
        return Bounds(np.array(obj["min"], dtype=np.float64),
                      np.array(obj["max"], dtype=np.float64))


@dataclass(frozen=True)
class Splat2D:
    """Raw canonical surfel parameters.

    color holds SH coefficients of shape (K, 3) with K = (degree+1)^2,
    degree 0..3; coefficient 0 is the DC term.
    """

    center: np.ndarray       # (3,)
    rotation: np.ndarray     # (4,) raw quaternion, wxyz
    log_scales: np.ndarray   # (2,) log of (s_u, s_v)
    opacity_raw: float       # logit
    color: np.ndarray        # (K, 3) SH coefficients

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "log_scales", np.asarray(self.log_scales, dtype=np.float64))
        object.__setattr__(self, "color", np.atleast_2d(np.asarray(self.color, dtype=np.float64)))
        if self.color.shape[0] not in (1, 4, 9, 16) or self.color.shape[1] != 3:
            raise St2dgsError(f"SH color must be (K,3), K in {{1,4,9,16}}; got {self.color.shape}")


@dataclass(frozen=True)
class ActivatedSplat:
    """World-space surfel after activation: orthonormal frame, positive scales,
    opacity in (0,1), and the view-evaluated RGB color."""

    center: np.ndarray    # (3,)
    tangent_u: np.ndarray  # (3,) unit
    tangent_v: np.ndarray  # (3,) unit
    normal: np.ndarray     # (3,) unit, = t_u x t_v
    scales: np.ndarray     # (2,) positive
    opacity: float         # in (0,1); deformed opacity may reach the open interval ends
    view_color: np.ndarray  # (3,) RGB in [0,1]


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Normalized wxyz quaternion to a 3x3 rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < QUAT_NORM_EPS:
        raise DegenerateQuaternion(f"quaternion norm {norm} below {QUAT_NORM_EPS}")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Evaluate real SH (degree inferred from coefficient count) along a unit direction.

    Returns the raw RGB value, before the +0.5 offset and clamping.
    """
    coeffs = np.atleast_2d(coeffs)
    k = coeffs.shape[0]
    result = SH_C0 * coeffs[0]
    if k == 1:
        return result
    x, y, z = np.asarray(direction, dtype=np.float64)
    result = result - SH_C1 * y * coeffs[1] + SH_C1 * z * coeffs[2] - SH_C1 * x * coeffs[3]
    if k == 4:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (result
              + SH_C2[0] * xy * coeffs[4]
              + SH_C2[1] * yz * coeffs[5]
              + SH_C2[2] * (2 * zz - xx - yy) * coeffs[6]
              + SH_C2[3] * xz * coeffs[7]
              + SH_C2[4] * (xx - yy) * coeffs[8])
    if k == 9:
        return result
    result = (result
              + SH_C3[0] * y * (3 * xx - yy) * coeffs[9]
              + SH_C3[1] * xy * z * coeffs[10]
              + SH_C3[2] * y * (4 * zz - xx - yy) * coeffs[11]
              + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeffs[12]
              + SH_C3[4] * x * (4 * zz - xx - yy) * coeffs[13]
              + SH_C3[5] * z * (xx - yy) * coeffs[14]
              + SH_C3[6] * x * (xx - 3 * yy) * coeffs[15])
    return result


def activate(splat: Splat2D, view_dir: np.ndarray) -> ActivatedSplat:
    """Map raw parameters to the world-space surfel.

    Rotation comes from the normalized quaternion (t_u, t_v = first two
    columns, n = third), scales from exp, opacity from sigmoid, and color from
    SH evaluated along view_dir with the conventional +0.5 offset, clamped.
    """
    for value in (splat.center, splat.rotation, splat.log_scales,
                  splat.opacity_raw, splat.color):
        if not np.all(np.isfinite(value)):
            raise NonFiniteParameter(f"non-finite splat parameter: {value}")
    rot = quat_to_rotation(splat.rotation)
    scales = np.exp(splat.log_scales)
    opacity = float(sigmoid(splat.opacity_raw))
    rgb = np.clip(eval_sh(splat.color, view_dir) + 0.5, 0.0, 1.0)
    return ActivatedSplat(
        center=splat.center.copy(),
        tangent_u=rot[:, 0].copy(),
        tangent_v=rot[:, 1].copy(),
        normal=rot[:, 2].copy(),
        scales=scales,
        opacity=opacity,
        view_color=rgb,
    )


def intersect_alpha(splat: ActivatedSplat, origin: np.ndarray, direction: np.ndarray,
                    z_near: float = 0.01):
    """Ray-splat intersection in object space.

    Returns (u, v, z, alpha) for the intersection x = origin + z * direction
    with u, v the scale-normalized tangent coordinates, or None on a grazing
    ray (|n . dir| < 1e-6) or an intersection at z <= z_near.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    denom = float(np.dot(splat.normal, direction))
    if abs(denom) < GRAZING_EPS:
        return None
    z = float(np.dot(splat.normal, splat.center - origin)) / denom
    if z <= z_near:
        return None
    x = origin + z * direction
    d = x - splat.center
    u = float(np.dot(d, splat.tangent_u)) / splat.scales[0]
    v = float(np.dot(d, splat.tangent_v)) / splat.scales[1]
    alpha = splat.opacity * np.exp(-0.5 * (u * u + v * v))
    return u, v, z, float(alpha)


class GaussianSet:
    """A canonical splat collection stored as arrays, plus scene metadata.

    Field layout: centers (N,3), rotations (N,4), log_scales (N,2),
    opacity_raw (N,), colors (N,K,3). Individual splats are materialized on
    demand as Splat2D records.
    """

    def __init__(self, centers, rotations, log_scales, opacity_raw, colors,
                 scene_bounds: Bounds, time_range: tuple[float, float] = (0.0, 1.0)):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 2)
        self.opacity_raw = np.asarray(opacity_raw, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(colors, dtype=np.float64)
        if self.colors.ndim != 3 or self.colors.shape[2] != 3:
            raise St2dgsError(f"colors must be (N,K,3), got {self.colors.shape}")
        n = len(self.centers)
        if not (len(self.rotations) == len(self.log_scales) == len(self.opacity_raw)
                == len(self.colors) == n):
            raise St2dgsError("inconsistent splat array lengths")
        self.scene_bounds = scene_bounds
        self.time_range = (float(time_range[0]), float(time_range[1]))

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def sh_degree(self) -> int:
        return int(round(self.colors.shape[1] ** 0.5)) - 1

    def splat(self, i: int) -> Splat2D:
        return Splat2D(self.centers[i], self.rotations[i], self.log_scales[i],
                       float(self.opacity_raw[i]), self.colors[i])

    def __iter__(self):
        return (self.splat(i) for i in range(len(self)))

    @staticmethod
    def from_splats(splats, scene_bounds: Bounds,
                    time_range: tuple[float, float] = (0.0, 1.0)) -> "GaussianSet":
        return GaussianSet(
            np.stack([s.center for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.log_scales for s in splats]),
            np.array([s.opacity_raw for s in splats]),
            np.stack([s.color for s in splats]),
            scene_bounds, time_range)

    def save(self, path) -> None:
        """Write the splats as PLY plus a JSON sidecar for bounds and time range.

        PLY vertex properties: x,y,z, quat_w..quat_z, log_s_u, log_s_v,
        opacity_raw, f_dc_0..2, and coefficient-major f_rest_0.. for degree>0.
        """
        path = Path(path)
        cols = {
            "x": self.centers[:, 0], "y": self.centers[:, 1], "z": self.centers[:, 2],
            "quat_w": self.rotations[:, 0], "quat_x": self.rotations[:, 1],
            "quat_y": self.rotations[:, 2], "quat_z": self.rotations[:, 3],
            "log_s_u": self.log_scales[:, 0], "log_s_v": self.log_scales[:, 1],
            "opacity_raw": self.opacity_raw,
        }
        for c in range(3):
            cols[f"f_dc_{c}"] = self.colors[:, 0, c]
        rest = self.colors[:, 1:, :].reshape(len(self), -1)
        for j in range(rest.shape[1]):
            cols[f"f_rest_{j}"] = rest[:, j]
        dt = [(name, "<f4") for name in cols]
        vertex = np.empty(len(self), dtype=dt)
        for name, col in cols.items():
            vertex[name] = col.astype(np.float32)
        write_ply(path, vertex)
        sidecar = {"scene_bounds": self.scene_bounds.to_json(),
                   "time_range": list(self.time_range),
                   "sh_degree": self.sh_degree}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @staticmethod
    def load(path) -> "GaussianSet":
        path = Path(path)
        vertex, _ = read_ply(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        n = len(vertex)
        names = vertex.dtype.names
        n_rest = sum(1 for name in names if name.startswith("f_rest_"))
        k = 1 + n_rest // 3
        colors = np.zeros((n, k, 3), dtype=np.float64)
        for c in range(3):
            colors[:, 0, c] = vertex[f"f_dc_{c}"]
        if n_rest:
            rest = np.stack([vertex[f"f_rest_{j}"] for j in range(n_rest)], axis=1)
            colors[:, 1:, :] = rest.reshape(n, k - 1, 3)
        return GaussianSet(
            np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1),
            np.stack([vertex[f"quat_{c}"] for c in "wxyz"], axis=1),
            np.stack([vertex["log_s_u"], vertex["log_s_v"]], axis=1),
            np.asarray(vertex["opacity_raw"], dtype=np.float64),
            colors,
            Bounds.from_json(meta["scene_bounds"]),
            tuple(meta["time_range"]))
