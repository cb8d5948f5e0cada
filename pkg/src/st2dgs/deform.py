"""Space-time deformation of canonical surfels.

A multi-resolution grid of six feature planes — three spatial axis pairs and
three space-time pairs — is sampled at each surfel's canonical center and the
query time, fused, and pushed through a small MLP with per-quantity heads:
center offset, rotation offset, log-scale offset, and an opacity steering
scalar.  All heads are zero-initialized so a fresh field is the identity
deformation.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .core import Bounds, QUAT_NORM_EPS
from .errors import DegenerateQuaternion, ShapeMismatch, St2dgsError

# axis index pairs into (x, y, z, t)
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
OPACITY_MODES = ("none", "addition", "multiplication", "composition")
FIELD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    resolutions: tuple[int, ...] = (64, 128)
    n_features: int = 32
    fusion: str = "product"  # or "concat"
    hidden: int = 64
    separate_opacity_field: bool = False

    def __post_init__(self):
        if self.fusion not in ("product", "concat"):
            raise ValueError(f"unknown plane fusion {self.fusion!r}")
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))


@dataclass
class Deformation:
    """Per-surfel deltas at one query time (all torch tensors)."""
    d_center: torch.Tensor      # (N, 3)
    d_rotation: torch.Tensor    # (N, 4)
    d_log_scales: torch.Tensor  # (N, 2)
    theta: torch.Tensor         # (N,) opacity steering scalar


def bilinear_sample(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample a (F, R, R) feature plane at (N, 2) coordinates in [0, 1]^2.

    Grid nodes sit at uv * (R - 1); coordinates outside [0, 1] are clamped.
    Returns (N, F).  Differentiable in both the plane and the coordinates.
    """
    _, r0, r1 = plane.shape
    u = uv[:, 0].clamp(0.0, 1.0) * (r0 - 1)
    v = uv[:, 1].clamp(0.0, 1.0) * (r1 - 1)
    iu = u.floor().long().clamp_(0, r0 - 2)
    iv = v.floor().long().clamp_(0, r1 - 2)
    fu = (u - iu).unsqueeze(1)
    fv = (v - iv).unsqueeze(1)
    p00 = plane[:, iu, iv].transpose(0, 1)
    p10 = plane[:, iu + 1, iv].transpose(0, 1)
    p01 = plane[:, iu, iv + 1].transpose(0, 1)
    p11 = plane[:, iu + 1, iv + 1].transpose(0, 1)
    return (p00 * (1 - fu) * (1 - fv) + p10 * fu * (1 - fv)
            + p01 * (1 - fu) * fv + p11 * fu * fv)


class HexPlaneGrid(nn.Module):
    """Six feature planes per resolution, fused, decoded by an MLP with heads."""

    def __init__(self, scene_bounds: Bounds, time_range: tuple[float, float],
                 head_dims: dict[str, int], config: FieldConfig):
        super().__init__()
        self.config = config
        self.head_dims = dict(head_dims)
        planes = []
        for res in config.resolutions:
            for _ in PLANE_AXES:
                p = torch.empty(config.n_features, res, res, dtype=torch.float64)
                nn.init.uniform_(p, 0.1, 0.5)
                planes.append(nn.Parameter(p))
        self.planes = nn.ParameterList(planes)
        per_res = (config.n_features if config.fusion == "product"
                   else config.n_features * len(PLANE_AXES))
        self.trunk = nn.Linear(per_res * len(config.resolutions), config.hidden,
                               dtype=torch.float64)
        self.heads = nn.ModuleDict({
            name: nn.Linear(config.hidden, dim, dtype=torch.float64)
            for name, dim in self.head_dims.items()})
        for head in self.heads.values():
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        lo = np.concatenate([scene_bounds.lo, [time_range[0]]])
        hi = np.concatenate([scene_bounds.hi, [time_range[1]]])
        span = np.maximum(hi - lo, 1e-12)
        self.register_buffer("_lo", torch.from_numpy(lo))
        self.register_buffer("_span", torch.from_numpy(span))

    def normalized_coords(self, points: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3) points, got {tuple(points.shape)}")
        t = times.reshape(-1)
        if t.shape[0] == 1:
            t = t.expand(points.shape[0])
        q = torch.cat([points, t.unsqueeze(1)], dim=1)
        return ((q - self._lo) / self._span).clamp(0.0, 1.0)

    def features(self, points: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
        q = self.normalized_coords(points, times)
        per_res = []
        idx = 0
        for _ in self.config.resolutions:
            fused = None
            parts = []
            for a, b in PLANE_AXES:
                s = bilinear_sample(self.planes[idx], q[:, (a, b)])
                idx += 1
                if self.config.fusion == "product":
                    fused = s if fused is None else fused * s
                else:
                    parts.append(s)
            per_res.append(fused if self.config.fusion == "product"
                           else torch.cat(parts, dim=1))
        return torch.cat(per_res, dim=1)

    def forward(self, points: torch.Tensor, times: torch.Tensor) -> dict[str, torch.Tensor]:
        h = torch.relu(self.trunk(self.features(points, times)))
        return {name: head(h) for name, head in self.heads.items()}


class DeformationField(nn.Module):
    """Full space-time deformation: geometry deltas plus the opacity scalar.

    With ``separate_opacity_field`` the opacity scalar gets its own plane
    stack and MLP; otherwise it is one more head on the shared trunk.
    """

    def __init__(self, scene_bounds: Bounds, time_range: tuple[float, float],
                 config: FieldConfig | None = None):
        super().__init__()
        self.config = config or FieldConfig()
        self.scene_bounds = scene_bounds
        self.time_range = (float(time_range[0]), float(time_range[1]))
        geo_heads = {"d_center": 3, "d_rotation": 4, "d_log_scales": 2}
        if not self.config.separate_opacity_field:
            geo_heads["theta"] = 1
        self.geometry = HexPlaneGrid(scene_bounds, self.time_range, geo_heads, self.config)
        self.opacity = (HexPlaneGrid(scene_bounds, self.time_range, {"theta": 1}, self.config)
                        if self.config.separate_opacity_field else None)

    def forward(self, points: torch.Tensor, times: torch.Tensor) -> Deformation:
        out = self.geometry(points, times)
        if self.opacity is not None:
            theta = self.opacity(points, times)["theta"]
        else:
            theta = out["theta"]
        return Deformation(d_center=out["d_center"], d_rotation=out["d_rotation"],
                           d_log_scales=out["d_log_scales"], theta=theta.squeeze(1))


def apply_deformation(centers: torch.Tensor, rotations: torch.Tensor,
                      log_scales: torch.Tensor, delta: Deformation):
    """Deform raw surfel parameters; rotation output is left unnormalized.

    Raises DegenerateQuaternion if any deformed quaternion collapses to
    (near) zero length, where the surfel frame would be undefined.
    """
    q = rotations + delta.d_rotation
    norms = torch.linalg.vector_norm(q, dim=-1)
    if bool((norms < QUAT_NORM_EPS).any()):
        bad = int(torch.argmin(norms))
        raise DegenerateQuaternion(
            f"deformed quaternion {bad} has norm {float(norms[bad]):.3e}")
    return centers + delta.d_center, q, log_scales + delta.d_log_scales


def deformed_opacity(opacity_raw: torch.Tensor, theta: torch.Tensor,
                     mode: str) -> torch.Tensor:
    """Opacity in [0, 1] from the raw logit and the field's steering scalar.

    none:            sigmoid(o)
    addition:        sigmoid(o + theta)
    multiplication:  sigmoid(o) * sigmoid(theta)
    composition:     sigmoid(o * sigmoid(theta))
    """
    if mode == "none":
        return torch.sigmoid(opacity_raw)
    if mode == "addition":
        return torch.sigmoid(opacity_raw + theta)
    if mode == "multiplication":
        return torch.sigmoid(opacity_raw) * torch.sigmoid(theta)
    if mode == "composition":
        return torch.sigmoid(opacity_raw * torch.sigmoid(theta))
    raise ValueError(f"unknown opacity mode {mode!r}; expected one of {OPACITY_MODES}")


def save_field(path, deformation: DeformationField) -> None:
    """Write a versioned field checkpoint (npz container: metadata + tensors)."""
    meta = {
        "format_version": FIELD_FORMAT_VERSION,
        "scene_bounds": deformation.scene_bounds.to_json(),
        "time_range": list(deformation.time_range),
        "config": asdict(deformation.config),
    }
    arrays = {f"param:{k}": v.detach().cpu().numpy()
              for k, v in deformation.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_field(path) -> DeformationField:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise St2dgsError(f"not a deformation field checkpoint: {path}")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["format_version"] != FIELD_FORMAT_VERSION:
            raise St2dgsError(
                f"field checkpoint version {meta['format_version']} not supported")
        config = FieldConfig(**{**meta["config"],
                                "resolutions": tuple(meta["config"]["resolutions"])})
        out = DeformationField(Bounds.from_json(meta["scene_bounds"]),
                               tuple(meta["time_range"]), config)
        state = {k[len("param:"):]: torch.from_numpy(data[k])
                 for k in data.files if k.startswith("param:")}
        out.load_state_dict(state, strict=True)
    return out
