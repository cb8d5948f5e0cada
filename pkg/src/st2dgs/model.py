"""Torch parameter containers for the canonical surfels and the scene.

SplatModel owns the raw per-surfel parameters (with the batched activation
helpers) plus the densification machinery: gradient statistics, clone/split,
pruning, and the matching optimizer-state surgery so Adam moments follow
rows as they are added and removed.  SceneModel pairs the surfels with a
deformation field and produces activated views for the rasterizer.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .cameras import Camera
from .core import (Bounds, GaussianSet, QUAT_NORM_EPS, SH_C0, SH_C1, SH_C2,
                   SH_C3)
from .deform import DeformationField, apply_deformation, deformed_opacity
from .errors import DegenerateQuaternion, NonFiniteParameter, ShapeMismatch
from .raster import RenderOutput, RenderSettings, SurfelView, render

PARAM_NAMES = ("centers", "rotations", "log_scales", "opacity_raw",
               "sh_dc", "sh_rest")


def quat_frames(rotations: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched (N, 4) wxyz quaternions -> unit tangent frames (N, 3) x 2."""
    norms = torch.linalg.vector_norm(rotations, dim=-1, keepdim=True)
    if bool((norms < QUAT_NORM_EPS).any()):
        raise DegenerateQuaternion("quaternion with (near) zero norm")
    q = rotations / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    tan_u = torch.stack([1 - 2 * (y * y + z * z),
                         2 * (x * y + w * z),
                         2 * (x * z - w * y)], dim=-1)
    tan_v = torch.stack([2 * (x * y - w * z),
                         1 - 2 * (x * x + z * z),
                         2 * (y * z + w * x)], dim=-1)
    return tan_u, tan_v


def sh_colors(coeffs: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Batched spherical-harmonics color: clamp(eval + 0.5, 0, 1).

    coeffs (N, K, 3) with K in {1, 4, 9, 16}; dirs (N, 3) unit.
    """
    k = coeffs.shape[1]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = [torch.full_like(x, SH_C0)]
    if k > 1:
        basis += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if k > 4:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis += [SH_C2[0] * xy, SH_C2[1] * yz,
                  SH_C2[2] * (2 * zz - xx - yy),
                  SH_C2[3] * xz, SH_C2[4] * (xx - yy)]
    if k > 9:
        basis += [SH_C3[0] * y * (3 * xx - yy),
                  SH_C3[1] * xy * z,
                  SH_C3[2] * y * (4 * zz - xx - yy),
                  SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                  SH_C3[4] * x * (4 * zz - xx - yy),
                  SH_C3[5] * z * (xx - yy),
                  SH_C3[6] * x * (xx - 3 * yy)]
    b = torch.stack(basis, dim=1)
    return torch.clamp(torch.einsum("nk,nkc->nc", b, coeffs) + 0.5, 0.0, 1.0)


class SplatModel(nn.Module):
    def __init__(self, centers, rotations, log_scales, opacity_raw, sh_dc,
                 sh_rest):
        super().__init__()
        as_param = lambda t: nn.Parameter(torch.as_tensor(t, dtype=torch.float64))
        self.centers = as_param(centers)
        self.rotations = as_param(rotations)
        self.log_scales = as_param(log_scales)
        self.opacity_raw = as_param(opacity_raw)
        self.sh_dc = as_param(sh_dc)
        self.sh_rest = as_param(sh_rest)
        n = self.centers.shape[0]
        for name in PARAM_NAMES:
            if getattr(self, name).shape[0] != n:
                raise ShapeMismatch(f"{name} row count != {n}")
        self.register_buffer("grad_screen_accum", torch.zeros(n, dtype=torch.float64))
        self.register_buffer("grad_world_accum", torch.zeros(n, 3, dtype=torch.float64))
        self.register_buffer("grad_count", torch.zeros(n, dtype=torch.float64))

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2, 16: 3}[1 + self.sh_rest.shape[1]]

    @property
    def colors(self) -> torch.Tensor:
        return torch.cat([self.sh_dc, self.sh_rest], dim=1)

    @staticmethod
    def from_gaussian_set(gs: GaussianSet) -> "SplatModel":
        return SplatModel(gs.centers, gs.rotations, gs.log_scales,
                          gs.opacity_raw, gs.colors[:, :1], gs.colors[:, 1:])

    def to_gaussian_set(self, scene_bounds: Bounds,
                        time_range: tuple[float, float]) -> GaussianSet:
        t = lambda p: p.detach().cpu().numpy().copy()
        return GaussianSet(centers=t(self.centers), rotations=t(self.rotations),
                           log_scales=t(self.log_scales),
                           opacity_raw=t(self.opacity_raw),
                           colors=t(self.colors), scene_bounds=scene_bounds,
                           time_range=time_range)

    def check_finite(self) -> None:
        for name in PARAM_NAMES:
            if not bool(torch.isfinite(getattr(self, name)).all()):
                raise NonFiniteParameter(f"parameter {name!r} contains non-finite values")

    # ------------------------------------------------------------------
    # densification statistics and policy
    # ------------------------------------------------------------------

    def add_densification_stats(self, screen_norm: torch.Tensor,
                                world_grad: torch.Tensor,
                                visible: torch.Tensor) -> None:
        self.grad_screen_accum[visible] += screen_norm[visible]
        self.grad_world_accum[visible] += world_grad[visible]
        self.grad_count[visible] += 1.0

    def reset_densification_stats(self) -> None:
        self.grad_screen_accum.zero_()
        self.grad_world_accum.zero_()
        self.grad_count.zero_()

    def _param_dict(self) -> dict[str, nn.Parameter]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def _replace_params(self, optimizer, new_tensors: dict[str, torch.Tensor],
                        moment_map) -> None:
        """Swap every parameter for a new row set, rewriting Adam state.

        moment_map(old_state_tensor, shape) -> new state tensor; it decides
        which rows keep their moments and which start at zero.
        """
        old = self._param_dict()
        for group in optimizer.param_groups:
            name = group["name"]
            if name not in new_tensors:
                continue
            old_param = old[name]
            new_param = nn.Parameter(new_tensors[name])
            state = optimizer.state.pop(old_param, None)
            if state is not None:
                state["exp_avg"] = moment_map(state["exp_avg"], new_param.shape)
                state["exp_avg_sq"] = moment_map(state["exp_avg_sq"], new_param.shape)
                optimizer.state[new_param] = state
            group["params"] = [new_param]
            setattr(self, name, new_param)

    def prune_points(self, optimizer, keep: torch.Tensor) -> None:
        new_tensors = {n: p[keep].detach().clone()
                       for n, p in self._param_dict().items()}
        self._replace_params(optimizer, new_tensors,
                             lambda s, shape: s[keep].clone())
        self.grad_screen_accum = self.grad_screen_accum[keep].clone()
        self.grad_world_accum = self.grad_world_accum[keep].clone()
        self.grad_count = self.grad_count[keep].clone()

    def add_points(self, optimizer, extensions: dict[str, torch.Tensor]) -> None:
        def cat_with_zeros(state, shape):
            n_new = shape[0] - state.shape[0]
            pad = torch.zeros((n_new, *state.shape[1:]), dtype=state.dtype)
            return torch.cat([state, pad], dim=0)

        new_tensors = {n: torch.cat([p.detach(), extensions[n]], dim=0)
                       for n, p in self._param_dict().items()}
        self._replace_params(optimizer, new_tensors, cat_with_zeros)
        n_new = len(self) - self.grad_count.shape[0]
        self.grad_screen_accum = torch.cat(
            [self.grad_screen_accum, torch.zeros(n_new, dtype=torch.float64)])
        self.grad_world_accum = torch.cat(
            [self.grad_world_accum, torch.zeros(n_new, 3, dtype=torch.float64)])
        self.grad_count = torch.cat(
            [self.grad_count, torch.zeros(n_new, dtype=torch.float64)])

    def densify_and_clone(self, optimizer, mask: torch.Tensor) -> int:
        """Duplicate small, under-reconstructed surfels, nudged down-gradient."""
        n = int(mask.sum())
        if n == 0:
            return 0
        with torch.no_grad():
            grad = self.grad_world_accum[mask] / self.grad_count[mask].clamp_min(1.0).unsqueeze(1)
            norm = torch.linalg.vector_norm(grad, dim=1, keepdim=True)
            direction = torch.where(norm > 1e-12, grad / norm.clamp_min(1e-12),
                                    torch.zeros_like(grad))
            mean_scale = torch.exp(self.log_scales[mask]).mean(dim=1, keepdim=True)
            offset = -direction * 0.5 * mean_scale
            ext = {name: p[mask].detach().clone()
                   for name, p in self._param_dict().items()}
            ext["centers"] = ext["centers"] + offset
        self.add_points(optimizer, ext)
        return n

    def densify_and_split(self, optimizer, mask: torch.Tensor,
                          rng: np.random.Generator, n_children: int = 2,
                          scale_shrink: float = 1.6) -> int:
        """Replace large surfels by children sampled in their tangent plane."""
        n = int(mask.sum())
        if n == 0:
            return 0
        with torch.no_grad():
            tan_u, tan_v = quat_frames(self.rotations[mask])
            scales = torch.exp(self.log_scales[mask])
            reps = {name: p[mask].detach().clone().repeat_interleave(n_children, dim=0)
                    for name, p in self._param_dict().items()}
            uv = torch.from_numpy(rng.standard_normal((n * n_children, 2)))
            su = scales[:, 0].repeat_interleave(n_children)
            sv = scales[:, 1].repeat_interleave(n_children)
            offset = (uv[:, :1] * su.unsqueeze(1) * tan_u.repeat_interleave(n_children, dim=0)
                      + uv[:, 1:] * sv.unsqueeze(1) * tan_v.repeat_interleave(n_children, dim=0))
            reps["centers"] = reps["centers"] + offset
            reps["log_scales"] = reps["log_scales"] - float(np.log(scale_shrink))
        self.add_points(optimizer, reps)
        keep = torch.cat([~mask, torch.ones(n * n_children, dtype=torch.bool)])
        self.prune_points(optimizer, keep)
        return n


class SceneModel(nn.Module):
    """Canonical surfels + optional deformation field + render glue."""

    def __init__(self, splats: SplatModel, field: DeformationField | None,
                 opacity_mode: str = "none"):
        super().__init__()
        self.splats = splats
        self.field = field
        self.opacity_mode = opacity_mode

    def surfel_view(self, camera: Camera, time: float | None = None,
                    deform: bool = True) -> SurfelView:
        self.splats.check_finite()
        sp = self.splats
        centers, rotations, log_scales = sp.centers, sp.rotations, sp.log_scales
        if self.field is not None and deform and time is not None:
            t = torch.tensor([float(time)], dtype=torch.float64)
            delta = self.field(centers, t)
            centers, rotations, log_scales = apply_deformation(
                centers, rotations, log_scales, delta)
            opacities = deformed_opacity(sp.opacity_raw, delta.theta,
                                         self.opacity_mode)
        else:
            opacities = torch.sigmoid(sp.opacity_raw)
        tan_u, tan_v = quat_frames(rotations)
        cam_center = torch.from_numpy(camera.center)
        dirs = centers - cam_center
        dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
        colors = sh_colors(sp.colors, dirs)
        return SurfelView(centers=centers, tangent_u=tan_u, tangent_v=tan_v,
                          scales=torch.exp(log_scales), opacities=opacities,
                          colors=colors)

    def render(self, camera: Camera, time: float | None = None,
               settings: RenderSettings | None = None,
               deform: bool = True) -> RenderOutput:
        return render(camera, self.surfel_view(camera, time, deform), settings)
