"""Differentiable rendering: torch autograd bridge over the numba kernels.

The kernel's differentiable outputs are per-fragment (weight, depth, normal)
tensors in CSR pixel order; every map — color, alpha, expected depth, normal —
is assembled from those fragments with index_add right here in torch, so map
gradients fold into per-fragment adjoints automatically and the kernel
backward only ever sees (g_w, g_z, g_n).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..cameras import Camera
from ..errors import OverflowingTile, ShapeMismatch
from . import kernels

log = logging.getLogger(__name__)


@dataclass
class RenderSettings:
    tile_size: int = 16
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_min: float = kernels.ALPHA_MIN_DEFAULT
    termination: float = kernels.TERMINATION_DEFAULT
    radius_sigma: float = 3.4
    aa_margin: float = 2.5
    max_pairs: int = 1 << 22
    max_fragments: int = 1 << 23
    mode: str = "tile"  # "tile" | "brute"
    overflow_fallback: bool = True


@dataclass
class SurfelView:
    """Activated world-space surfel tensors for one (view, time) query."""
    centers: torch.Tensor     # (N, 3)
    tangent_u: torch.Tensor   # (N, 3) unit
    tangent_v: torch.Tensor   # (N, 3) unit, orthogonal to tangent_u
    scales: torch.Tensor      # (N, 2) positive
    opacities: torch.Tensor   # (N,) in [0, 1]
    colors: torch.Tensor      # (N, 3) in [0, 1]

    def __post_init__(self):
        n = self.centers.shape[0]
        for name, t, shape in (("centers", self.centers, (n, 3)),
                               ("tangent_u", self.tangent_u, (n, 3)),
                               ("tangent_v", self.tangent_v, (n, 3)),
                               ("scales", self.scales, (n, 2)),
                               ("opacities", self.opacities, (n,)),
                               ("colors", self.colors, (n, 3))):
            if tuple(t.shape) != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {tuple(t.shape)}")


@dataclass
class FragmentList:
    """CSR record of every blended fragment, in blend order per pixel."""
    offsets: torch.Tensor    # (H*W + 1,) int64
    splat_ids: torch.Tensor  # (F,) int32
    weights: torch.Tensor    # (F,) alpha_i * prod_{j<i}(1 - alpha_j)
    depths: torch.Tensor     # (F,) camera z-depth of the intersection
    normals: torch.Tensor    # (F, 3) camera frame, flipped toward the camera
    height: int
    width: int

    def pixel_ids(self) -> torch.Tensor:
        counts = self.offsets[1:] - self.offsets[:-1]
        return torch.repeat_interleave(
            torch.arange(self.height * self.width, dtype=torch.int64), counts)


@dataclass
class RenderOutput:
    color: torch.Tensor         # (H, W, 3)
    alpha: torch.Tensor         # (H, W) blended mass, 1 - transmittance
    depth: torch.Tensor         # (H, W) expected depth, 0 on background
    median_depth: torch.Tensor  # (H, W) non-differentiable
    normal: torch.Tensor        # (H, W, 3) weighted normal sum (unnormalized)
    fragments: FragmentList
    centers_cam: torch.Tensor | None = None  # (N, 3), grad retained when live


class _RasterFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, centers_cam, tangent_u_cam, tangent_v_cam, scales,
                opacities, meta):
        P = centers_cam.detach().numpy().astype(np.float64, copy=True)
        U = tangent_u_cam.detach().numpy().astype(np.float64, copy=True)
        V = tangent_v_cam.detach().numpy().astype(np.float64, copy=True)
        S = scales.detach().numpy().astype(np.float64, copy=True)
        O = opacities.detach().numpy().astype(np.float64, copy=True)
        st: RenderSettings = meta["settings"]
        H, W = meta["height"], meta["width"]
        fx, fy, cx, cy = meta["fx"], meta["fy"], meta["cx"], meta["cy"]
        z_near = meta["z_near"]

        mode = st.mode
        if mode == "tile":
            pair_splat, tile_starts, proj, ntx, nty = kernels.bin_splats(
                P, S, fx, fy, cx, cy, W, H, z_near, st.tile_size, st.tile_size,
                st.radius_sigma, st.aa_margin)
            if len(pair_splat) > st.max_pairs:
                if not st.overflow_fallback:
                    raise OverflowingTile(
                        f"{len(pair_splat)} tile pairs exceed the limit {st.max_pairs}")
                log.warning("tile binning produced %d pairs (limit %d); "
                            "falling back to the unbinned path",
                            len(pair_splat), st.max_pairs)
                mode = "brute"
        if mode == "brute":
            pair_splat, tile_starts, proj = kernels.bin_brute(P, fx, fy, cx, cy, z_near)
            ntx = nty = 1
        tile_w = W if mode == "brute" else st.tile_size
        tile_h = H if mode == "brute" else st.tile_size

        (offsets, frag_splat, frag_pair, frag_alpha, frag_z, frag_w, frag_n,
         median) = kernels.rasterize_fragments(
            P, U, V, S, O, proj, pair_splat, tile_starts, ntx, nty,
            tile_w, tile_h, H, W, fx, fy, cx, cy, z_near,
            st.alpha_min, st.termination, st.max_fragments)

        ctx.arrays = (P, U, V, S, O, proj, pair_splat, tile_starts, ntx, nty,
                      tile_w, tile_h, offsets, frag_pair, frag_alpha, frag_w)
        ctx.meta = meta
        out_w = torch.from_numpy(frag_w)
        out_z = torch.from_numpy(frag_z)
        out_n = torch.from_numpy(frag_n)
        t_offsets = torch.from_numpy(offsets)
        t_splat = torch.from_numpy(frag_splat)
        t_median = torch.from_numpy(median).reshape(H, W)
        ctx.mark_non_differentiable(t_offsets, t_splat, t_median)
        return out_w, out_z, out_n, t_offsets, t_splat, t_median

    @staticmethod
    def backward(ctx, g_w, g_z, g_n, _g_offsets, _g_splat, _g_median):
        (P, U, V, S, O, proj, pair_splat, tile_starts, ntx, nty,
         tile_w, tile_h, offsets, frag_pair, frag_alpha, frag_w) = ctx.arrays
        meta = ctx.meta
        H, W = meta["height"], meta["width"]
        n_frag = frag_alpha.shape[0]
        gw = (g_w.detach().numpy().astype(np.float64, copy=True)
              if g_w is not None else np.zeros(n_frag))
        gz = (g_z.detach().numpy().astype(np.float64, copy=True)
              if g_z is not None else np.zeros(n_frag))
        gn = (g_n.detach().numpy().astype(np.float64, copy=True)
              if g_n is not None else np.zeros((n_frag, 3)))
        pair_grads = np.zeros((len(pair_splat), 12))
        kernels.backward_pass(
            P, U, V, S, O, proj, pair_splat, tile_starts, ntx, nty,
            tile_w, tile_h, H, W, meta["fx"], meta["fy"], meta["cx"],
            meta["cy"], meta["z_near"], offsets, frag_pair, frag_alpha,
            frag_w, gw, gz, gn, pair_grads)
        n = P.shape[0]
        dP = np.zeros((n, 3))
        dU = np.zeros((n, 3))
        dV = np.zeros((n, 3))
        dS = np.zeros((n, 2))
        dO = np.zeros(n)
        kernels.merge_pair_grads(pair_splat, pair_grads, dP, dU, dV, dS, dO)
        return (torch.from_numpy(dP), torch.from_numpy(dU),
                torch.from_numpy(dV), torch.from_numpy(dS),
                torch.from_numpy(dO), None)


def render(camera: Camera, view: SurfelView,
           settings: RenderSettings | None = None) -> RenderOutput:
    """Rasterize activated world-space surfels through a pinhole camera."""
    settings = settings or RenderSettings()
    rot = torch.from_numpy(camera.rotation)
    center = torch.from_numpy(camera.center)
    centers_cam = (view.centers - center) @ rot
    if centers_cam.requires_grad:
        centers_cam.retain_grad()
    tangent_u_cam = view.tangent_u @ rot
    tangent_v_cam = view.tangent_v @ rot
    meta = {"height": camera.height, "width": camera.width,
            "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "z_near": camera.z_near, "settings": settings}
    w, z, n, offsets, splat_ids, median = _RasterFunction.apply(
        centers_cam, tangent_u_cam, tangent_v_cam, view.scales,
        view.opacities, meta)
    H, W = camera.height, camera.width
    frags = FragmentList(offsets=offsets, splat_ids=splat_ids, weights=w,
                         depths=z, normals=n, height=H, width=W)
    pix = frags.pixel_ids()
    hw = H * W
    zero = torch.zeros((), dtype=w.dtype)

    mass = torch.zeros(hw, dtype=w.dtype).index_add(0, pix, w)
    frag_colors = view.colors[splat_ids.long()]
    color = torch.zeros(hw, 3, dtype=w.dtype).index_add(
        0, pix, w.unsqueeze(1) * frag_colors)
    bg = torch.as_tensor(settings.background, dtype=w.dtype)
    color = color + (1.0 - mass).unsqueeze(1) * bg
    depth_num = torch.zeros(hw, dtype=w.dtype).index_add(0, pix, w * z)
    depth = torch.where(mass > 1e-8, depth_num / mass.clamp_min(1e-8), zero)
    normal = torch.zeros(hw, 3, dtype=w.dtype).index_add(
        0, pix, w.unsqueeze(1) * n)

    return RenderOutput(color=color.reshape(H, W, 3), alpha=mass.reshape(H, W),
                        depth=depth.reshape(H, W), median_depth=median,
                        normal=normal.reshape(H, W, 3), fragments=frags,
                        centers_cam=centers_cam)


def pseudo_normal_map(depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Normals from a depth map by central differences on the point map.

    Back-projects depth through the intrinsics to camera-space points, takes
    central differences, crosses them so the normal faces the camera, and
    normalizes.  Pixels on the image border, or whose stencil touches a
    background pixel (depth <= 0), get a zero normal.  Differentiable in the
    depth map.
    """
    H, W = depth.shape
    dt = depth.dtype
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dt),
                            torch.arange(W, dtype=dt), indexing="ij")
    dir_x = (xs + 0.5 - camera.cx) / camera.fx
    dir_y = (ys + 0.5 - camera.cy) / camera.fy
    points = torch.stack([depth * dir_x, depth * dir_y, depth], dim=-1)

    dx = (points[1:-1, 2:] - points[1:-1, :-2]) * 0.5
    dy = (points[2:, 1:-1] - points[:-2, 1:-1]) * 0.5
    n = torch.cross(dy, dx, dim=-1)
    # orient toward the camera: flip where the normal points away from origin
    inner = points[1:-1, 1:-1]
    away = (n * inner).sum(-1, keepdim=True) > 0
    n = torch.where(away, -n, n)
    n = n / torch.linalg.vector_norm(n, dim=-1, keepdim=True).clamp_min(1e-12)

    valid = ((depth[1:-1, 2:] > 0) & (depth[1:-1, :-2] > 0)
             & (depth[2:, 1:-1] > 0) & (depth[:-2, 1:-1] > 0)
             & (depth[1:-1, 1:-1] > 0))
    out = torch.zeros(H, W, 3, dtype=dt)
    out[1:-1, 1:-1] = torch.where(valid.unsqueeze(-1), n,
                                  torch.zeros((), dtype=dt))
    return out
