"""Training losses for surfel scene fitting.

Terms: photometric (L1 mixed with D-SSIM), per-pixel depth distortion over
blended fragments, fragment-normal vs depth-derived-normal consistency, and
an alpha mask term whose weight decays linearly to zero halfway through
training. ``total_loss`` combines them and produces a per-term report row
suitable for a JSON-lines log.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteLoss, ShapeMismatch
from .raster.render import FragmentList

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    """Weights of the composite loss L_c + alpha_d*L_d + beta_n*L_n + eta*L_m."""
    alpha_d: float = 1000.0
    beta_n: float = 0.05
    eta_m: float = 1.0          # initial mask weight, decayed by eta_at
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.alpha_d, self.beta_n, self.eta_m, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be non-negative")


def _gaussian_window(device, dtype) -> torch.Tensor:
    radius = SSIM_WINDOW // 2
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _local_mean(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Valid-window separable Gaussian filter over (C,1,H,W)."""
    k = kernel.numel()
    img = torch.nn.functional.conv2d(img, kernel.view(1, 1, 1, k))
    return torch.nn.functional.conv2d(img, kernel.view(1, 1, k, 1))


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over fully-valid 11x11 Gaussian windows, dynamic range 1.

    Accepts (H,W) or (H,W,C); channels are averaged with equal weight.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[0], a.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatch(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, "
            f"got {h}x{w}")
    x = a.permute(2, 0, 1)[:, None]  # (C,1,H,W)
    y = b.permute(2, 0, 1)[:, None]
    kernel = _gaussian_window(a.device, a.dtype)

    mu_x = _local_mean(x, kernel)
    mu_y = _local_mean(y, kernel)
    var_x = _local_mean(x * x, kernel) - mu_x * mu_x
    var_y = _local_mean(y * y, kernel) - mu_y * mu_y
    cov = _local_mean(x * y, kernel) - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)
         / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))
    return s.mean()


def photometric_loss(rendered: torch.Tensor, gt: torch.Tensor,
                     lambda_ssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) * mean-L1 + lambda * (1 - SSIM) / 2."""
    if rendered.shape != gt.shape:
        raise ShapeMismatch(
            f"photometric: {tuple(rendered.shape)} vs {tuple(gt.shape)}")
    l1 = (rendered - gt).abs().mean()
    if lambda_ssim == 0.0:
        return l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(rendered, gt)) / 2.0


def _sorted_by_depth(fragments: FragmentList):
    """Fragments gathered in (pixel, ascending depth) order."""
    pix = fragments.pixel_ids()
    z_np = fragments.depths.detach().cpu().numpy()
    order = torch.from_numpy(
        np.lexsort((z_np, pix.cpu().numpy())).copy())
    return pix[order], fragments.weights[order], fragments.depths[order]


def depth_distortion_loss(fragments: FragmentList,
                          form: str = "pairwise") -> torch.Tensor:
    """Per-pixel spread of blended fragment depths, averaged over all pixels.

    form="pairwise": sum over ordered fragment pairs of w_i * w_j * |z_i - z_j|.
    form="single":   sum over ordered fragment pairs of w_i * |z_i - z_j|.
    """
    if form not in ("pairwise", "single"):
        raise ValueError(f"unknown distortion form {form!r}")
    n_pixels = fragments.height * fragments.width
    if fragments.weights.numel() == 0 or n_pixels == 0:
        return fragments.weights.sum() * 0.0

    pix, w, z = _sorted_by_depth(fragments)
    start = fragments.offsets[pix]  # CSR start of each fragment's own pixel

    zero = w.new_zeros(1)
    cum_w = torch.cat([zero, torch.cumsum(w, 0)])
    cum_wz = torch.cat([zero, torch.cumsum(w * z, 0)])
    idx = torch.arange(w.numel())
    below_w = cum_w[idx] - cum_w[start]      # sum of w_j, j earlier in pixel
    below_wz = cum_wz[idx] - cum_wz[start]
    if form == "pairwise":
        total = 2.0 * (w * (z * below_w - below_wz)).sum()
    else:
        end = fragments.offsets[pix + 1]
        cum_z = torch.cat([zero, torch.cumsum(z, 0)])
        n_below = (idx - start).to(w.dtype)
        n_above = (end - 1 - idx).to(w.dtype)
        below_z = cum_z[idx] - cum_z[start]
        above_z = cum_z[end] - cum_z[idx + 1]
        total = (w * (z * n_below - below_z
                      + above_z - z * n_above)).sum()
    return total / n_pixels


def normal_consistency_loss(fragments: FragmentList,
                            normal_map: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels of sum_i w_i * (1 - |n_i . N|).

    ``normal_map`` is the depth-derived pseudo normal; zero rows mark invalid
    pixels and are skipped. It is normalized before the dot product.
    """
    if normal_map.shape != (fragments.height, fragments.width, 3):
        raise ShapeMismatch(
            f"normal map {tuple(normal_map.shape)} does not match "
            f"{fragments.height}x{fragments.width} fragments")
    flat_n = normal_map.reshape(-1, 3)
    norms = flat_n.norm(dim=1)
    valid = norms > 1e-12
    n_valid = int(valid.sum())
    if n_valid == 0 or fragments.weights.numel() == 0:
        return fragments.weights.sum() * 0.0

    pix = fragments.pixel_ids()
    frag_valid = valid[pix]
    target = flat_n[pix] / norms[pix].clamp_min(1e-12)[:, None]
    align = (fragments.normals * target).sum(dim=1).abs()
    contrib = fragments.weights * (1.0 - align)
    return contrib[frag_valid].sum() / n_valid


def mask_loss(alpha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between rendered alpha and a binary mask."""
    if alpha.shape != mask.shape:
        raise ShapeMismatch(
            f"mask: {tuple(alpha.shape)} vs {tuple(mask.shape)}")
    return (alpha - mask).abs().mean()


def eta_at(iteration: int, max_iter: int, eta0: float = 1.0) -> float:
    """Mask weight schedule: linear from eta0 to 0 at half of training."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    return eta0 * max(0.0, 1.0 - iteration / (0.5 * max_iter))


def total_loss(photometric: torch.Tensor,
               distortion: torch.Tensor,
               normal: torch.Tensor,
               mask: torch.Tensor | None,
               weights: LossWeights,
               iteration: int,
               max_iter: int) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the loss terms plus a per-term report row.

    Raises NonFiniteLoss naming the first non-finite term so the training
    step can be aborted before it poisons the parameters.
    """
    eta = eta_at(iteration, max_iter, weights.eta_m)
    terms = {"L_c": photometric, "L_d": distortion, "L_n": normal}
    if mask is not None:
        terms["L_m"] = mask
    for name, value in terms.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)

    total = (photometric + weights.alpha_d * distortion
             + weights.beta_n * normal)
    if mask is not None and eta > 0.0:
        total = total + eta * mask
    report = {
        "iter": int(iteration),
        "L_c": float(photometric.detach()),
        "L_d": float(distortion.detach()),
        "L_n": float(normal.detach()),
        "L_m": float(mask.detach()) if mask is not None else 0.0,
        "eta": float(eta),
        "total": float(total.detach()),
    }
    return total, report
