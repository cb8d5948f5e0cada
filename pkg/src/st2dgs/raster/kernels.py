"""Tile-binned surfel rasterization kernels (numpy + numba only).

Geometry convention: camera space with x right, y down, z forward.  The ray
through pixel (px, py) is D = ((px+0.5-cx)/fx, (py+0.5-cy)/fy, 1), so the
ray-plane parameter tau IS the camera z-depth of the intersection.

The counting pass, the fill pass, and the backward pass recompute each
fragment's intersection with identical scalar arithmetic instead of storing
intermediate values; keeping the three code paths bit-consistent is what
makes the stored fragment list a faithful record of the blend.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

from ..errors import OverflowingTile

ALPHA_MIN_DEFAULT = 1.0 / 255.0
TERMINATION_DEFAULT = 1e-4
GRAZING = 1e-6
MEDIAN_T = 0.5


@njit(inline="always")
def _fragment(px_c, py_c, dir_x, dir_y, inv_len_d,
              pcx, pcy, pcz, ux, uy, uz, vx, vy, vz, su, sv, opac,
              proj_x, proj_y, z_near, alpha_min):
    """Ray-splat intersection for one pixel: (alpha, tau, nx, ny, nz, ok).

    The returned normal is the splat plane normal flipped toward the camera
    (unit up to rounding: the tangents are orthonormal by construction).
    """
    nx = uy * vz - uz * vy
    ny = uz * vx - ux * vz
    nz = ux * vy - uy * vx
    nd = nx * dir_x + ny * dir_y + nz
    if abs(nd) * inv_len_d < GRAZING:
        return 0.0, 0.0, 0.0, 0.0, 0.0, False
    tau = (nx * pcx + ny * pcy + nz * pcz) / nd
    if tau <= z_near:
        return 0.0, 0.0, 0.0, 0.0, 0.0, False
    dx = tau * dir_x - pcx
    dy = tau * dir_y - pcy
    dz = tau - pcz
    u = (dx * ux + dy * uy + dz * uz) / su
    v = (dx * vx + dy * vy + dz * vz) / sv
    g_obj = np.exp(-0.5 * (u * u + v * v))
    ex = px_c - proj_x
    ey = py_c - proj_y
    g_scr = np.exp(-(ex * ex + ey * ey))
    g = g_obj if g_obj >= g_scr else g_scr
    alpha = opac * g
    if alpha < alpha_min:
        return 0.0, 0.0, 0.0, 0.0, 0.0, False
    s = -1.0 if nd > 0.0 else 1.0
    return alpha, tau, s * nx, s * ny, s * nz, True


@njit(parallel=True, cache=True)
def count_pass(P, U, V, S, O, proj, pair_splat, tile_starts,
               n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
               fx, fy, cx, cy, z_near, alpha_min, term_T, counts):
    n_tiles = n_tiles_x * n_tiles_y
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        y0 = ty * tile_h
        x0 = tx * tile_w
        y1 = min(y0 + tile_h, H)
        x1 = min(x0 + tile_w, W)
        k0 = tile_starts[t]
        k1 = tile_starts[t + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                dir_x = (px + 0.5 - cx) / fx
                dir_y = (py + 0.5 - cy) / fy
                inv_len = 1.0 / np.sqrt(dir_x * dir_x + dir_y * dir_y + 1.0)
                T = 1.0
                cnt = 0
                for k in range(k0, k1):
                    i = pair_splat[k]
                    alpha, tau, nxf, nyf, nzf, ok = _fragment(
                        px + 0.5, py + 0.5, dir_x, dir_y, inv_len,
                        P[i, 0], P[i, 1], P[i, 2], U[i, 0], U[i, 1], U[i, 2],
                        V[i, 0], V[i, 1], V[i, 2], S[i, 0], S[i, 1], O[i],
                        proj[i, 0], proj[i, 1], z_near, alpha_min)
                    if not ok:
                        continue
                    cnt += 1
                    T *= 1.0 - alpha
                    if T < term_T:
                        break
                counts[py * W + px] = cnt


@njit(parallel=True, cache=True)
def fill_pass(P, U, V, S, O, proj, pair_splat, tile_starts,
              n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
              fx, fy, cx, cy, z_near, alpha_min, term_T,
              offsets, frag_splat, frag_pair, frag_alpha, frag_z, frag_w,
              frag_n, median):
    n_tiles = n_tiles_x * n_tiles_y
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        y0 = ty * tile_h
        x0 = tx * tile_w
        y1 = min(y0 + tile_h, H)
        x1 = min(x0 + tile_w, W)
        k0 = tile_starts[t]
        k1 = tile_starts[t + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * W + px
                dir_x = (px + 0.5 - cx) / fx
                dir_y = (py + 0.5 - cy) / fy
                inv_len = 1.0 / np.sqrt(dir_x * dir_x + dir_y * dir_y + 1.0)
                T = 1.0
                cur = offsets[pix]
                med = 0.0
                med_done = False
                for k in range(k0, k1):
                    i = pair_splat[k]
                    alpha, tau, nxf, nyf, nzf, ok = _fragment(
                        px + 0.5, py + 0.5, dir_x, dir_y, inv_len,
                        P[i, 0], P[i, 1], P[i, 2], U[i, 0], U[i, 1], U[i, 2],
                        V[i, 0], V[i, 1], V[i, 2], S[i, 0], S[i, 1], O[i],
                        proj[i, 0], proj[i, 1], z_near, alpha_min)
                    if not ok:
                        continue
                    w = alpha * T
                    frag_splat[cur] = i
                    frag_pair[cur] = k
                    frag_alpha[cur] = alpha
                    frag_z[cur] = tau
                    frag_w[cur] = w
                    frag_n[cur, 0] = nxf
                    frag_n[cur, 1] = nyf
                    frag_n[cur, 2] = nzf
                    cur += 1
                    T *= 1.0 - alpha
                    if not med_done and T < MEDIAN_T:
                        med = tau
                        med_done = True
                    if T < term_T:
                        break
                median[pix] = med


@njit(parallel=True, cache=True)
def backward_pass(P, U, V, S, O, proj, pair_splat, tile_starts,
                  n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
                  fx, fy, cx, cy, z_near,
                  offsets, frag_pair, frag_alpha, frag_w,
                  g_w, g_z, g_n, pair_grads):
    """Per-fragment adjoints -> per-(tile, splat) parameter gradient slots.

    pair_grads columns: 0:3 d_center, 3:6 d_tangent_u, 6:9 d_tangent_v,
    9:11 d_scales, 11 d_opacity.  Each tile only touches its own pair rows,
    so the parallel loop is race-free; the merge into per-splat gradients
    happens afterwards in a fixed serial order.
    """
    n_tiles = n_tiles_x * n_tiles_y
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t % n_tiles_x
        y0 = ty * tile_h
        x0 = tx * tile_w
        y1 = min(y0 + tile_h, H)
        x1 = min(x0 + tile_w, W)
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * W + px
                base = offsets[pix]
                cnt = offsets[pix + 1] - base
                if cnt == 0:
                    continue
                px_c = px + 0.5
                py_c = py + 0.5
                dir_x = (px_c - cx) / fx
                dir_y = (py_c - cy) / fy
                A = 0.0
                for j in range(cnt - 1, -1, -1):
                    f = base + j
                    alpha = frag_alpha[f]
                    w = frag_w[f]
                    gw = g_w[f]
                    T = w / alpha
                    d_alpha = gw * T
                    denom = 1.0 - alpha
                    if denom > 1e-12:
                        d_alpha -= A / denom
                    A += gw * w
                    slot = frag_pair[f]
                    i = pair_splat[slot]
                    pcx = P[i, 0]
                    pcy = P[i, 1]
                    pcz = P[i, 2]
                    ux = U[i, 0]
                    uy = U[i, 1]
                    uz = U[i, 2]
                    vx = V[i, 0]
                    vy = V[i, 1]
                    vz = V[i, 2]
                    su = S[i, 0]
                    sv = S[i, 1]
                    # recompute the intersection with forward-identical math
                    nx = uy * vz - uz * vy
                    ny = uz * vx - ux * vz
                    nz = ux * vy - uy * vx
                    nd = nx * dir_x + ny * dir_y + nz
                    tau = (nx * pcx + ny * pcy + nz * pcz) / nd
                    dx = tau * dir_x - pcx
                    dy = tau * dir_y - pcy
                    dz = tau - pcz
                    u = (dx * ux + dy * uy + dz * uz) / su
                    v = (dx * vx + dy * vy + dz * vz) / sv
                    g_obj = np.exp(-0.5 * (u * u + v * v))
                    ex = px_c - proj[i, 0]
                    ey = py_c - proj[i, 1]
                    g_scr = np.exp(-(ex * ex + ey * ey))

                    dPx = 0.0
                    dPy = 0.0
                    dPz = 0.0
                    dUx = 0.0
                    dUy = 0.0
                    dUz = 0.0
                    dVx = 0.0
                    dVy = 0.0
                    dVz = 0.0
                    dsu = 0.0
                    dsv = 0.0
                    d_tau = g_z[f]
                    if g_obj >= g_scr:
                        d_opac = d_alpha * g_obj
                        dG = d_alpha * O[i]
                        du = dG * (-u * g_obj)
                        dv = dG * (-v * g_obj)
                        dsu += du * (-u / su)
                        dsv += dv * (-v / sv)
                        dUx += du * dx / su
                        dUy += du * dy / su
                        dUz += du * dz / su
                        dVx += dv * dx / sv
                        dVy += dv * dy / sv
                        dVz += dv * dz / sv
                        ddx = du * ux / su + dv * vx / sv
                        ddy = du * uy / su + dv * vy / sv
                        ddz = du * uz / su + dv * vz / sv
                        # delta = tau*D - P
                        d_tau += ddx * dir_x + ddy * dir_y + ddz
                        dPx -= ddx
                        dPy -= ddy
                        dPz -= ddz
                    else:
                        d_opac = d_alpha * g_scr
                        dG = d_alpha * O[i]
                        dd2 = -g_scr * dG
                        dproj_x = dd2 * (-2.0 * ex)
                        dproj_y = dd2 * (-2.0 * ey)
                        dPx += dproj_x * fx / pcz
                        dPy += dproj_y * fy / pcz
                        dPz -= (dproj_x * fx * pcx + dproj_y * fy * pcy) / (pcz * pcz)
                    # tau = (N.P)/(N.D)
                    dPx += d_tau * nx / nd
                    dPy += d_tau * ny / nd
                    dPz += d_tau * nz / nd
                    dNx = -d_tau * dx / nd
                    dNy = -d_tau * dy / nd
                    dNz = -d_tau * dz / nd
                    # flipped normal output: n_flip = s*N with constant sign
                    s = -1.0 if nd > 0.0 else 1.0
                    dNx += s * g_n[f, 0]
                    dNy += s * g_n[f, 1]
                    dNz += s * g_n[f, 2]
                    # N = U x V  =>  dU += V x dN, dV += dN x U
                    dUx += vy * dNz - vz * dNy
                    dUy += vz * dNx - vx * dNz
                    dUz += vx * dNy - vy * dNx
                    dVx += dNy * uz - dNz * uy
                    dVy += dNz * ux - dNx * uz
                    dVz += dNx * uy - dNy * ux

                    pair_grads[slot, 0] += dPx
                    pair_grads[slot, 1] += dPy
                    pair_grads[slot, 2] += dPz
                    pair_grads[slot, 3] += dUx
                    pair_grads[slot, 4] += dUy
                    pair_grads[slot, 5] += dUz
                    pair_grads[slot, 6] += dVx
                    pair_grads[slot, 7] += dVy
                    pair_grads[slot, 8] += dVz
                    pair_grads[slot, 9] += dsu
                    pair_grads[slot, 10] += dsv
                    pair_grads[slot, 11] += d_opac


@njit(cache=True)
def merge_pair_grads(pair_splat, pair_grads, dP, dU, dV, dS, dO):
    """Serial fixed-order reduction of pair slots into per-splat gradients."""
    for p in range(pair_splat.shape[0]):
        i = pair_splat[p]
        dP[i, 0] += pair_grads[p, 0]
        dP[i, 1] += pair_grads[p, 1]
        dP[i, 2] += pair_grads[p, 2]
        dU[i, 0] += pair_grads[p, 3]
        dU[i, 1] += pair_grads[p, 4]
        dU[i, 2] += pair_grads[p, 5]
        dV[i, 0] += pair_grads[p, 6]
        dV[i, 1] += pair_grads[p, 7]
        dV[i, 2] += pair_grads[p, 8]
        dS[i, 0] += pair_grads[p, 9]
        dS[i, 1] += pair_grads[p, 10]
        dO[i] += pair_grads[p, 11]


@njit(cache=True)
def _fill_pair_arrays(x0, x1, y0, y1, z, n_tiles_x, total):
    pair_splat = np.empty(total, np.int32)
    pair_tile = np.empty(total, np.int64)
    pair_depth = np.empty(total, np.float64)
    k = 0
    for i in range(x0.shape[0]):
        if x0[i] > x1[i] or y0[i] > y1[i]:
            continue
        for ty in range(y0[i], y1[i] + 1):
            for tx in range(x0[i], x1[i] + 1):
                pair_splat[k] = i
                pair_tile[k] = ty * n_tiles_x + tx
                pair_depth[k] = z[i]
                k += 1
    return pair_splat, pair_tile, pair_depth


def bin_splats(P, S, fx, fy, cx, cy, W, H, z_near, tile_w, tile_h,
               radius_sigma, aa_margin):
    """Conservative splat-to-tile binning.

    Returns (pair_splat, tile_starts, proj, n_tiles_x, n_tiles_y).  Pairs are
    sorted by (tile, center depth, splat id) — the fixed blending order.  The
    per-axis pixel radius bounds the projection of a ball of radius
    radius_sigma * max(scale) around the center, plus the screen-space
    low-pass kernel's reach in pixels.
    """
    n = P.shape[0]
    n_tiles_x = (W + tile_w - 1) // tile_w
    n_tiles_y = (H + tile_h - 1) // tile_h
    z = P[:, 2]
    vis = z > z_near
    proj = np.zeros((n, 2))
    zs = np.where(vis, z, 1.0)
    proj[:, 0] = fx * P[:, 0] / zs + cx
    proj[:, 1] = fy * P[:, 1] / zs + cy
    R = radius_sigma * np.maximum(S[:, 0], S[:, 1])
    safe_z = z - R
    big = 1e7
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.where(safe_z > 1e-9,
                      fx * R * (z + np.abs(P[:, 0])) / (safe_z * zs), big)
        ry = np.where(safe_z > 1e-9,
                      fy * R * (z + np.abs(P[:, 1])) / (safe_z * zs), big)
    rx = np.minimum(rx, big) + aa_margin
    ry = np.minimum(ry, big) + aa_margin
    px_min = np.floor(proj[:, 0] - rx)
    px_max = np.ceil(proj[:, 0] + rx)
    py_min = np.floor(proj[:, 1] - ry)
    py_max = np.ceil(proj[:, 1] + ry)
    x0 = np.clip(px_min // tile_w, 0, n_tiles_x - 1).astype(np.int64)
    x1 = np.clip(px_max // tile_w, 0, n_tiles_x - 1).astype(np.int64)
    y0 = np.clip(py_min // tile_h, 0, n_tiles_y - 1).astype(np.int64)
    y1 = np.clip(py_max // tile_h, 0, n_tiles_y - 1).astype(np.int64)
    dead = (~vis) | (px_max < 0) | (px_min > W) | (py_max < 0) | (py_min > H)
    x1 = np.where(dead, -1, x1)
    x0 = np.where(dead, 0, x0)
    counts = np.where(x1 >= x0, (x1 - x0 + 1) * (y1 - y0 + 1), 0)
    total = int(counts.sum())
    pair_splat, pair_tile, pair_depth = _fill_pair_arrays(
        x0, x1, y0, y1, z, n_tiles_x, total)
    order = np.lexsort((pair_splat, pair_depth, pair_tile))
    pair_splat = np.ascontiguousarray(pair_splat[order])
    pair_tile = pair_tile[order]
    tile_starts = np.searchsorted(pair_tile, np.arange(n_tiles_x * n_tiles_y + 1))
    return pair_splat, tile_starts.astype(np.int64), proj, n_tiles_x, n_tiles_y


def bin_brute(P, fx, fy, cx, cy, z_near):
    """Degenerate binning: one full-image tile, every visible splat a pair.

    The projection array must match bin_splats bit-for-bit — the screen-space
    kernel reads it in both paths.
    """
    z = P[:, 2]
    vis_idx = np.nonzero(z > z_near)[0]
    order = np.lexsort((vis_idx, z[vis_idx]))
    pair_splat = vis_idx[order].astype(np.int32)
    proj = np.zeros((P.shape[0], 2))
    zs = np.where(z > z_near, z, 1.0)
    proj[:, 0] = fx * P[:, 0] / zs + cx
    proj[:, 1] = fy * P[:, 1] / zs + cy
    tile_starts = np.array([0, len(pair_splat)], np.int64)
    return pair_splat, tile_starts, proj


def rasterize_fragments(P, U, V, S, O, proj, pair_splat, tile_starts,
                        n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
                        fx, fy, cx, cy, z_near, alpha_min, term_T,
                        max_fragments):
    """Run the two forward passes; returns the CSR fragment record."""
    counts = np.zeros(H * W, np.int64)
    count_pass(P, U, V, S, O, proj, pair_splat, tile_starts,
               n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
               fx, fy, cx, cy, z_near, alpha_min, term_T, counts)
    offsets = np.zeros(H * W + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    if total > max_fragments:
        raise OverflowingTile(
            f"{total} fragments exceed the limit {max_fragments}")
    frag_splat = np.empty(total, np.int32)
    frag_pair = np.empty(total, np.int64)
    frag_alpha = np.empty(total, np.float64)
    frag_z = np.empty(total, np.float64)
    frag_w = np.empty(total, np.float64)
    frag_n = np.empty((total, 3), np.float64)
    median = np.zeros(H * W, np.float64)
    fill_pass(P, U, V, S, O, proj, pair_splat, tile_starts,
              n_tiles_x, n_tiles_y, tile_w, tile_h, H, W,
              fx, fy, cx, cy, z_near, alpha_min, term_T,
              offsets, frag_splat, frag_pair, frag_alpha, frag_z, frag_w,
              frag_n, median)
    return offsets, frag_splat, frag_pair, frag_alpha, frag_z, frag_w, frag_n, median
