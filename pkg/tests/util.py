"""Shared test helpers: scene builders and an independent reference renderer."""
import numpy as np
import torch

from st2dgs.cameras import Camera
from st2dgs.core import quat_to_rotation
from st2dgs.raster import SurfelView

ALPHA_MIN = 1.0 / 255.0
TERMINATION = 1e-4


def surfel_view(centers, tangent_u, tangent_v, scales, opacities, colors):
    to = lambda a, shape: torch.as_tensor(np.asarray(a, float).reshape(shape),
                                          dtype=torch.float64)
    n = len(np.atleast_2d(centers))
    return SurfelView(centers=to(centers, (n, 3)),
                      tangent_u=to(tangent_u, (n, 3)),
                      tangent_v=to(tangent_v, (n, 3)),
                      scales=to(scales, (n, 2)),
                      opacities=to(opacities, (n,)),
                      colors=to(colors, (n, 3)))


def axis_splats(zs, opacities, colors, scale=0.5):
    """Fronto-parallel splats stacked along +z at the optical axis."""
    n = len(zs)
    return surfel_view([[0.0, 0.0, z] for z in zs],
                       [[1.0, 0.0, 0.0]] * n, [[0.0, 1.0, 0.0]] * n,
                       [[scale, scale]] * n, opacities, colors)


def centered_camera(size=5, f=10.0, z_near=0.01):
    """Odd-sized camera whose middle pixel's center is exactly on-axis."""
    c = size / 2.0
    return Camera(fx=f, fy=f, cx=c, cy=c, width=size, height=size,
                  camera_to_world=np.eye(4), z_near=z_near)


def random_scene(n, seed, width=33, height=17, f=30.0):
    rng = np.random.default_rng(seed)
    cam = Camera(fx=f, fy=f, cx=width / 2, cy=height / 2,
                 width=width, height=height, camera_to_world=np.eye(4))
    tan_u = np.empty((n, 3))
    tan_v = np.empty((n, 3))
    for i in range(n):
        r = quat_to_rotation(rng.normal(size=4))
        tan_u[i] = r[:, 0]
        tan_v[i] = r[:, 1]
    centers = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-0.8, 0.8, n),
                        rng.uniform(1.0, 6.0, n)], axis=1)
    # a few splats behind the camera / near plane to exercise culling
    centers[: max(1, n // 20), 2] = rng.uniform(-2.0, 0.005, max(1, n // 20))
    view = surfel_view(centers, tan_u, tan_v,
                       np.exp(rng.uniform(-3.5, -0.5, size=(n, 2))),
                       rng.uniform(0.0, 1.0, n), rng.uniform(0.0, 1.0, (n, 3)))
    return cam, view


def reference_render(camera, view, background=(0.0, 0.0, 0.0)):
    """Slow, independent renderer: unit-direction rays, per-pixel python loop.

    Deliberately parameterized differently from the production kernels (unit
    ray directions in world space, explicit per-pixel candidate iteration)
    while following the same contract: candidates ordered by (camera z, id),
    alpha cutoff 1/255, blend-then-check termination at 1e-4, screen-space
    low-pass max'd with the object kernel, depth = camera z-depth, normals in
    the camera frame flipped toward the camera.
    """
    P = view.centers.detach().numpy()
    U = view.tangent_u.detach().numpy()
    V = view.tangent_v.detach().numpy()
    S = view.scales.detach().numpy()
    O = view.opacities.detach().numpy()
    C = view.colors.detach().numpy()
    H, W = camera.height, camera.width
    rot = camera.rotation
    cam_z = (P - camera.center) @ rot[:, 2]
    proj_all = camera.project(P) if len(P) else np.zeros((0, 2))
    color = np.zeros((H, W, 3))
    mass = np.zeros((H, W))
    depth_num = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    median = np.zeros((H, W))

    vis = np.nonzero(cam_z > camera.z_near)[0]
    order = vis[np.lexsort((vis, cam_z[vis]))]
    for py in range(H):
        for px in range(W):
            origin, direction = camera.pixel_ray(px, py)  # unit, world frame
            T = 1.0
            med_done = False
            for i in order:
                normal_i = np.cross(U[i], V[i])
                nd = float(normal_i @ direction)
                if abs(nd) < 1e-6:
                    continue
                t_star = float(normal_i @ (P[i] - origin)) / nd
                x = origin + t_star * direction
                z_cam = float((x - camera.center) @ rot[:, 2])
                if z_cam <= camera.z_near:
                    continue
                delta = x - P[i]
                u = float(delta @ U[i]) / S[i, 0]
                v = float(delta @ V[i]) / S[i, 1]
                g_obj = np.exp(-0.5 * (u * u + v * v))
                ex = px + 0.5 - proj_all[i, 0]
                ey = py + 0.5 - proj_all[i, 1]
                g_scr = np.exp(-(ex * ex + ey * ey))
                alpha = O[i] * max(g_obj, g_scr)
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * T
                color[py, px] += w * C[i]
                mass[py, px] += w
                depth_num[py, px] += w * z_cam
                n_flip_world = -np.sign(nd) * normal_i
                normal[py, px] += w * (n_flip_world @ rot)
                T *= 1.0 - alpha
                if not med_done and T < 0.5:
                    median[py, px] = z_cam
                    med_done = True
                if T < TERMINATION:
                    break
    color += (1.0 - mass)[..., None] * np.asarray(background)
    depth = np.where(mass > 1e-8, depth_num / np.maximum(mass, 1e-8), 0.0)
    return {"color": color, "alpha": mass, "depth": depth, "normal": normal,
            "median": median}


# ---------------------------------------------------------------------------
# Finite-difference gradient rig.
#
# Scenes are built so that no pixel sits near any branch boundary of the
# renderer within an FD step of 1e-4: every splat footprint is several pixels
# wide (the object-space Gaussian dominates the screen-space one everywhere),
# opacities stay <= 0.6 so transmittance never reaches the termination
# threshold, tilts stay <= ~35 degrees so no ray comes close to grazing, one
# broad splat keeps the alpha mass well above the depth-map gate at every
# pixel, and alpha_min=0 with a wide binning radius makes the fragment set
# independent of the perturbation.
# ---------------------------------------------------------------------------

GRADIENT_PARAM_NAMES = ("centers", "rotations", "log_scales", "opacity_raw",
                        "sh_dc", "sh_rest")


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def gradient_scene(seed, n=8, size=16):
    """A seeded random scene with smooth-by-construction renders.

    Returns (camera, leaves, settings, weights) where ``leaves`` is a tuple of
    raw parameter tensors (requires_grad) ordered as GRADIENT_PARAM_NAMES and
    ``weights`` is a tuple of probe weight maps (color, alpha, depth, normal).
    """
    from st2dgs.raster import RenderSettings

    rng = np.random.default_rng(7000 + seed)
    f = 20.0
    cam = Camera(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                 width=size, height=size, camera_to_world=np.eye(4))

    z = rng.uniform(2.5, 4.0, n)
    px = np.empty((n, 2))
    px[0] = (size / 2.0, size / 2.0)
    px[1:] = rng.uniform(0.28 * size, 0.72 * size, (n - 1, 2))
    sigma_px = np.empty(n)
    sigma_px[0] = 0.375 * size  # broad anchor: keeps alpha mass high everywhere
    sigma_px[1:] = rng.uniform(3.0, 4.5, n - 1)

    centers = np.stack([(px[:, 0] - size / 2.0) * z / f,
                        (px[:, 1] - size / 2.0) * z / f, z], axis=1)
    log_scales = np.log(sigma_px[:, None] * z[:, None] / f
                        * rng.uniform(0.85, 1.15, (n, 2)))

    rotations = np.empty((n, 4))
    tilt = np.deg2rad(rng.uniform(0.0, 35.0, n))
    tilt[0] = np.deg2rad(10.0)
    for i in range(n):
        phi = rng.uniform(0.0, 2 * np.pi)   # tilt axis in the xy-plane
        psi = rng.uniform(0.0, 2 * np.pi)   # in-plane spin
        q_tilt = np.array([np.cos(tilt[i] / 2),
                           np.sin(tilt[i] / 2) * np.cos(phi),
                           np.sin(tilt[i] / 2) * np.sin(phi), 0.0])
        q_spin = np.array([np.cos(psi / 2), 0.0, 0.0, np.sin(psi / 2)])
        rotations[i] = _quat_mul(q_tilt, q_spin) * rng.uniform(0.9, 1.1)
    rotations += 0.005 * rng.normal(size=(n, 4))

    p = rng.uniform(0.3, 0.6, n)
    opacity_raw = np.log(p / (1.0 - p))
    sh_dc = rng.uniform(-0.8, 0.8, (n, 1, 3))
    sh_rest = rng.uniform(-0.1, 0.1, (n, 3, 3))

    leaves = tuple(torch.tensor(a, dtype=torch.float64, requires_grad=True)
                   for a in (centers, rotations, log_scales, opacity_raw,
                             sh_dc, sh_rest))
    settings = RenderSettings(tile_size=size, background=(0.15, 0.25, 0.35),
                              alpha_min=0.0, termination=1e-12,
                              radius_sigma=8.0, aa_margin=2.5)
    weights = tuple(torch.tensor(rng.uniform(-1.0, 1.0, s), dtype=torch.float64)
                    for s in ((size, size, 3), (size, size),
                              (size, size), (size, size, 3)))
    return cam, leaves, settings, weights


def render_from_leaves(camera, leaves, settings, mode=None):
    """Render raw leaf parameters through the production activation chain

    (quaternion frames, exp scales, sigmoid opacity, spherical-harmonic
    colors with view directions), so the output maps and fragments are
    differentiable in every leaf.
    """
    from dataclasses import replace

    from st2dgs.model import quat_frames, sh_colors
    from st2dgs.raster import render

    if mode is not None:
        settings = replace(settings, mode=mode)
    centers, rotations, log_scales, opacity_raw, sh_dc, sh_rest = leaves
    tan_u, tan_v = quat_frames(rotations)
    dirs = centers - torch.as_tensor(camera.center, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=1, keepdim=True).clamp_min(1e-12)
    view = SurfelView(centers=centers, tangent_u=tan_u, tangent_v=tan_v,
                      scales=torch.exp(log_scales),
                      opacities=torch.sigmoid(opacity_raw),
                      colors=sh_colors(torch.cat([sh_dc, sh_rest], 1), dirs))
    return render(camera, view, settings)


def gradient_probes(camera, leaves, settings, weights, mode=None):
    """Four scalar probes (color, alpha, depth, normal) of a full render."""
    out = render_from_leaves(camera, leaves, settings, mode)
    wc, wa, wd, wn = weights
    return torch.stack([(out.color * wc).sum(), (out.alpha * wa).sum(),
                        (out.depth * wd).sum(), (out.normal * wn).sum()])


def analytic_probe_gradients(camera, leaves, settings, weights, mode=None):
    """Per-probe analytic gradients: list over probes of tuples over leaves."""
    per_probe = []
    for k in range(4):
        for leaf in leaves:
            leaf.grad = None
        gradient_probes(camera, leaves, settings, weights, mode)[k].backward()
        per_probe.append(tuple(
            torch.zeros_like(leaf) if leaf.grad is None
            else leaf.grad.detach().clone() for leaf in leaves))
    return per_probe


def fd_gradients(fn, leaves, eps=1e-4):
    """Central-difference gradients of a vector probe in one sweep.

    ``fn()`` must return a (K,) tensor recomputed from the current leaf
    values. Returns a list of K tuples of per-leaf gradient tensors.
    """
    n_probes = fn().numel()
    per_probe = [tuple(torch.zeros_like(leaf) for leaf in leaves)
                 for _ in range(n_probes)]
    with torch.no_grad():
        for li, leaf in enumerate(leaves):
            flat = leaf.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                hi = fn()
                flat[j] = orig - eps
                lo = fn()
                flat[j] = orig
                step = (hi - lo) / (2.0 * eps)
                for k in range(n_probes):
                    per_probe[k][li].reshape(-1)[j] = step[k]
    return per_probe


def fd_probe_gradients(camera, leaves, settings, weights, eps=1e-4):
    """Central-difference gradients of the four map probes in one sweep."""
    return fd_gradients(
        lambda: gradient_probes(camera, leaves, settings, weights), leaves,
        eps=eps)


def max_relative_error(analytic, fd, floor=1e-6):
    """max |a - f| / max(|a|, |f|, floor) over all entries."""
    a = np.asarray(analytic.detach() if torch.is_tensor(analytic) else analytic)
    f = np.asarray(fd.detach() if torch.is_tensor(fd) else fd)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - f) / denom).max())
