"""Shared helpers for the test suite: scene fabrication and oracle renderers."""
import numpy as np

from splatnorm.core import Camera, GaussianSet, sh_basis, sigmoid, gradient_proxy, project_to_screen


def look_at(position, target, up_hint=(0.0, 1.0, 0.0)):
    """World-to-view rotation/translation for a camera at `position` facing `target`."""
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up_hint, dtype=float)
    if abs(np.dot(f, up) / np.linalg.norm(up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return R, -R @ position


def view_camera(width=32, height=32, distance=2.5, azimuth=0.3, elevation=0.2, fov_scale=1.0):
    pos = distance * np.array([
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
        -np.cos(elevation) * np.cos(azimuth),
    ])
    R, t = look_at(pos, [0.0, 0.0, 0.0])
    f = fov_scale * 1.1 * max(width, height)
    return Camera(
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        world_to_view_rotation=R, world_to_view_translation=t,
        near=0.05, far=50.0,
    )


def random_scene(seed, n=8, spread=0.45, sh_degree=3):
    """Seeded random Gaussians near the origin with well-separated scale axes.

    The per-Gaussian log-scales are spaced >= 0.05 apart so the smallest-axis
    choice is stable under finite-difference perturbations.
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(-spread, spread, size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    base = rng.uniform(-2.6, -1.8, size=(n, 1))
    gaps = rng.uniform(0.05, 0.6, size=(n, 2))
    log_scales = np.concatenate([base, base + gaps[:, :1], base + gaps.sum(axis=1, keepdims=True)], axis=1)
    perm = rng.permuted(np.tile(np.arange(3), (n, 1)), axis=1)
    log_scales = np.take_along_axis(log_scales, perm, axis=1)
    opacity_logits = rng.uniform(-1.5, 2.0, size=n)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.uniform(-0.8, 1.5, size=(n, 3))
    nb = (sh_degree + 1) ** 2
    sh[:, :, 1:nb] = rng.normal(scale=0.25, size=(n, 3, nb - 1))
    gs = GaussianSet(
        means=means, rotations=rotations, log_scales=log_scales,
        opacity_logits=opacity_logits, sh_coeffs=sh,
        scene_bounds=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
    )
    return gs


def brute_force_render(gaussians, cam, background, sh_degree=3):
    """Per-pixel loop over every Gaussian: no tiles, no cutoffs, no early stop.

    Independent compositing path used as the rendering oracle.
    """
    proj = project_to_screen(gaussians.means, gaussians.rotations, gaussians.log_scales, cam)
    order = [i for i in np.lexsort((np.arange(len(gaussians)), proj.depth)) if proj.valid[i]]
    opac = sigmoid(gaussians.opacity_logits)
    offs = gaussians.means - cam.position
    dirs = offs / np.linalg.norm(offs, axis=1, keepdims=True)
    nb = (sh_degree + 1) ** 2
    colors = np.einsum("ncb,nb->nc", gaussians.sh_coeffs[:, :, :nb], sh_basis(dirs, sh_degree)) + 0.5
    proxies = gradient_proxy(gaussians.rotations, gaussians.log_scales) @ cam.world_to_view_rotation.T
    background = np.asarray(background, dtype=float)

    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    grad = np.zeros((h, w, 3))
    invs = [np.linalg.inv(proj.cov2d[i]) for i in range(len(gaussians))]
    for row in range(h):
        for col in range(w):
            px = np.array([col + 0.5, row + 0.5])
            T = 1.0
            c = np.zeros(3)
            dep = 0.0
            gr = np.zeros(3)
            for i in order:
                d = px - proj.mean2d[i]
                wgt = opac[i] * np.exp(-0.5 * d @ invs[i] @ d)
                c = c + colors[i] * wgt * T
                dep = dep + proj.depth[i] * wgt * T
                gr = gr + proxies[i] * wgt * T
                T = T * (1.0 - wgt)
            color[row, col] = c + background * T
            depth[row, col] = dep
            alpha[row, col] = 1.0 - T
            grad[row, col] = gr
    return color, depth, alpha, grad


def sphere_splats(n=2000, radius=0.5, sigma_t=0.035, sigma_n=0.01, opacity_logit=8.0,
                  color=(0.7, 0.4, 0.3)):
    """Surface-aligned Gaussians hand-placed on a sphere: a converged-scene stand-in.

    Each splat's smallest axis (local z) is rotated onto the outward normal,
    so the gradient proxies agree with the sphere normals by construction.
    """
    i = np.arange(n)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    phi = golden * i
    normals = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    means = radius * normals

    # quaternion rotating e_z onto each normal
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(np.tile(ez, (n, 1)), normals)
    axis_norm = np.linalg.norm(axis, axis=1)
    angle = np.arccos(np.clip(normals[:, 2], -1.0, 1.0))
    safe = axis_norm > 1e-12
    axis[safe] /= axis_norm[safe][:, None]
    axis[~safe] = [1.0, 0.0, 0.0]  # parallel/antiparallel: any axis works
    quats = np.concatenate([
        np.cos(angle / 2)[:, None], np.sin(angle / 2)[:, None] * axis
    ], axis=1)

    log_scales = np.tile([np.log(sigma_t), np.log(sigma_t), np.log(sigma_n)], (n, 1))
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = (np.asarray(color) - 0.5) / 0.28209479177387814
    return GaussianSet(
        means=means, rotations=quats, log_scales=log_scales,
        opacity_logits=np.full(n, float(opacity_logit)), sh_coeffs=sh,
        scene_bounds=np.array([[-radius, -radius, -radius], [radius, radius, radius]]) * 1.2,
    )


def render_depth_set(gaussians, cameras, cfg=None):
    from splatnorm.rasterizer import RenderConfig, render

    cfg = cfg or RenderConfig()
    return [(render(gaussians, cam, cfg), cam) for cam in cameras]
