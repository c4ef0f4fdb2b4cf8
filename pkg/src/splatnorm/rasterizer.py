"""Tile-based CPU rasterizer: forward rendering and the analytic backward pass.

The forward pass composites color, expected depth, accumulated alpha, and a
blended gradient-proxy vector per pixel, front to back:

    out = sum_i value_i * w_i * T_i,   T_i = prod_{j<i} (1 - w_j),
    w_i = opacity_i * exp(-1/2 d^T cov2d^{-1} d)

Gaussians with w below `alpha_cutoff` are skipped; blending stops once the
running transmittance T drops below `transmittance_floor`.  Color is
composited over `background` with the leftover transmittance.

The backward pass recomputes the forward state per tile (nothing is cached
between passes) and chains pixel gradients through the blend, the screen-space
ellipse, the perspective projection Jacobian, the covariance factorization,
the SH color (including its view-direction dependence on the mean), the
sigmoid opacity, and the rotation column that feeds the gradient-proxy
channel.  Gradients through the depth-sort order are ignored, as is standard
for splatting.

Everything is sequential and allocation-order deterministic: two renders of
the same inputs are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Camera,
    GaussianSet,
    covariance_from_rs,
    gradient_proxy,
    project_to_screen,
    projection_jacobian,
    quaternion_rotation_vjp,
    quaternion_to_rotation,
    sh_basis,
    sh_basis_gradient,
    sigmoid,
    smallest_axis_index,
)


@dataclass
class RenderConfig:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0        # skip weights below this
    transmittance_floor: float = 1e-4        # stop blending once T drops below
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    deterministic: bool = True
    sh_degree: int = 3                       # active SH degree, ramped in training

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        # 0 is allowed: it disables the cutoff/floor for oracle comparisons.
        if not (0.0 <= self.alpha_cutoff < 1.0):
            raise ValueError("alpha_cutoff must be in [0, 1)")
        if not (0.0 <= self.transmittance_floor < 1.0):
            raise ValueError("transmittance_floor must be in [0, 1)")
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")


@dataclass
class FrameBuffer:
    """Rendered channels. color is composited over the background; pixels with
    alpha == 0 hold depth == 0 and grad_map == 0 by convention."""

    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W) alpha-weighted expected view-space depth
    alpha: np.ndarray      # (H, W)
    grad_map: np.ndarray   # (H, W, 3) alpha-blended camera-space proxies

    def to_image(self) -> np.ndarray:
        """Clamped [0, 1] color for write-out and metrics."""
        return np.clip(self.color, 0.0, 1.0)


@dataclass
class UpstreamGradients:
    """Per-pixel loss gradients fed to `backward`; omitted channels mean zero."""

    color: np.ndarray | None = None      # (H, W, 3)
    depth: np.ndarray | None = None      # (H, W)
    alpha: np.ndarray | None = None      # (H, W)
    grad_map: np.ndarray | None = None   # (H, W, 3)


@dataclass
class ParamGradients:
    """Loss gradients per Gaussian parameter plus densification statistics."""

    means: np.ndarray           # (N, 3)
    rotations: np.ndarray       # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray       # (N, 3, 16)
    screen_grad_norm: np.ndarray  # (N,) |dL/d mean2d| in half-image units
    hit_count: np.ndarray       # (N,) 1 where the Gaussian was rasterized

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(
            means=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            sh_coeffs=np.zeros((n, 3, 16)),
            screen_grad_norm=np.zeros(n),
            hit_count=np.zeros(n),
        )


def tile_binning(mean2d, cov2d, depth, width, height, tile_size, radius_sigma=3.0):
    """Assign Gaussians to the tiles their 3-sigma screen bound overlaps.

    Returns a list of index arrays, one per tile in row-major tile order,
    each sorted by ascending depth (stable: ties keep input order).
    """
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
    radii = radius_sigma * np.sqrt(np.maximum(_max_eigenvalue(cov2d), 0.0))
    return _tile_lists(mean2d, depth, radii, width, height, tile_size)


def _max_eigenvalue(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    return 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))


def _support_radii(cov2d, opacity, alpha_cutoff):
    """Screen radius beyond which the blend weight falls below the cutoff.

    With the cutoff disabled this extends far enough that dropped tails are
    below 1e-14, keeping the tiled render equal to an untiled one.
    """
    floor = max(alpha_cutoff, 1e-14)
    r_sq = 2.0 * np.log(np.maximum(opacity / floor, 1.0))
    return np.sqrt(r_sq * np.maximum(_max_eigenvalue(cov2d), 0.0))


def _binning_flat(mean2d, depth, radii, width, height, tile_size):
    """Depth-sorted flat entry list plus per-tile bounds (row-major tiles)."""
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(mean2d)) and np.all(np.isfinite(radii))):
        raise ValueError("non-finite projections")
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n_tiles = tiles_x * tiles_y
    entries_gid, entries_tile = _binning_entries(
        mean2d, radii, width, height, tile_size, tiles_x, tiles_y
    )
    if len(entries_gid) == 0:
        return np.empty(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64)
    rank = np.empty(len(depth), dtype=np.int64)
    rank[np.lexsort((np.arange(len(depth)), depth))] = np.arange(len(depth))
    order = np.argsort(entries_tile * len(depth) + rank[entries_gid], kind="stable")
    gid_sorted = entries_gid[order]
    bounds = np.searchsorted(entries_tile[order], np.arange(n_tiles + 1))
    return gid_sorted, bounds.astype(np.int64)


def _tile_lists(mean2d, depth, radii, width, height, tile_size):
    entries, bounds = _binning_flat(mean2d, depth, radii, width, height, tile_size)
    return [entries[bounds[t]:bounds[t + 1]] for t in range(len(bounds) - 1)]


def _binning_entries(mean2d, r3, width, height, tile_size, tiles_x, tiles_y):
    """Flat (gaussian_id, tile_id) pairs for every overlapped tile."""
    x, y = mean2d[:, 0], mean2d[:, 1]
    on_screen = (x + r3 > 0) & (x - r3 < width) & (y + r3 > 0) & (y - r3 < height)

    ids = np.flatnonzero(on_screen)
    if len(ids) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    tx0 = np.clip(np.floor((x[ids] - r3[ids]) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((x[ids] + r3[ids]) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((y[ids] - r3[ids]) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((y[ids] + r3[ids]) / tile_size), 0, tiles_y - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    e = np.arange(total)
    owner = np.searchsorted(offsets, e, side="right") - 1
    local = e - offsets[owner]
    lx = local % nx[owner]
    ly = local // nx[owner]
    tile = (ty0[owner] + ly) * tiles_x + (tx0[owner] + lx)
    return ids[owner], tile


@dataclass
class _Prepared:
    """Per-visible-Gaussian values shared by the forward and backward passes."""

    index: np.ndarray      # (M,) indices into the full set
    mean2d: np.ndarray     # (M, 2)
    conic: np.ndarray      # (M, 3) packed inverse cov2d (a, b, c)
    depth: np.ndarray      # (M,)
    opacity: np.ndarray    # (M,)
    color: np.ndarray      # (M, 3) unclamped SH color
    proxy_cam: np.ndarray  # (M, 3)
    entries: np.ndarray    # flat depth-sorted per-tile member rows
    bounds: np.ndarray     # (n_tiles + 1,) slice bounds into entries
    # extra state used only by backward
    view_means: np.ndarray
    cov2d: np.ndarray
    sigma: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    axis: np.ndarray

    def tile_members(self, t: int) -> np.ndarray:
        return self.entries[self.bounds[t]:self.bounds[t + 1]]


def _prepare(gaussians: GaussianSet, cam: Camera, cfg: RenderConfig) -> _Prepared | None:
    if len(gaussians) == 0:
        raise ValueError("cannot render an empty GaussianSet")
    proj = project_to_screen(gaussians.means, gaussians.rotations, gaussians.log_scales, cam)
    keep = proj.valid & np.isfinite(proj.mean2d).all(axis=1)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return None
    mean2d = proj.mean2d[idx]
    cov2d = proj.cov2d[idx]
    depth = proj.depth[idx]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=-1
    )
    offsets = gaussians.means[idx] - cam.position
    dist = np.linalg.norm(offsets, axis=1)
    dirs = offsets / dist[:, None]
    nb = (cfg.sh_degree + 1) ** 2
    color = np.einsum("ncb,nb->nc", gaussians.sh_coeffs[idx, :, :nb], sh_basis(dirs, cfg.sh_degree)) + 0.5
    proxy_world = gradient_proxy(gaussians.rotations[idx], gaussians.log_scales[idx])
    proxy_cam = proxy_world @ cam.world_to_view_rotation.T
    opacity = sigmoid(gaussians.opacity_logits[idx])
    radii = _support_radii(cov2d, opacity, cfg.alpha_cutoff)
    entries, bounds = _binning_flat(mean2d, depth, radii, cam.width, cam.height, cfg.tile_size)
    return _Prepared(
        index=idx,
        mean2d=mean2d,
        conic=conic,
        depth=depth,
        opacity=opacity,
        color=color,
        proxy_cam=proxy_cam,
        entries=entries,
        bounds=bounds,
        view_means=cam.world_to_view(gaussians.means[idx]),
        cov2d=cov2d,
        sigma=covariance_from_rs(gaussians.rotations[idx], gaussians.log_scales[idx]),
        dirs=dirs,
        dist=dist,
        axis=np.atleast_1d(smallest_axis_index(gaussians.log_scales[idx])),
    )


def _tile_blend(prep, members, px, py, cfg):
    """Weights and transmittances for one tile; all arrays are (G, P)."""
    u = prep.mean2d[members]
    d0 = px[None, :] - u[:, 0:1]
    d1 = py[None, :] - u[:, 1:2]
    ca, cb, cc = (prep.conic[members, i][:, None] for i in range(3))
    rho = (ca * d0 + 2.0 * cb * d1) * d0 + cc * d1 * d1
    e = np.exp(-0.5 * rho)
    w = prep.opacity[members][:, None] * e
    if cfg.alpha_cutoff > 0:
        ws = np.where(w >= cfg.alpha_cutoff, w, 0.0)
    else:
        ws = w
    tprev = np.cumprod(1.0 - ws, axis=0)
    tprev = np.vstack([np.ones((1, tprev.shape[1])), tprev[:-1]])
    blend = (ws > 0.0) & (tprev >= cfg.transmittance_floor) if cfg.alpha_cutoff > 0 or \
        cfg.transmittance_floor > 0 else np.ones_like(w, dtype=bool)
    wb = np.where(blend, w, 0.0)
    contrib = wb * tprev
    t_end = np.prod(1.0 - wb, axis=0)
    return d0, d1, e, w, blend, tprev, contrib, t_end


def _tile_slices(t, tiles_x, cfg, cam):
    ty, tx = divmod(t, tiles_x)
    x0 = tx * cfg.tile_size
    y0 = ty * cfg.tile_size
    x1 = min(x0 + cfg.tile_size, cam.width)
    y1 = min(y0 + cfg.tile_size, cam.height)
    cols = np.arange(x0, x1) + 0.5
    rows = np.arange(y0, y1) + 0.5
    gx = np.broadcast_to(cols, (y1 - y0, x1 - x0)).ravel()
    gy = np.repeat(rows, x1 - x0)
    return slice(y0, y1), slice(x0, x1), gx, gy


try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba unavailable
    _kernels = None

# Flip to False to run the vectorized numpy reference path instead of the
# JIT kernels; the test suite checks both produce the same images/gradients.
USE_FAST_KERNELS = _kernels is not None


def render(gaussians: GaussianSet, cam: Camera, cfg: RenderConfig | None = None) -> FrameBuffer:
    """Forward rasterization of all channels for one camera."""
    cfg = cfg or RenderConfig()
    h, w3 = cam.height, cam.width
    fb = FrameBuffer(
        color=np.tile(cfg.background, (h, w3, 1)),
        depth=np.zeros((h, w3)),
        alpha=np.zeros((h, w3)),
        grad_map=np.zeros((h, w3, 3)),
    )
    prep = _prepare(gaussians, cam, cfg)
    if prep is None:
        return fb
    tiles_x = -(-cam.width // cfg.tile_size)
    if USE_FAST_KERNELS and _kernels is not None:
        _kernels.forward_kernel(
            prep.entries, prep.bounds, tiles_x, cfg.tile_size, h, w3,
            prep.mean2d, prep.conic, prep.opacity, prep.depth, prep.color,
            prep.proxy_cam, cfg.alpha_cutoff, cfg.transmittance_floor,
            cfg.background, fb.color, fb.depth, fb.alpha, fb.grad_map,
        )
        return fb
    for t in range(len(prep.bounds) - 1):
        members = prep.tile_members(t)
        if len(members) == 0:
            continue
        ys, xs, gx, gy = _tile_slices(t, tiles_x, cfg, cam)
        _, _, _, _, _, _, contrib, t_end = _tile_blend(prep, members, gx, gy, cfg)
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        color = contrib.T @ prep.color[members] + t_end[:, None] * cfg.background
        fb.color[ys, xs] = color.reshape(shape + (3,))
        fb.depth[ys, xs] = (contrib.T @ prep.depth[members]).reshape(shape)
        fb.alpha[ys, xs] = (1.0 - t_end).reshape(shape)
        fb.grad_map[ys, xs] = (contrib.T @ prep.proxy_cam[members]).reshape(shape + (3,))
    return fb


def backward(
    gaussians: GaussianSet,
    cam: Camera,
    cfg: RenderConfig,
    upstream: UpstreamGradients,
) -> ParamGradients:
    """Analytic gradients of the rendered channels w.r.t. every Gaussian parameter.

    Recomputes the forward state per tile instead of caching it; the result
    matches central finite differences of the corresponding losses.
    """
    n = len(gaussians)
    grads = ParamGradients.zeros(n)
    h, w3 = cam.height, cam.width

    def channel(arr, shape):
        if arr is None:
            return None
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"upstream gradient shape {arr.shape} != {shape}")
        return arr

    u_color = channel(upstream.color, (h, w3, 3))
    u_depth = channel(upstream.depth, (h, w3))
    u_alpha = channel(upstream.alpha, (h, w3))
    u_grad = channel(upstream.grad_map, (h, w3, 3))

    prep = _prepare(gaussians, cam, cfg)
    if prep is None:
        return grads
    m = len(prep.index)

    g_alpha_raw = np.zeros(m)
    g_u = np.zeros((m, 2))
    g_lam = np.zeros((m, 3))      # packed dL/dLambda: (aa, ab, bb) full-matrix
    g_color = np.zeros((m, 3))
    g_z = np.zeros(m)
    g_proxy = np.zeros((m, 3))
    hit = np.zeros(m, dtype=bool)

    tiles_x = -(-cam.width // cfg.tile_size)
    if USE_FAST_KERNELS and _kernels is not None:
        dummy3 = np.zeros((1, 1, 3))
        dummy1 = np.zeros((1, 1))
        _kernels.backward_kernel(
            prep.entries, prep.bounds, tiles_x, cfg.tile_size, h, w3,
            prep.mean2d, prep.conic, prep.opacity, prep.depth, prep.color,
            prep.proxy_cam, cfg.alpha_cutoff, cfg.transmittance_floor,
            cfg.background,
            u_color is not None, u_depth is not None,
            u_alpha is not None, u_grad is not None,
            np.ascontiguousarray(u_color) if u_color is not None else dummy3,
            np.ascontiguousarray(u_depth) if u_depth is not None else dummy1,
            np.ascontiguousarray(u_alpha) if u_alpha is not None else dummy1,
            np.ascontiguousarray(u_grad) if u_grad is not None else dummy3,
            g_alpha_raw, g_u, g_lam, g_color, g_z, g_proxy, hit,
        )
        return _chain_to_parameters(
            gaussians, cam, cfg, grads, prep,
            g_alpha_raw, g_u, g_lam, g_color, g_z, g_proxy, hit,
        )
    for t in range(len(prep.bounds) - 1):
        members = prep.tile_members(t)
        if len(members) == 0:
            continue
        ys, xs, gx, gy = _tile_slices(t, tiles_x, cfg, cam)
        hit[members] = True
        d0, d1, e, w, blend, tprev, contrib, t_end = _tile_blend(prep, members, gx, gy, cfg)

        # scalar per (gaussian, pixel): upstream-projected channel values
        val = 0.0
        bg_tail = 0.0
        uC = uD = uG = None
        if u_color is not None:
            uC = u_color[ys, xs].reshape(-1, 3)
            val = prep.color[members] @ uC.T
            bg_tail = uC @ cfg.background
        if u_depth is not None:
            uD = u_depth[ys, xs].ravel()
            val = val + prep.depth[members][:, None] * uD[None, :]
        if u_grad is not None:
            uG = u_grad[ys, xs].reshape(-1, 3)
            val = val + prep.proxy_cam[members] @ uG.T
        if u_alpha is not None:
            bg_tail = bg_tail - u_alpha[ys, xs].ravel()
        if np.isscalar(val):
            val = np.zeros_like(w)
        q = val * contrib
        # suffix sums over nearer-to-farther axis, excluding self
        suffix = np.cumsum(q[::-1], axis=0)[::-1] - q
        tail = suffix + np.asarray(bg_tail * t_end)[None, :]
        one_minus_w = 1.0 - np.where(blend, w, 0.0)
        g_w = np.where(blend, val * tprev - tail / one_minus_w, 0.0)

        g_alpha_raw[members] += np.sum(g_w * e, axis=1)
        gw_w = g_w * w
        ca, cb, cc = (prep.conic[members, i][:, None] for i in range(3))
        g_u[members, 0] += np.sum(gw_w * (ca * d0 + cb * d1), axis=1)
        g_u[members, 1] += np.sum(gw_w * (cb * d0 + cc * d1), axis=1)
        gamma = -0.5 * gw_w
        g_lam[members, 0] += np.sum(gamma * d0 * d0, axis=1)
        g_lam[members, 1] += np.sum(gamma * d0 * d1, axis=1)
        g_lam[members, 2] += np.sum(gamma * d1 * d1, axis=1)
        if uC is not None:
            g_color[members] += contrib @ uC
        if uD is not None:
            g_z[members] += contrib @ uD
        if uG is not None:
            g_proxy[members] += contrib @ uG

    return _chain_to_parameters(
        gaussians, cam, cfg, grads, prep,
        g_alpha_raw, g_u, g_lam, g_color, g_z, g_proxy, hit,
    )


def _chain_to_parameters(gaussians, cam, cfg, grads, prep,
                         g_alpha_raw, g_u, g_lam, g_color, g_z, g_proxy, hit):
    """Chain screen-space accumulators back to the raw Gaussian parameters."""
    m = len(prep.index)
    W = cam.world_to_view_rotation
    rot = gaussians.rotations[prep.index]
    lam = np.exp(gaussians.log_scales[prep.index])
    R = quaternion_to_rotation(rot)
    A = R * lam[:, None, :]

    # Lambda = cov2d^{-1}: dL/dV = -Lambda G_Lambda Lambda
    G_lam_mat = np.empty((m, 2, 2))
    G_lam_mat[:, 0, 0] = g_lam[:, 0]
    G_lam_mat[:, 0, 1] = g_lam[:, 1]
    G_lam_mat[:, 1, 0] = g_lam[:, 1]
    G_lam_mat[:, 1, 1] = g_lam[:, 2]
    lam_mat = np.empty((m, 2, 2))
    lam_mat[:, 0, 0] = prep.conic[:, 0]
    lam_mat[:, 0, 1] = prep.conic[:, 1]
    lam_mat[:, 1, 0] = prep.conic[:, 1]
    lam_mat[:, 1, 1] = prep.conic[:, 2]
    G_V = -lam_mat @ G_lam_mat @ lam_mat

    J = projection_jacobian(prep.view_means, cam)
    M_JW = J @ W
    G_Sigma = np.swapaxes(M_JW, 1, 2) @ G_V @ M_JW
    G_M = 2.0 * G_V @ M_JW @ prep.sigma
    G_J = G_M @ W.T

    vx, vy, vz = prep.view_means.T
    g_view = np.zeros((m, 3))
    g_view[:, 0] = -G_J[:, 0, 2] * cam.fx / vz**2
    g_view[:, 1] = -G_J[:, 1, 2] * cam.fy / vz**2
    g_view[:, 2] = (
        -G_J[:, 0, 0] * cam.fx / vz**2
        - G_J[:, 1, 1] * cam.fy / vz**2
        + G_J[:, 0, 2] * 2.0 * cam.fx * vx / vz**3
        + G_J[:, 1, 2] * 2.0 * cam.fy * vy / vz**3
    )
    g_view += np.einsum("nij,ni->nj", J, g_u)  # mean2d shares the Jacobian
    g_view[:, 2] += g_z
    g_mean = g_view @ W

    # SH color: coefficient gradients plus the view-direction path to the mean
    nb = (cfg.sh_degree + 1) ** 2
    B = sh_basis(prep.dirs, cfg.sh_degree)
    g_sh = np.zeros((m, 3, 16))
    g_sh[:, :, :nb] = g_color[:, :, None] * B[:, None, :]
    Gb = sh_basis_gradient(prep.dirs, cfg.sh_degree)
    coeff = np.einsum("nc,ncb->nb", g_color, gaussians.sh_coeffs[prep.index, :, :nb])
    g_dir = np.einsum("nb,nbd->nd", coeff, Gb)
    g_dir -= np.sum(g_dir * prep.dirs, axis=1, keepdims=True) * prep.dirs
    g_mean += g_dir / prep.dist[:, None]

    # covariance path: Sigma = A A^T with A = R diag(exp(s))
    G_A = 2.0 * G_Sigma @ A
    g_log_scale = np.einsum("nij,nij->nj", G_A, A)
    G_R = G_A * lam[:, None, :]
    # proxy path: camera proxy = W R e_axis
    g_pw = g_proxy @ W
    G_R[np.arange(m), :, prep.axis] += g_pw
    g_quat = quaternion_rotation_vjp(rot, G_R)

    oper = prep.opacity
    g_logit = g_alpha_raw * oper * (1.0 - oper)

    idx = prep.index
    grads.means[idx] = g_mean
    grads.rotations[idx] = g_quat
    grads.log_scales[idx] = g_log_scale
    grads.opacity_logits[idx] = g_logit
    grads.sh_coeffs[idx] = g_sh
    grads.screen_grad_norm[idx] = np.linalg.norm(
        g_u * np.array([cam.width / 2.0, cam.height / 2.0]), axis=1
    )
    grads.hit_count[idx] = hit.astype(np.float64)
    return grads
