"""Density field, depth-map SDF estimation, SDF grids, and level-set sampling.

The scene's opacity-weighted Gaussian density underlies everything here, but
the signed distance itself is estimated from rendered depth maps: for a point
visible in some view, the estimate is its view depth minus the (alpha
normalized) surface depth at its projection.  Sign convention, fixed project
wide: positive = behind the visible surface (inside), negative = in front
(outside).  Estimates from several views are fused by minimum absolute value,
the most conservative choice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianSet, gradient_proxy, precision_from_rs
from .rasterizer import FrameBuffer

VISIBILITY_ALPHA = 0.5     # a pixel counts as surface when blended alpha exceeds this
DEFAULT_BISECTIONS = 8


@dataclass
class SdfGrid:
    bounds: np.ndarray       # (2, 3) [min, max] corners
    resolution: tuple        # (nx, ny, nz)
    values: np.ndarray       # signed distance estimates, sentinel where unobserved

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        self.resolution = tuple(int(r) for r in self.resolution)
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError("empty grid bounds")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.resolution)

    @property
    def sentinel(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def axes(self):
        return tuple(
            np.linspace(self.bounds[0][d], self.bounds[1][d], self.resolution[d])
            for d in range(3)
        )

    def vertex_positions(self) -> np.ndarray:
        ax, ay, az = self.axes()
        gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass
class OrientedPointCloud:
    positions: np.ndarray    # (N, 3)
    normals: np.ndarray      # (N, 3) unit

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.normals):
            raise ValueError("positions/normals length mismatch")
        if len(self.normals):
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")

    def __len__(self):
        return len(self.positions)


def _gaussian_terms(points, gaussians, mahalanobis_cutoff=None):
    """Yield (weight_g(points), gaussian index) for every Gaussian."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    prec = precision_from_rs(gaussians.rotations, gaussians.log_scales)
    alphas = gaussians.opacities
    for g in range(len(gaussians)):
        d = points - gaussians.means[g]
        q = np.einsum("pi,ij,pj->p", d, prec[g], d)
        if mahalanobis_cutoff is not None:
            w = np.where(q <= mahalanobis_cutoff**2, alphas[g] * np.exp(-0.5 * q), 0.0)
        else:
            w = alphas[g] * np.exp(-0.5 * q)
        yield w, g


def density(points, gaussians: GaussianSet, mahalanobis_cutoff=None) -> np.ndarray:
    """Opacity-weighted sum of Gaussian values; accepts (3,) or (P, 3).

    With `mahalanobis_cutoff` set (e.g. 4), Gaussians beyond that distance are
    skipped; the dropped mass is below exp(-8) ~ 3.4e-4 per unit-alpha Gaussian.
    """
    single = np.asarray(points).ndim == 1
    out = np.zeros(1 if single else len(points))
    for w, _ in _gaussian_terms(points, gaussians, mahalanobis_cutoff):
        out += w
    return float(out[0]) if single else out


def density_gradient(points, gaussians: GaussianSet) -> np.ndarray:
    """Analytic spatial gradient of `density`."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    prec = precision_from_rs(gaussians.rotations, gaussians.log_scales)
    out = np.zeros_like(pts)
    for w, g in _gaussian_terms(pts, gaussians):
        d = pts - gaussians.means[g]
        out += w[:, None] * (-(d @ prec[g].T))
    return out[0] if single else out


def blended_proxy_direction(points, gaussians: GaussianSet) -> np.ndarray:
    """Density-weighted mean of per-Gaussian proxies; NOT normalized."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    proxies = gradient_proxy(gaussians.rotations, gaussians.log_scales)
    out = np.zeros_like(pts)
    for w, g in _gaussian_terms(pts, gaussians):
        out += w[:, None] * proxies[g]
    return out


def _bilinear(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an (H, W) map at continuous pixel coordinates (centers at +0.5)."""
    h, w = grid.shape
    xi = np.clip(x - 0.5, 0.0, w - 1.0)
    yi = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(xi).astype(np.int64)
    y0 = np.floor(yi).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xi - x0
    fy = yi - y0
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def estimate_sdf(points, depth_renders, max_depth_spread: float | None = 2.0):
    """Depth-difference SDF estimate fused over views by minimum |value|.

    `depth_renders` is a list of (FrameBuffer, Camera) pairs rendered from the
    current Gaussians.  A view qualifies for a point when the projection lands
    inside the image, the blended alpha there exceeds 0.5, and the view depth
    lies inside (near, far).  Views whose surface depth varies by more than
    `max_depth_spread` pixel-sizes across the bilinear footprint are rejected
    as grazing: their estimates have tiny magnitudes but unreliable signs, and
    the minimum-|value| fusion would latch onto them (pass None to disable).
    Returns (values, observed); `values` is meaningless where `observed` is
    False.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.zeros(len(pts))
    best_abs = np.full(len(pts), np.inf)
    observed = np.zeros(len(pts), dtype=bool)
    for fb, cam in depth_renders:
        if not isinstance(fb, FrameBuffer):
            raise TypeError("depth_renders must contain (FrameBuffer, Camera) pairs")
        v = cam.world_to_view(pts)
        z = v[:, 2]
        ok = (z > cam.near) & (z < cam.far)
        px = np.where(ok, cam.fx * v[:, 0] / np.where(ok, z, 1.0) + cam.cx, -1.0)
        py = np.where(ok, cam.fy * v[:, 1] / np.where(ok, z, 1.0) + cam.cy, -1.0)
        ok &= (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        if not ok.any():
            continue
        alpha = _bilinear(fb.alpha, px, py)
        ok &= alpha > VISIBILITY_ALPHA
        if ok.any() and max_depth_spread is not None:
            ok &= _depth_spread_ok(fb, cam, px, py, z, max_depth_spread)
        if not ok.any():
            continue
        surf = _bilinear(fb.depth, px, py) / np.where(ok, alpha, 1.0)
        est = z - surf
        better = ok & (np.abs(est) < best_abs)
        best[better] = est[better]
        best_abs[better] = np.abs(est[better])
        observed |= ok
    return best, observed


def _depth_spread_ok(fb, cam, px, py, z, max_spread):
    """Keep views whose normalized surface depth is locally flat.

    All four bilinear taps must be solid (alpha above the visibility
    threshold) and their alpha-normalized depths must agree within
    `max_spread` times the world size of one pixel at the query depth.
    """
    h, w = fb.alpha.shape
    xi = np.clip(px - 0.5, 0.0, w - 1.0)
    yi = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.floor(xi).astype(np.int64)
    y0 = np.floor(yi).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a = np.stack([fb.alpha[y0, x0], fb.alpha[y0, x1], fb.alpha[y1, x0], fb.alpha[y1, x1]])
    d = np.stack([fb.depth[y0, x0], fb.depth[y0, x1], fb.depth[y1, x0], fb.depth[y1, x1]])
    solid = np.all(a > VISIBILITY_ALPHA, axis=0)
    surf = d / np.maximum(a, 1e-12)
    spread = surf.max(axis=0) - surf.min(axis=0)
    pixel_world = z / max(cam.fx, cam.fy)
    return solid & (spread <= max_spread * pixel_world)


def empty_space_mask(points, depth_renders, empty_alpha=0.1) -> np.ndarray:
    """True where some view sees the point against (near-)background.

    A ray that hits nothing is direct evidence the point it passes through is
    empty; this resolves points that are occluded in every qualifying view
    (which would otherwise read as "behind the surface" = inside).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    empty = np.zeros(len(pts), dtype=bool)
    for fb, cam in depth_renders:
        v = cam.world_to_view(pts)
        z = v[:, 2]
        ok = (z > cam.near) & (z < cam.far)
        px = cam.fx * v[:, 0] / np.where(ok, z, 1.0) + cam.cx
        py = cam.fy * v[:, 1] / np.where(ok, z, 1.0) + cam.cy
        ok &= (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        if not ok.any():
            continue
        alpha = _bilinear(fb.alpha, px, py)
        empty |= ok & (alpha < empty_alpha)
    return empty


def build_sdf_grid(gaussians, depth_renders, bounds, resolution, empty_alpha=0.1) -> SdfGrid:
    """Evaluate the SDF estimate at every grid vertex.

    Unobserved vertices hold a +(bounds diagonal) sentinel.  Vertices that
    some view sees against background are forced outside (-diagonal): the
    depth-difference estimate reads "behind the surface" for occluded free
    space, and the empty-ray evidence overrides it.  Deterministic given its
    inputs.  `gaussians` is unused today; the grid is a pure function of the
    depth renders (kept in the signature for symmetry with the sampling API).
    """
    resolution = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
    grid = SdfGrid(bounds=bounds, resolution=resolution,
                   values=np.zeros(resolution))
    pts = grid.vertex_positions().reshape(-1, 3)
    values, observed = estimate_sdf(pts, depth_renders)
    values = np.where(observed, values, grid.sentinel)
    empty = empty_space_mask(pts, depth_renders, empty_alpha)
    values = np.where(empty & (values > 0), -grid.sentinel, values)
    grid.values = values.reshape(resolution)
    return grid


def _mean_smallest_scale(gaussians: GaussianSet) -> float:
    return float(np.exp(gaussians.log_scales).min(axis=1).mean())


def sample_level_set(
    gaussians: GaussianSet,
    depth_renders,
    n: int,
    seed: int = 0,
    band: float | None = None,
    bisection_steps: int = DEFAULT_BISECTIONS,
    max_rounds: int = 12,
) -> OrientedPointCloud:
    """Oriented points on the zero level set of the estimated SDF.

    Candidates are Gaussian means jittered by their covariances; those with
    |f| inside the band are pushed to the zero crossing by bisection along
    the local blended proxy direction.  Normals are the blended proxies,
    sign-aligned to point outward (toward decreasing f).
    """
    if n < 1:
        raise ValueError("need n >= 1 sample points")
    if len(gaussians) == 0:
        raise ValueError("empty GaussianSet")
    rng = np.random.default_rng(seed)
    band = 0.5 * _mean_smallest_scale(gaussians) if band is None else float(band)

    from .core import quaternion_to_rotation

    R = quaternion_to_rotation(gaussians.rotations)
    A = R * np.exp(gaussians.log_scales)[:, None, :]

    kept_pts = []
    kept_nrm = []
    total = 0
    for _ in range(max_rounds):
        if total >= n:
            break
        batch = max(2 * (n - total), 1024)
        gi = rng.integers(0, len(gaussians), size=batch)
        xi = rng.standard_normal((batch, 3))
        cand = gaussians.means[gi] + np.einsum("nij,nj->ni", A[gi], xi)
        f, obs = estimate_sdf(cand, depth_renders)
        keep = obs & (np.abs(f) < band)
        if not keep.any():
            continue
        p = cand[keep]
        f = f[keep]
        nu = blended_proxy_direction(p, gaussians)
        norms = np.linalg.norm(nu, axis=1)
        good = norms > 1e-12
        p, f, nu = p[good], f[good], nu[good] / norms[good][:, None]

        # bracket the crossing along +/- nu, then bisect
        h = max(band, 1e-9)
        f_plus, obs_p = estimate_sdf(p + h * nu, depth_renders)
        f_minus, obs_m = estimate_sdf(p - h * nu, depth_renders)
        lo = p.copy()
        hi = p.copy()
        flo = f.copy()
        use_plus = obs_p & (np.sign(f_plus) != np.sign(f)) & (f_plus != f)
        use_minus = ~use_plus & obs_m & (np.sign(f_minus) != np.sign(f))
        hi[use_plus] = p[use_plus] + h * nu[use_plus]
        lo[use_minus] = p[use_minus] - h * nu[use_minus]
        hi[use_minus] = p[use_minus]
        flo[use_minus] = f_minus[use_minus]
        active = use_plus | use_minus
        for _ in range(bisection_steps):
            if not active.any():
                break
            mid = 0.5 * (lo + hi)
            fm, obs_mid = estimate_sdf(mid[active], depth_renders)
            sub = np.flatnonzero(active)
            same = np.sign(fm) == np.sign(flo[sub])
            lo[sub[same]] = mid[sub[same]]
            flo[sub[same]] = fm[same]
            hi[sub[~same]] = mid[sub[~same]]
            active[sub[~obs_mid]] = False
        final = np.where(active[:, None], 0.5 * (lo + hi), p)

        # orient outward: f decreases along the outward normal; probe far
        # enough out that the slope (about 1) clears the estimator noise
        nu_final = blended_proxy_direction(final, gaussians)
        norms = np.linalg.norm(nu_final, axis=1)
        good = norms > 1e-12
        final, nu_final = final[good], nu_final[good] / norms[good][:, None]
        delta = 4.0 * band
        f_ahead, _ = estimate_sdf(final + delta * nu_final, depth_renders)
        f_back, _ = estimate_sdf(final - delta * nu_final, depth_renders)
        flip = (f_ahead - f_back) > 0
        nu_final[flip] *= -1.0

        kept_pts.append(final)
        kept_nrm.append(nu_final)
        total += len(final)

    if total < max(1, n // 10):
        raise RuntimeError(
            f"degenerate geometry: only {total} of the requested {n} level-set "
            "samples survived"
        )
    positions = np.concatenate(kept_pts)[:n]
    normals = np.concatenate(kept_nrm)[:n]
    return OrientedPointCloud(positions=positions, normals=normals)
