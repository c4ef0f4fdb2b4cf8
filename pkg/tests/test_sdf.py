import numpy as np
import pytest

from splatnorm.core import Camera, Gaussian, GaussianSet
from splatnorm.rasterizer import FrameBuffer
from splatnorm.scenes import orbit_cameras
from splatnorm.sdf import (
    OrientedPointCloud,
    SdfGrid,
    build_sdf_grid,
    density,
    density_gradient,
    estimate_sdf,
    sample_level_set,
)

from util import random_scene, render_depth_set, sphere_splats


def single_gaussian_set(alpha_logit=0.0):
    g = Gaussian(mean=[0.2, -0.1, 0.4], rotation=[1, 0, 0, 0], log_scale=[0, 0, 0],
                 opacity_logit=alpha_logit)
    return GaussianSet.from_gaussians([g])


class TestDensity:
    def test_at_mean_equals_alpha(self):
        gs = single_gaussian_set(alpha_logit=0.7)
        assert density(gs.means[0], gs) == pytest.approx(gs.opacities[0], rel=1e-12)

    def test_coincident_pair_doubles(self):
        g = Gaussian(mean=[0, 0, 0], rotation=[1, 0, 0, 0], log_scale=[0, 0, 0],
                     opacity_logit=0.3)
        gs = GaussianSet.from_gaussians([g, g])
        assert density(np.zeros(3), gs) == pytest.approx(2 * g.opacity, rel=1e-12)

    def test_matches_sum_oracle(self):
        gs = random_scene(41, n=50)
        rng = np.random.default_rng(42)
        points = rng.uniform(-0.6, 0.6, size=(20, 3))
        got = density(points, gs)
        # exhaustive per-Gaussian summation with dense inverses
        from splatnorm.core import covariance_from_rs

        covs = covariance_from_rs(gs.rotations, gs.log_scales)
        alphas = gs.opacities
        for p, value in zip(points, got):
            acc = 0.0
            for g in range(len(gs)):
                d = p - gs.means[g]
                acc += alphas[g] * np.exp(-0.5 * d @ np.linalg.inv(covs[g]) @ d)
            assert value == pytest.approx(acc, abs=1e-3, rel=1e-9)

    def test_mahalanobis_cutoff_error_bound(self):
        gs = random_scene(7, n=30)
        rng = np.random.default_rng(1)
        points = rng.uniform(-0.8, 0.8, size=(40, 3))
        exact = density(points, gs)
        cut = density(points, gs, mahalanobis_cutoff=4.0)
        assert np.all(np.abs(exact - cut) < 3.4e-4 * len(gs))

    def test_linear_in_alpha(self):
        gs = random_scene(3, n=5)
        p = np.array([0.1, 0.0, 0.2])
        base = density(p, gs)
        from splatnorm.core import inverse_sigmoid

        bumped = GaussianSet(
            means=gs.means, rotations=gs.rotations, log_scales=gs.log_scales,
            opacity_logits=gs.opacity_logits.copy(), sh_coeffs=gs.sh_coeffs,
            scene_bounds=gs.scene_bounds,
        )
        a0 = bumped.opacities[0]
        bumped.opacity_logits[0] = float(inverse_sigmoid(min(0.999, 2 * a0)))
        d2 = density(p, bumped)
        # doubling alpha_0 adds exactly one extra copy of its contribution
        solo = GaussianSet.from_gaussians([Gaussian(
            mean=gs.means[0], rotation=gs.rotations[0], log_scale=gs.log_scales[0],
            opacity_logit=gs.opacity_logits[0])])
        assert d2 - base == pytest.approx(density(p, solo) * (min(0.999, 2 * a0) / a0 - 1.0),
                                          rel=1e-9)


class TestDensityGradient:
    def test_zero_at_lone_mean(self):
        gs = single_gaussian_set()
        np.testing.assert_allclose(density_gradient(gs.means[0], gs), 0.0, atol=1e-12)

    def test_isotropic_closed_form(self):
        g = Gaussian(mean=[0, 0, 0], rotation=[1, 0, 0, 0], log_scale=[0, 0, 0],
                     opacity_logit=100.0)  # alpha ~ 1
        gs = GaussianSet.from_gaussians([g])
        grad = density_gradient(np.array([1.0, 0.0, 0.0]), gs)
        np.testing.assert_allclose(grad, [-np.exp(-0.5), 0.0, 0.0], atol=1e-9)

    def test_matches_finite_differences_100_pairs(self):
        eps = 1e-5
        rng = np.random.default_rng(77)
        for trial in range(10):
            gs = random_scene(trial, n=8)
            points = rng.uniform(-0.5, 0.5, size=(10, 3))
            grad = density_gradient(points, gs)
            for k, p in enumerate(points):
                fd = np.zeros(3)
                for a in range(3):
                    pp, pm = p.copy(), p.copy()
                    pp[a] += eps
                    pm[a] -= eps
                    fd[a] = (density(pp, gs) - density(pm, gs)) / (2 * eps)
                denom = max(np.linalg.norm(fd), 1e-8)
                assert np.linalg.norm(grad[k] - fd) / denom < 1e-4


def plane_render(depth_value=2.0, alpha_value=1.0, size=32):
    cam = Camera(fx=40, fy=40, cx=size / 2, cy=size / 2, width=size, height=size,
                 world_to_view_rotation=np.eye(3), world_to_view_translation=np.zeros(3),
                 near=0.05, far=50.0)
    fb = FrameBuffer(
        color=np.zeros((size, size, 3)),
        depth=np.full((size, size), depth_value * alpha_value),
        alpha=np.full((size, size), alpha_value),
        grad_map=np.zeros((size, size, 3)),
    )
    return fb, cam


class TestEstimateSdf:
    def test_on_surface_zero(self):
        renders = [plane_render(2.0)]
        val, obs = estimate_sdf(np.array([[0.0, 0.0, 2.0]]), renders)
        assert obs[0]
        assert val[0] == pytest.approx(0.0, abs=1e-9)

    def test_in_front_is_negative(self):
        renders = [plane_render(2.0)]
        val, obs = estimate_sdf(np.array([[0.0, 0.0, 1.9]]), renders)
        assert obs[0]
        assert val[0] == pytest.approx(-0.1, abs=1e-9)

    def test_behind_is_positive_and_alpha_normalized(self):
        renders = [plane_render(2.0, alpha_value=0.8)]  # depth channel holds 1.6
        val, obs = estimate_sdf(np.array([[0.0, 0.0, 2.5]]), renders)
        assert obs[0]
        assert val[0] == pytest.approx(0.5, abs=1e-9)

    def test_sign_flips_crossing_the_surface(self):
        renders = [plane_render(2.0)]
        pts = np.array([[0.0, 0.0, z] for z in (1.5, 1.99, 2.01, 2.5)])
        val, obs = estimate_sdf(pts, renders)
        assert obs.all()
        assert np.all(val[:2] < 0) and np.all(val[2:] > 0)

    def test_outside_image_unobserved(self):
        renders = [plane_render(2.0)]
        val, obs = estimate_sdf(np.array([[10.0, 0.0, 2.0]]), renders)
        assert not obs[0]

    def test_low_alpha_unobserved(self):
        renders = [plane_render(2.0, alpha_value=0.3)]
        _, obs = estimate_sdf(np.array([[0.0, 0.0, 2.0]]), renders)
        assert not obs[0]

    def test_outside_depth_range_unobserved(self):
        renders = [plane_render(2.0)]
        _, obs = estimate_sdf(np.array([[0.0, 0.0, 0.01]]), renders)
        assert not obs[0]

    def test_min_abs_fusion_across_views(self):
        renders = [plane_render(2.0), plane_render(1.95)]
        val, obs = estimate_sdf(np.array([[0.0, 0.0, 1.9]]), renders)
        assert val[0] == pytest.approx(-0.05, abs=1e-9)


@pytest.fixture(scope="module")
def sphere_setup():
    gs = sphere_splats(n=6000, sigma_t=0.016, sigma_n=0.0035)
    cams = orbit_cameras(20, 128, seed=11)
    return gs, render_depth_set(gs, cams)


class TestSphereSdf:
    def test_near_zero_on_surface(self, sphere_setup):
        gs, renders = sphere_setup
        rng = np.random.default_rng(0)
        d = rng.normal(size=(300, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        val, obs = estimate_sdf(0.5 * d, renders)
        frac = np.mean(np.abs(val[obs]) < 0.02 * 0.5)
        assert obs.mean() > 0.9
        assert frac >= 0.9

    def test_sign_inside_outside(self, sphere_setup):
        gs, renders = sphere_setup
        rng = np.random.default_rng(1)
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        v_in, o_in = estimate_sdf(0.42 * d, renders)
        v_out, o_out = estimate_sdf(0.58 * d, renders)
        assert np.mean(v_in[o_in] > 0) > 0.9
        assert np.mean(v_out[o_out] < 0) > 0.9


class TestSdfGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            SdfGrid(bounds=[[0, 0, 0], [1, 1, 1]], resolution=(1, 4, 4), values=np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            SdfGrid(bounds=[[1, 0, 0], [0, 1, 1]], resolution=(2, 2, 2), values=np.zeros((2, 2, 2)))

    def test_outside_frusta_all_sentinel(self, sphere_setup):
        gs, renders = sphere_setup
        grid = build_sdf_grid(gs, renders, bounds=[[100, 100, 100], [101, 101, 101]],
                              resolution=(4, 4, 4))
        np.testing.assert_allclose(grid.values, grid.sentinel)

    def test_deterministic(self, sphere_setup):
        gs, renders = sphere_setup
        kw = dict(bounds=[[-0.7] * 3, [0.7] * 3], resolution=(16, 16, 16))
        a = build_sdf_grid(gs, renders, **kw)
        b = build_sdf_grid(gs, renders, **kw)
        assert np.array_equal(a.values, b.values)

    def _crossings(self, grid):
        """World positions of zero crossings along grid edges, with unobserved
        sentinels treated as outside the way the mesher does."""
        vals = np.where(grid.values >= 0.999 * grid.sentinel, -grid.sentinel, grid.values)
        axes = grid.axes()
        pts = grid.vertex_positions()
        out = []
        for axis in range(3):
            v0 = vals
            v1 = np.roll(vals, -1, axis=axis)
            sl = [slice(None)] * 3
            sl[axis] = slice(0, -1)
            v0 = v0[tuple(sl)]
            v1 = v1[tuple(sl)]
            change = np.sign(v0) != np.sign(v1)
            idx = np.argwhere(change)
            if len(idx) == 0:
                continue
            t = v0[change] / (v0[change] - v1[change])
            p0 = pts[tuple(sl)][change]
            step = np.zeros(3)
            step[axis] = axes[axis][1] - axes[axis][0]
            out.append(p0 + t[:, None] * step)
        return np.concatenate(out) if out else np.zeros((0, 3))

    def test_sphere_crossings_near_surface(self, sphere_setup):
        gs, renders = sphere_setup
        grid = build_sdf_grid(gs, renders, bounds=[[-0.72] * 3, [0.72] * 3],
                              resolution=(64, 64, 64))
        crossings = self._crossings(grid)
        assert len(crossings) > 100
        cell = 1.44 / 63
        err = np.abs(np.linalg.norm(crossings, axis=1) - 0.5)
        assert np.mean(err <= cell) >= 0.95

    def test_resolution_doubling_consistency(self, sphere_setup):
        gs, renders = sphere_setup
        bounds = [[-0.72] * 3, [0.72] * 3]
        coarse = build_sdf_grid(gs, renders, bounds=bounds, resolution=(32, 32, 32))
        fine = build_sdf_grid(gs, renders, bounds=bounds, resolution=(64, 64, 64))
        pc = self._crossings(coarse)
        pf = self._crossings(fine)
        from scipy.spatial import cKDTree

        d, _ = cKDTree(pf).query(pc)
        coarse_cell = 1.44 / 31
        assert np.quantile(d, 0.99) <= coarse_cell


class TestSampleLevelSet:
    def test_sphere_radii_and_normals(self, sphere_setup):
        gs, renders = sphere_setup
        cloud = sample_level_set(gs, renders, n=600, seed=3)
        assert len(cloud) >= 540
        radii = np.linalg.norm(cloud.positions, axis=1)
        assert np.mean(np.abs(radii - 0.5) <= 0.02 * 0.5) >= 0.9
        true_n = cloud.positions / radii[:, None]
        cos = np.abs(np.sum(cloud.normals * true_n, axis=1))
        assert cos.mean() >= 0.95
        # oriented outward, not just aligned
        signed = np.sum(cloud.normals * true_n, axis=1)
        assert np.mean(signed > 0) > 0.9

    def test_zero_samples_rejected(self, sphere_setup):
        gs, renders = sphere_setup
        with pytest.raises(ValueError):
            sample_level_set(gs, renders, n=0)

    def test_degenerate_geometry_error(self, sphere_setup):
        gs, _ = sphere_setup
        blind = [plane_render(2.0, alpha_value=0.0)]
        with pytest.raises(RuntimeError, match="degenerate"):
            sample_level_set(gs, blind, n=100, seed=0, max_rounds=2)

    def test_unit_normals_enforced(self):
        with pytest.raises(ValueError):
            OrientedPointCloud(positions=np.zeros((2, 3)), normals=np.ones((2, 3)))
