"""Finite-difference validation of the analytic backward pass.

Cutoffs are disabled here: the alpha cutoff and transmittance floor introduce
measure-zero kinks where central differences are meaningless.  Acceptance
criterion 1 re-runs this check over 20 seeded scenes.
"""
import numpy as np
import pytest

from splatnorm.core import GaussianSet
from splatnorm.rasterizer import RenderConfig, UpstreamGradients, backward, render

from util import random_scene, view_camera

PARAM_FIELDS = ["means", "rotations", "log_scales", "opacity_logits", "sh_coeffs"]


def clone(gs):
    return GaussianSet(
        means=gs.means.copy(), rotations=gs.rotations.copy(),
        log_scales=gs.log_scales.copy(), opacity_logits=gs.opacity_logits.copy(),
        sh_coeffs=gs.sh_coeffs.copy(), scene_bounds=gs.scene_bounds.copy(),
    )


def l1_losses(fb, targets):
    """Mean absolute error of each channel against a fixed random target."""
    return {
        "color": np.mean(np.abs(fb.color - targets["color"])),
        "depth": np.mean(np.abs(fb.depth - targets["depth"])),
        "alpha": np.mean(np.abs(fb.alpha - targets["alpha"])),
        "grad_map": np.mean(np.abs(fb.grad_map - targets["grad_map"])),
    }


def l1_upstreams(fb, targets):
    return {
        "color": UpstreamGradients(color=np.sign(fb.color - targets["color"]) / fb.color.size),
        "depth": UpstreamGradients(depth=np.sign(fb.depth - targets["depth"]) / fb.depth.size),
        "alpha": UpstreamGradients(alpha=np.sign(fb.alpha - targets["alpha"]) / fb.alpha.size),
        "grad_map": UpstreamGradients(grad_map=np.sign(fb.grad_map - targets["grad_map"]) / fb.grad_map.size),
    }


def random_targets(seed, cam):
    rng = np.random.default_rng(seed + 987)
    return {
        "color": rng.uniform(0, 1, (cam.height, cam.width, 3)),
        "depth": rng.uniform(0, 3, (cam.height, cam.width)),
        "alpha": rng.uniform(0, 1, (cam.height, cam.width)),
        "grad_map": rng.uniform(-1, 1, (cam.height, cam.width, 3)),
    }


def fd_check(seed, n=6, eps=1e-4, tol=1e-3):
    gs = random_scene(seed, n=n)
    cam = view_camera(azimuth=0.5 * seed + 0.2, elevation=0.1 * ((seed % 5) - 2))
    cfg = RenderConfig(alpha_cutoff=0.0, transmittance_floor=0.0,
                       background=np.array([0.15, 0.25, 0.35]))
    targets = random_targets(seed, cam)
    fb = render(gs, cam, cfg)
    ups = l1_upstreams(fb, targets)
    analytic = {ch: backward(gs, cam, cfg, up) for ch, up in ups.items()}

    worst = 0.0
    for field in PARAM_FIELDS:
        arr = getattr(gs, field)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            plus, minus = clone(gs), clone(gs)
            getattr(plus, field)[ix] += eps
            getattr(minus, field)[ix] -= eps
            lp = l1_losses(render(plus, cam, cfg), targets)
            lm = l1_losses(render(minus, cam, cfg), targets)
            for ch in lp:
                fd = (lp[ch] - lm[ch]) / (2 * eps)
                got = getattr(analytic[ch], field)[ix]
                rel = abs(got - fd) / max(1e-6, abs(fd))
                worst = max(worst, rel)
                assert rel < tol, (
                    f"{field}{ix} channel={ch}: analytic={got:.6e} fd={fd:.6e} rel={rel:.2e}"
                )
    return worst


@pytest.mark.parametrize("seed", [0, 5])
def test_gradients_match_finite_differences(seed):
    fd_check(seed, n=6)


def test_zero_upstream_gives_zero_gradients():
    gs = random_scene(3, n=5)
    cam = view_camera()
    grads = backward(gs, cam, RenderConfig(), UpstreamGradients())
    for field in PARAM_FIELDS:
        assert np.all(getattr(grads, field) == 0.0)


def test_fully_occluded_gaussian_gets_zero_gradient():
    # A far Gaussian behind an opaque near one: transmittance hits the floor first.
    from splatnorm.core import Gaussian

    front = Gaussian(mean=[0, 0, 1.0], rotation=[1, 0, 0, 0],
                     log_scale=np.log(5.0) * np.ones(3), opacity_logit=30.0)
    back = Gaussian(mean=[0, 0, 2.0], rotation=[1, 0, 0, 0],
                    log_scale=np.log(0.2) * np.ones(3), opacity_logit=2.0)
    gs = GaussianSet.from_gaussians([front, back])
    from splatnorm.core import Camera
    cam = Camera(fx=40, fy=40, cx=16.5, cy=16.5, width=32, height=32,
                 world_to_view_rotation=np.eye(3), world_to_view_translation=np.zeros(3),
                 near=0.05, far=50.0)
    cfg = RenderConfig(transmittance_floor=0.01)  # front leaves T ~ 6e-3 < floor
    up = UpstreamGradients(color=np.ones((32, 32, 3)))
    grads = backward(gs, cam, cfg, up)
    assert np.all(grads.means[1] == 0.0)
    assert np.all(grads.sh_coeffs[1] == 0.0)
    assert grads.opacity_logits[1] == 0.0
    assert np.any(grads.means[0] != 0.0)


def test_shape_mismatch_rejected():
    gs = random_scene(1, n=3)
    cam = view_camera()
    with pytest.raises(ValueError):
        backward(gs, cam, RenderConfig(), UpstreamGradients(color=np.zeros((4, 4, 3))))


def test_densification_stats_populated():
    gs = random_scene(2, n=6)
    cam = view_camera()
    targets = random_targets(2, cam)
    cfg = RenderConfig()
    fb = render(gs, cam, cfg)
    grads = backward(gs, cam, cfg, l1_upstreams(fb, targets)["color"])
    assert np.any(grads.hit_count > 0)
    assert np.all(grads.screen_grad_norm >= 0)
    assert np.any(grads.screen_grad_norm > 0)
