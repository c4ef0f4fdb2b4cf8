"""Adam updates, adaptive density control, and the staged training loop.

Training runs four stages in order: plain photometric fitting with
densification, a short opacity-entropy phase that pushes opacities binary,
the normal-regularized phase that aligns rasterized gradient proxies with
the supplied normal maps, and a photometric refinement tail.  Stage lengths
default to 7000/2000/6000 out of 30000 total iterations; the regularized
phase can be stretched to 13000 at the cost of refinement.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianSet, inverse_sigmoid, sigmoid
from .losses import LossWeights, Stage, dssim_loss, entropy_loss, l1_loss, normal_reg, total_loss
from .metrics import psnr
from .rasterizer import ParamGradients, RenderConfig, UpstreamGradients, backward, render
from .scenes import SceneDataset

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
OPACITY_LOGIT_LIMIT = 15.0   # keeps sigmoid strictly inside (0, 1)

PARAM_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    vanilla_iters: int = 7000
    opacity_iters: int = 2000
    regularized_iters: int = 6000      # the paper-style alternative is 13000
    total_iters: int = 30000           # refinement fills the remainder
    lr_means: float = 1.6e-4           # in units of scene extent, decays exponentially
    lr_means_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    split_scale_factor: float = 1.6
    clone_scale_fraction: float = 0.01  # clone below, split above this * extent
    sh_degree_interval: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    n_init: int = 1200
    max_gaussians: int = 80000
    eval_interval: int = 500
    deterministic: bool = True
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4

    def __post_init__(self):
        if min(self.vanilla_iters, self.opacity_iters, self.regularized_iters) < 0:
            raise ValueError("stage lengths must be non-negative")
        if self.refinement_iters < 0:
            raise ValueError("stage lengths exceed total_iters")

    @property
    def refinement_iters(self) -> int:
        return self.total_iters - (self.vanilla_iters + self.opacity_iters + self.regularized_iters)

    def stage_boundaries(self) -> tuple[int, int, int, int]:
        v = self.vanilla_iters
        o = v + self.opacity_iters
        r = o + self.regularized_iters
        return (v, o, r, self.total_iters)

    def stage_at(self, iteration: int) -> Stage:
        v, o, r, _ = self.stage_boundaries()
        if iteration < v:
            return Stage.VANILLA
        if iteration < o:
            return Stage.OPACITY
        if iteration < r:
            return Stage.REGULARIZED
        return Stage.REFINEMENT

    def scaled(self, factor: float) -> "TrainConfig":
        """Proportionally shrunk schedule for desk-scale runs."""
        return replace(
            self,
            vanilla_iters=int(self.vanilla_iters * factor),
            opacity_iters=int(self.opacity_iters * factor),
            regularized_iters=int(self.regularized_iters * factor),
            total_iters=int(self.total_iters * factor),
            sh_degree_interval=max(1, int(self.sh_degree_interval * factor)),
            eval_interval=max(1, int(self.eval_interval * factor)),
        )


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_set(cls, gs: GaussianSet) -> "AdamState":
        zeros = {name: np.zeros_like(getattr(gs, name)) for name in PARAM_GROUPS}
        return cls(m=zeros, v={k: v.copy() for k, v in zeros.items()})

    def remap(self, keep: np.ndarray, n_new: int) -> None:
        """Carry moments of surviving rows, zero-init appended rows."""
        for store in (self.m, self.v):
            for name, arr in store.items():
                tail = np.zeros((n_new,) + arr.shape[1:])
                store[name] = np.concatenate([arr[keep], tail], axis=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr_schedule, iteration: int) -> None:
    """One Adam update in place; per-group learning rates from lr_schedule(iteration).

    Rows with non-finite gradients are skipped (parameters and moments
    untouched) and counted in a warning.
    """
    lrs = lr_schedule(iteration) if callable(lr_schedule) else lr_schedule
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    skipped = 0
    for name, p in params.items():
        g = grads[name]
        bad = ~np.isfinite(g).reshape(len(g), -1).all(axis=1)
        if bad.any():
            skipped += int(bad.sum())
            g = np.where(bad.reshape((-1,) + (1,) * (g.ndim - 1)), 0.0, g)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if bad.any():
            step[bad] = 0.0
        p -= step
    if "rotations" in params:
        params["rotations"] /= np.linalg.norm(params["rotations"], axis=1, keepdims=True)
    if skipped:
        logger.warning("adam_step: skipped %d rows with non-finite gradients", skipped)


def _clamp_opacity(gs: GaussianSet) -> None:
    np.clip(gs.opacity_logits, -OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT, out=gs.opacity_logits)


@dataclass
class DensifyStats:
    """Windowed accumulation of the rasterizer's densification statistics."""

    grad_norm_sum: np.ndarray
    hits: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_norm_sum=np.zeros(n), hits=np.zeros(n))

    def accumulate(self, grads: ParamGradients) -> None:
        self.grad_norm_sum += grads.screen_grad_norm
        self.hits += grads.hit_count

    def mean_grad(self) -> np.ndarray:
        return self.grad_norm_sum / np.maximum(self.hits, 1.0)


def densify_and_prune(
    gaussians: GaussianSet,
    stats: DensifyStats,
    cfg: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator,
    adam: AdamState | None = None,
):
    """Clone small / split large high-gradient Gaussians; prune transparent ones.

    Split children sample their means from the parent distribution and shrink
    scales by `split_scale_factor`; clones are exact copies.  Rows with
    opacity below `prune_opacity` are dropped.  Deterministic given the rng.
    """
    n = len(gaussians)
    mean_grad = stats.mean_grad()
    needs = mean_grad >= cfg.densify_grad_threshold
    max_scale = np.exp(gaussians.log_scales).max(axis=1)
    clone = needs & (max_scale < cfg.clone_scale_fraction * scene_extent)
    split = needs & ~clone
    prune = gaussians.opacities < cfg.prune_opacity

    grown = n + int(clone.sum()) + 2 * int(split.sum())
    if grown > cfg.max_gaussians:
        logger.warning("densify: skipping growth (%d would exceed cap %d)", grown, cfg.max_gaussians)
        clone = np.zeros(n, dtype=bool)
        split = np.zeros(n, dtype=bool)

    keep = ~(prune | split)

    def rows(field_name):
        return getattr(gaussians, field_name)

    new_fields = {name: [rows(name)[keep]] for name in PARAM_GROUPS}
    if clone.any():
        for name in PARAM_GROUPS:
            new_fields[name].append(rows(name)[clone])
    if split.any():
        from .core import quaternion_to_rotation

        parents = np.flatnonzero(split)
        R = quaternion_to_rotation(gaussians.rotations[parents])
        A = R * np.exp(gaussians.log_scales[parents])[:, None, :]
        for _ in range(2):
            xi = rng.standard_normal((len(parents), 3))
            child_means = gaussians.means[parents] + np.einsum("nij,nj->ni", A, xi)
            new_fields["means"].append(child_means)
            new_fields["rotations"].append(gaussians.rotations[parents])
            new_fields["log_scales"].append(
                gaussians.log_scales[parents] - np.log(cfg.split_scale_factor)
            )
            new_fields["opacity_logits"].append(gaussians.opacity_logits[parents])
            new_fields["sh_coeffs"].append(gaussians.sh_coeffs[parents])

    out = GaussianSet(
        means=np.concatenate(new_fields["means"]),
        rotations=np.concatenate(new_fields["rotations"]),
        log_scales=np.concatenate(new_fields["log_scales"]),
        opacity_logits=np.concatenate(new_fields["opacity_logits"]),
        sh_coeffs=np.concatenate(new_fields["sh_coeffs"]),
        scene_bounds=gaussians.scene_bounds,
    )
    if len(out) == 0:
        raise RuntimeError("density control removed every Gaussian")
    out.recompute_bounds(margin=1e-6)
    if adam is not None:
        adam.remap(keep, len(out) - int(keep.sum()))
    return out


def initialize_gaussians(scene: SceneDataset, cfg: TrainConfig, rng: np.random.Generator) -> GaussianSet:
    """Seed Gaussians from depth-map backprojections (or a box if depth absent)."""
    points = []
    colors = []
    if scene.depth_maps is not None:
        per_cam = max(1, cfg.n_init // max(1, len(scene.train_indices)))
        for ci in scene.train_indices:
            cam = scene.cameras[ci]
            dm = scene.depth_maps[ci]
            hit = np.flatnonzero(dm.ravel() > 0)
            if len(hit) == 0:
                continue
            pick = rng.choice(hit, size=min(per_cam, len(hit)), replace=False)
            px = cam.pixel_centers().reshape(-1, 2)[pick]
            t = dm.ravel()[pick]
            dv = np.column_stack([
                (px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(len(px)),
            ])
            points.append(cam.position + t[:, None] * (dv @ cam.world_to_view_rotation))
            colors.append(scene.images[ci].reshape(-1, 3)[pick])
    if points:
        points = np.concatenate(points)
        colors = np.concatenate(colors)
    else:
        points = rng.uniform(-0.6, 0.6, size=(cfg.n_init, 3))
        colors = np.full((len(points), 3), 0.5)

    # isotropic scale from the mean distance to the 3 nearest neighbors
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=min(4, len(points)))
    nn = np.maximum(dist[:, 1:].mean(axis=1) if dist.ndim > 1 else np.full(len(points), 0.05), 1e-4)
    n = len(points)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = (colors - 0.5) / 0.28209479177387814
    gs = GaussianSet(
        means=points,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.log(nn)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, float(inverse_sigmoid(0.1))),
        sh_coeffs=sh,
        scene_bounds=np.zeros((2, 3)),
    )
    gs.recompute_bounds(margin=1e-6)
    return gs


def _scene_extent(scene: SceneDataset) -> float:
    positions = np.stack([c.position for c in scene.cameras])
    center = positions.mean(axis=0)
    return 1.1 * float(np.linalg.norm(positions - center, axis=1).max())


def _mid_fraction(gs: GaussianSet) -> float:
    a = gs.opacities
    return float(np.mean((a > 0.05) & (a < 0.95)))


@dataclass
class TrainResult:
    gaussians: GaussianSet
    trace: list
    stage_boundaries: tuple
    heldout_psnr: float
    opacity_mid_fractions: dict
    extent: float


def train(scene: SceneDataset, cfg: TrainConfig, log_file=None) -> TrainResult:
    """Run the staged optimization; see the module docstring for the schedule.

    Emits one line-delimited JSON record per iteration to `log_file` when
    given, mirroring the returned trace.
    """
    if len(scene.cameras) < 2:
        raise ValueError("training needs at least 2 cameras")
    scene.validate()
    needs_normals = cfg.regularized_iters > 0 and cfg.weights.lambda_r > 0
    if needs_normals and scene.normal_maps is None:
        raise ValueError("regularized stage requires normal maps in the scene")

    rng = np.random.default_rng(cfg.seed)
    gaussians = initialize_gaussians(scene, cfg, rng)
    adam = AdamState.for_set(gaussians)
    stats = DensifyStats.zeros(len(gaussians))
    extent = _scene_extent(scene)
    v_end, o_end, r_end, total = cfg.stage_boundaries()

    def lr_schedule(iteration):
        frac = iteration / max(1, total)
        decayed = cfg.lr_means * (cfg.lr_means_final / cfg.lr_means) ** frac
        return {
            "means": decayed * extent,
            "rotations": cfg.lr_rotations,
            "log_scales": cfg.lr_log_scales,
            "opacity_logits": cfg.lr_opacity,
            "sh_coeffs": cfg.lr_sh,
        }

    def heldout_metric():
        if not scene.heldout_indices:
            return float("nan")
        values = []
        for ci in scene.heldout_indices:
            rcfg = RenderConfig(
                background=scene.background, deterministic=cfg.deterministic,
                sh_degree=3, alpha_cutoff=cfg.alpha_cutoff,
                transmittance_floor=cfg.transmittance_floor,
            )
            fb = render(gaussians, scene.cameras[ci], rcfg)
            values.append(min(psnr(fb.to_image(), scene.images[ci]), 100.0))
        return float(np.mean(values))

    trace = []
    mid_fractions = {"before_opacity": None, "after_opacity": None}
    schedule = []
    epoch = []
    log_handle = open(log_file, "w") if log_file else None
    try:
        for it in range(total):
            stage = cfg.stage_at(it)
            if it == v_end:
                mid_fractions["before_opacity"] = _mid_fraction(gaussians)
            if not epoch:
                epoch = list(rng.permutation(scene.train_indices))
            cam_index = int(epoch.pop())
            cam = scene.cameras[cam_index]
            rcfg = RenderConfig(
                background=scene.background, deterministic=cfg.deterministic,
                sh_degree=min(3, it // cfg.sh_degree_interval),
                alpha_cutoff=cfg.alpha_cutoff, transmittance_floor=cfg.transmittance_floor,
            )
            fb = render(gaussians, cam, rcfg)

            target = scene.images[cam_index]
            l1_value, l1_grad = l1_loss(fb.color, target)
            ds_value, ds_grad = dssim_loss(fb.color, target)
            upstream = UpstreamGradients(
                color=l1_grad + cfg.weights.lambda_dssim * ds_grad
            )
            reg_value, pixels_used = 0.0, 0
            if stage is Stage.REGULARIZED and needs_normals:
                nm = scene.normal_maps[cam_index]
                mask = np.linalg.norm(nm, axis=-1) > 1e-8
                reg_value, reg_grad, pixels_used = normal_reg(fb.grad_map, nm, fb.alpha, mask)
                upstream.grad_map = cfg.weights.lambda_r * reg_grad

            grads = backward(gaussians, cam, rcfg, upstream)

            ent_value = 0.0
            if stage is Stage.OPACITY:
                alphas = gaussians.opacities
                ent_value, ent_grads = entropy_loss(alphas)
                grads.opacity_logits += (
                    cfg.weights.lambda_entropy * ent_grads * alphas * (1.0 - alphas)
                )

            params = {name: getattr(gaussians, name) for name in PARAM_GROUPS}
            grad_dict = {
                "means": grads.means, "rotations": grads.rotations,
                "log_scales": grads.log_scales, "opacity_logits": grads.opacity_logits,
                "sh_coeffs": grads.sh_coeffs,
            }
            adam_step(params, grad_dict, adam, lr_schedule, it)
            _clamp_opacity(gaussians)
            stats.accumulate(grads)

            in_vanilla = stage is Stage.VANILLA
            if in_vanilla and (it + 1) % cfg.densify_interval == 0 and (it + 1) < v_end:
                gaussians = densify_and_prune(gaussians, stats, cfg, extent, rng, adam)
                stats = DensifyStats.zeros(len(gaussians))

            report = total_loss(
                stage, cfg.weights, l1_value, ds_value,
                normal_reg_value=reg_value, entropy=ent_value, pixels_used=pixels_used,
            )
            record = {
                "iteration": it, "stage": stage.value, **report.as_dict(),
                "n_gaussians": len(gaussians),
                "heldout_psnr": None,
            }
            if (it + 1) % cfg.eval_interval == 0 or (it + 1) == total:
                record["heldout_psnr"] = heldout_metric()
            trace.append(record)
            if log_handle:
                log_handle.write(json.dumps(record) + "\n")
            if it + 1 == o_end:
                mid_fractions["after_opacity"] = _mid_fraction(gaussians)
        schedule = [v_end, o_end, r_end, total]
    finally:
        if log_handle:
            log_handle.close()

    gaussians.recompute_bounds(margin=1e-6)
    final_psnr = trace[-1]["heldout_psnr"] if trace else float("nan")
    return TrainResult(
        gaussians=gaussians,
        trace=trace,
        stage_boundaries=tuple(schedule),
        heldout_psnr=final_psnr if final_psnr is not None else float("nan"),
        opacity_mid_fractions=mid_fractions,
        extent=extent,
    )
