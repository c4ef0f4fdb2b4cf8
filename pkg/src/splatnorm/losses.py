"""Training losses and their analytic gradients.

The training objective is L1 + lambda_dssim * DSSIM, plus an opacity-entropy
term while opacities are being pushed binary, plus the normal-alignment
regularizer on the rasterized gradient-proxy map.  Each loss returns its
scalar value together with the gradient w.r.t. its differentiable input so
the trainer can feed the rasterizer backward pass.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class Stage(enum.Enum):
    VANILLA = "vanilla"
    OPACITY = "opacity"
    REGULARIZED = "regularized"
    REFINEMENT = "refinement"


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_r: float = 0.2          # normal regularizer; 0.1..0.4 is the useful range
    lambda_entropy: float = 0.1

    def __post_init__(self):
        if min(self.lambda_dssim, self.lambda_r, self.lambda_entropy) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    normal_reg: float
    entropy: float
    pixels_used: int

    def as_dict(self) -> dict:
        return {
            "total": self.total, "l1": self.l1, "dssim": self.dssim,
            "normal_reg": self.normal_reg, "entropy": self.entropy,
            "pixels_used": self.pixels_used,
        }


def l1_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean absolute difference and its subgradient (0 at exact ties)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def _embed_adjoint(coeff: np.ndarray, kernel: np.ndarray, shape) -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    full = np.zeros(shape)
    full[half:-half, half:-half] = coeff
    return _window_mean(full, kernel)


def dssim_loss(rendered: np.ndarray, target: np.ndarray):
    """Structural dissimilarity (1 - SSIM)/2 with its gradient w.r.t. `rendered`.

    SSIM uses an 11x11 Gaussian window (sigma 1.5), stability constants for
    unit dynamic range, weighted moments (no sample-covariance correction),
    and averages the map over window-complete pixels and channels, matching
    the published reference implementation.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = _ssim_kernel()
    half = (SSIM_WINDOW - 1) // 2
    crop = (slice(half, -half), slice(half, -half))

    mux = _window_mean(x, k)[crop]
    muy = _window_mean(y, k)[crop]
    exx = _window_mean(x * x, k)[crop]
    eyy = _window_mean(y * y, k)[crop]
    exy = _window_mean(x * y, k)[crop]
    vx = exx - mux**2
    vy = eyy - muy**2
    cxy = exy - mux * muy

    a1 = 2 * mux * muy + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mux**2 + muy**2 + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    ssim = float(np.mean(s))
    value = (1.0 - ssim) / 2.0

    # d loss / d S is uniform; chain through the windowed statistics.
    ds = np.full_like(s, -0.5 / s.size)
    d_mux = 2 * s * (muy * (1 / a1 - 1 / a2) - mux * (1 / b1 - 1 / b2))
    d_exx = -s / b2
    d_exy = 2 * s / a2
    grad = (
        _embed_adjoint(ds * d_mux, k, x.shape)
        + 2 * x * _embed_adjoint(ds * d_exx, k, x.shape)
        + y * _embed_adjoint(ds * d_exy, k, x.shape)
    )
    if np.asarray(rendered).ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM sharing the DSSIM kernel, so 1 - 2*dssim == ssim identically."""
    value, _ = dssim_loss(a, b)
    return 1.0 - 2.0 * value


def entropy_loss(opacities: np.ndarray):
    """Mean binary entropy of the opacities; minimized as they saturate to 0/1."""
    a = np.asarray(opacities, dtype=np.float64)
    if np.any(a <= 0) or np.any(a >= 1):
        raise ValueError("opacities must lie strictly inside (0, 1)")
    value = float(np.mean(-(a * np.log(a) + (1 - a) * np.log1p(-a))))
    grads = -(np.log(a) - np.log1p(-a)) / a.size
    return value, grads


def normal_reg(grad_map: np.ndarray, normal_map: np.ndarray, alpha: np.ndarray, mask: np.ndarray):
    """Unsigned-cosine misalignment between blended proxies and target normals.

    Over pixels with the mask set, alpha > 0.5, and both vectors above a norm
    floor: mean of (1 - |cos|).  Returns (loss, d loss/d grad_map, pixels_used).
    The per-pixel normalization makes it invariant to positive rescaling of
    either field and to per-pixel sign flips of the normals.
    """
    g = np.asarray(grad_map, dtype=np.float64)
    n = np.asarray(normal_map, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (g.shape == n.shape and g.shape[:2] == alpha.shape == mask.shape):
        raise ValueError("normal_reg inputs disagree in shape")

    gn = np.linalg.norm(g, axis=-1)
    nn = np.linalg.norm(n, axis=-1)
    use = mask & (alpha > 0.5) & (gn > 1e-8) & (nn > 1e-8)
    count = int(np.count_nonzero(use))
    grad = np.zeros_like(g)
    if count == 0:
        logger.warning("normal_reg: no qualifying pixels")
        return 0.0, grad, 0

    gu = g[use]
    nu = n[use]
    gun = gn[use][:, None]
    ghat = gu / gun
    nhat = nu / nn[use][:, None]
    cos = np.sum(ghat * nhat, axis=-1)
    value = float(np.mean(1.0 - np.abs(cos)))
    # d(1-|cos|)/dg = -sign(cos) (nhat - cos ghat) / |g|
    grad[use] = -np.sign(cos)[:, None] * (nhat - cos[:, None] * ghat) / (gun * count)
    return value, grad, count


def total_loss(
    stage: Stage,
    weights: LossWeights,
    l1: float,
    dssim: float,
    normal_reg_value: float = 0.0,
    entropy: float = 0.0,
    pixels_used: int = 0,
) -> LossReport:
    """Compose the stage-gated objective; inactive terms report as zero."""
    use_entropy = stage is Stage.OPACITY
    use_reg = stage is Stage.REGULARIZED
    reg = normal_reg_value if use_reg else 0.0
    ent = entropy if use_entropy else 0.0
    total = (
        l1
        + weights.lambda_dssim * dssim
        + weights.lambda_r * reg
        + weights.lambda_entropy * ent
    )
    return LossReport(
        total=float(total), l1=float(l1), dssim=float(dssim),
        normal_reg=float(reg), entropy=float(ent),
        pixels_used=int(pixels_used if use_reg else 0),
    )
