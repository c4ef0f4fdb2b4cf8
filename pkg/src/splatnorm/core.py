"""Gaussian primitives, cameras, and the per-primitive geometry operations.

A scene is a set of anisotropic 3D Gaussians.  Each one carries a position,
an orientation (unit quaternion), per-axis log standard deviations, an
opacity logit, and RGB spherical-harmonic color coefficients up to degree 3.
Everything here is a pure function of its inputs; batched variants take
leading-axis arrays and are the primary API, the scalar `Gaussian` dataclass
exists for construction and tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Real spherical harmonics constants (degree 0..3), same convention as the
# de-facto splatting PLY ecosystem: color = basis . coeffs + 0.5.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SCALE_TIE_EPS = 1e-9  # two scales closer than this count as tied


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass
class Gaussian:
    """One primitive: mean, versor rotation, log-scales, opacity logit, SH colors."""

    mean: np.ndarray
    rotation: np.ndarray          # (4,) quaternion, (w, x, y, z)
    log_scale: np.ndarray         # (3,) log of per-axis standard deviations
    opacity_logit: float = 0.0
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((3, 16)))

    def __post_init__(self):
        self.mean = _as_float(self.mean).reshape(3)
        self.rotation = _as_float(self.rotation).reshape(4)
        self.log_scale = _as_float(self.log_scale).reshape(3)
        self.sh_coeffs = _as_float(self.sh_coeffs).reshape(3, 16)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.asarray(self.opacity_logit)))


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of Gaussians plus the scene bounding box."""

    means: np.ndarray             # (N, 3)
    rotations: np.ndarray         # (N, 4)
    log_scales: np.ndarray        # (N, 3)
    opacity_logits: np.ndarray    # (N,)
    sh_coeffs: np.ndarray         # (N, 3, 16)
    scene_bounds: np.ndarray      # (2, 3) [min, max] corners

    def __post_init__(self):
        self.means = _as_float(self.means).reshape(-1, 3)
        n = len(self.means)
        self.rotations = _as_float(self.rotations).reshape(n, 4)
        self.log_scales = _as_float(self.log_scales).reshape(n, 3)
        self.opacity_logits = _as_float(self.opacity_logits).reshape(n)
        self.sh_coeffs = _as_float(self.sh_coeffs).reshape(n, 3, 16)
        self.scene_bounds = _as_float(self.scene_bounds).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "GaussianSet":
        means = np.stack([g.mean for g in gaussians])
        out = cls(
            means=means,
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
            scene_bounds=np.stack([means.min(axis=0), means.max(axis=0)]),
        )
        return out

    def recompute_bounds(self, margin: float = 0.0) -> None:
        lo = self.means.min(axis=0) - margin
        hi = self.means.max(axis=0) + margin
        self.scene_bounds = np.stack([lo, hi])

    def validate(self) -> None:
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite Gaussian means")
        if not np.all(np.isfinite(self.log_scales)):
            raise ValueError("non-finite log scales")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero-norm rotation quaternion")
        lo, hi = self.scene_bounds
        if np.any(self.means < lo - 1e-9) or np.any(self.means > hi + 1e-9):
            raise ValueError("scene_bounds does not contain all means")


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-view transform.

    View space looks down +z; `depth` everywhere in this package means the
    view-space z coordinate.  Pixel (row, col) is sampled at its center
    (col + 0.5, row + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_view_rotation: np.ndarray     # (3, 3)
    world_to_view_translation: np.ndarray  # (3,)
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.world_to_view_rotation = _as_float(self.world_to_view_rotation).reshape(3, 3)
        self.world_to_view_translation = _as_float(self.world_to_view_translation).reshape(3)
        R = self.world_to_view_rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_view rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("world_to_view rotation must have determinant +1")
        if not (0.0 < self.near < self.far):
            raise ValueError("camera clip planes must satisfy 0 < near < far")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.world_to_view_rotation.T @ self.world_to_view_translation

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        pts = _as_float(points)
        return pts @ self.world_to_view_rotation.T + self.world_to_view_translation

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center coordinates (x, y)."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p) -> np.ndarray:
    p = _as_float(p)
    return np.log(p) - np.log1p(-p)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalized internally.

    Accepts (..., 4), returns (..., 3, 3).
    """
    q = _as_float(q)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite quaternion")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_rotation_vjp(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a rotation-matrix gradient back to the raw quaternion.

    Chains through the internal normalization of `quaternion_to_rotation`,
    so perturbing an un-normalized q gives matching finite differences.
    """
    q = _as_float(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dR_dx = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dR_dy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dR_dz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    partials = np.stack([dR_dw, dR_dx, dR_dy, dR_dz], axis=-3)  # (..., 4, 3, 3)
    g_qn = np.einsum("...ij,...aij->...a", grad_R, partials)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    proj = g_qn - np.sum(g_qn * qn, axis=-1, keepdims=True) * qn
    return proj / norm


def covariance_from_rs(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(exp(log_scale))^2 R^T; accepts batched inputs."""
    rotation = _as_float(rotation)
    log_scale = _as_float(log_scale)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(log_scale))):
        raise ValueError("non-finite covariance parameters")
    R = quaternion_to_rotation(rotation)
    A = R * np.exp(log_scale)[..., None, :]
    return A @ np.swapaxes(A, -1, -2)


def precision_from_rs(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Inverse covariance R diag(exp(-log_scale))^2 R^T, computed without a solve."""
    R = quaternion_to_rotation(rotation)
    B = R * np.exp(-_as_float(log_scale))[..., None, :]
    return B @ np.swapaxes(B, -1, -2)


def evaluate_gaussian(g: Gaussian, p: np.ndarray) -> float:
    """exp(-1/2 (p-mu)^T Sigma^-1 (p-mu)) in (0, 1]."""
    p = _as_float(p).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite query point")
    prec = precision_from_rs(g.rotation, g.log_scale)
    d = p - g.mean
    return float(np.exp(-0.5 * d @ prec @ d))


def smallest_axis_index(log_scales: np.ndarray) -> np.ndarray:
    """Index of the smallest scale axis per row; ties go to the lower index."""
    scales = np.exp(_as_float(log_scales))
    if scales.ndim == 1:
        scales = scales[None]
        squeeze = True
    else:
        squeeze = False
    mins = scales.min(axis=-1, keepdims=True)
    tied = scales <= mins + SCALE_TIE_EPS
    idx = np.argmax(tied, axis=-1)
    return idx[0] if squeeze else idx


def gradient_proxy(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Per-Gaussian unit vector standing in for the local surface-field gradient.

    Realized as the rotation column of the smallest-scale axis: a surface-hugging
    Gaussian is flattest along its surface normal.  Sign is left as produced;
    downstream losses are unsigned.
    """
    rotations = _as_float(rotations)
    single = rotations.ndim == 1
    R = quaternion_to_rotation(rotations.reshape(-1, 4))
    k = np.atleast_1d(smallest_axis_index(_as_float(log_scales).reshape(-1, 3)))
    proxies = R[np.arange(len(k)), :, k]
    return proxies[0] if single else proxies


def sh_basis(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Real SH basis values, (..., (degree+1)^2), for unit directions."""
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    dirs = _as_float(dirs)
    x, y, z = np.moveaxis(dirs, -1, 0)
    n = (degree + 1) ** 2
    B = np.empty(dirs.shape[:-1] + (n,), dtype=np.float64)
    B[..., 0] = SH_C0
    if degree >= 1:
        B[..., 1] = -SH_C1 * y
        B[..., 2] = SH_C1 * z
        B[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[..., 4] = SH_C2[0] * x * y
        B[..., 5] = SH_C2[1] * y * z
        B[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[..., 7] = SH_C2[3] * x * z
        B[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        B[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        B[..., 10] = SH_C3[1] * x * y * z
        B[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[..., 14] = SH_C3[5] * z * (xx - yy)
        B[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return B


def sh_basis_gradient(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """d basis / d direction, (..., (degree+1)^2, 3), treating x,y,z as free."""
    dirs = _as_float(dirs)
    x, y, z = np.moveaxis(dirs, -1, 0)
    zero = np.zeros_like(x)
    n = (degree + 1) ** 2
    G = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)

    def put(i, gx, gy, gz):
        G[..., i, 0] = gx
        G[..., i, 1] = gy
        G[..., i, 2] = gz

    if degree >= 1:
        put(1, zero, -SH_C1, zero)
        put(2, zero, zero, SH_C1)
        put(3, -SH_C1, zero, zero)
    if degree >= 2:
        put(4, SH_C2[0] * y, SH_C2[0] * x, zero)
        put(5, zero, SH_C2[1] * z, SH_C2[1] * y)
        put(6, -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z)
        put(7, SH_C2[3] * z, zero, SH_C2[3] * x)
        put(8, 2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        put(9, SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero)
        put(10, SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y)
        put(11, -2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z)
        put(12, -6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy))
        put(13, SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, SH_C3[4] * 8 * x * z)
        put(14, 2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy))
        put(15, SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero)
    return G


def sh_to_color(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int = 3) -> np.ndarray:
    """Directional color = SH(view_dir) . coeffs + 0.5, unclamped.

    Clamping to [0, 1] happens only at image write-out so gradients stay alive.
    `sh_coeffs` is (..., 3, 16), `view_dir` (..., 3) unit.
    """
    B = sh_basis(view_dir, degree)
    n = B.shape[-1]
    return np.einsum("...cb,...b->...c", _as_float(sh_coeffs)[..., :n], B) + 0.5


@dataclass
class Projection:
    """Screen-space footprint of a batch of Gaussians for one camera."""

    mean2d: np.ndarray   # (N, 2) pixels
    cov2d: np.ndarray    # (N, 2, 2) pixels^2, anti-alias floor included
    depth: np.ndarray    # (N,) view-space z
    valid: np.ndarray    # (N,) bool, False where culled by the near plane


ANTIALIAS_VARIANCE = 0.3  # px^2 added to the projected covariance diagonal


def projection_jacobian(view_means: np.ndarray, cam: Camera) -> np.ndarray:
    """Pinhole Jacobian d(pixel)/d(view point) at each view-space mean, (N, 2, 3)."""
    vx, vy, vz = view_means[..., 0], view_means[..., 1], view_means[..., 2]
    J = np.zeros(view_means.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = cam.fx / vz
    J[..., 0, 2] = -cam.fx * vx / (vz * vz)
    J[..., 1, 1] = cam.fy / vz
    J[..., 1, 2] = -cam.fy * vy / (vz * vz)
    return J


def project_to_screen(
    means: np.ndarray,
    rotations: np.ndarray,
    log_scales: np.ndarray,
    cam: Camera,
) -> Projection:
    """EWA-style perspective projection of 3D Gaussians to 2D screen splats.

    cov2d = J W Sigma W^T J^T + ANTIALIAS_VARIANCE * I with J the pinhole
    Jacobian at the view-space mean.  Gaussians at or behind the near plane
    are flagged invalid rather than projected.
    """
    means = _as_float(means).reshape(-1, 3)
    v = cam.world_to_view(means)
    valid = v[:, 2] > cam.near

    vz = np.where(valid, v[:, 2], 1.0)  # placeholder depth for culled rows
    mean2d = np.stack(
        [cam.fx * v[:, 0] / vz + cam.cx, cam.fy * v[:, 1] / vz + cam.cy], axis=-1
    )
    J = projection_jacobian(np.where(valid[:, None], v, [0.0, 0.0, 1.0]), cam)
    W = cam.world_to_view_rotation
    Sigma = covariance_from_rs(np.asarray(rotations).reshape(-1, 4), np.asarray(log_scales).reshape(-1, 3))
    M = J @ W
    cov2d = M @ Sigma @ np.swapaxes(M, -1, -2)
    cov2d[:, 0, 0] += ANTIALIAS_VARIANCE
    cov2d[:, 1, 1] += ANTIALIAS_VARIANCE
    return Projection(mean2d=mean2d, cov2d=cov2d, depth=v[:, 2], valid=valid)
