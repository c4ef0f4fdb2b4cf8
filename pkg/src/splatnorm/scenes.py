"""Synthetic scenes with analytic ground truth, plus dataset persistence.

Scenes are Lambertian primitives (sphere, box, two spheres, textured sphere)
rendered by exact ray intersection: images, view-space depth maps, and
camera-space normal maps all come from closed forms, so geometric claims can
be checked against the truth without any external data.

Normal map convention: maps store -(R_wv n_world), i.e. surfaces facing the
camera have a positive z component (the usual monocular-normal convention).
The global sign flip is invisible to the unsigned alignment losses.  Pixels
with no surface hold exact zero vectors.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera
from .formats import read_pfm, read_png, write_pfm, write_png

logger = logging.getLogger(__name__)

SCENE_KINDS = ("sphere", "box", "two-spheres", "textured-sphere")
MANIFEST_NAME = "manifest.json"
HELDOUT_EVERY = 8  # every 8th camera is held out, the standard eval split

DEFAULT_LIGHT = np.array([0.45, 0.7, -0.55]) / np.linalg.norm([0.45, 0.7, -0.55])
AMBIENT = 0.25


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]                      # (H, W, 3) in [0, 1]
    normal_maps: list[np.ndarray] | None = None   # (H, W, 3) camera space
    depth_maps: list[np.ndarray] | None = None    # (H, W) view-space depth
    train_indices: list[int] = field(default_factory=list)
    heldout_indices: list[int] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind: str = "custom"
    seed: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    @property
    def has_normals(self) -> bool:
        return self.normal_maps is not None

    def validate(self) -> None:
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera required")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"camera {i}: image shape {img.shape} does not match "
                                 f"{cam.height}x{cam.width}")
        if self.normal_maps is not None:
            for i, (cam, nm) in enumerate(zip(self.cameras, self.normal_maps)):
                if nm.shape != (cam.height, cam.width, 3):
                    raise ValueError(f"camera {i}: normal map shape mismatch")
                norms = np.linalg.norm(nm, axis=-1)
                defined = norms > 1e-8
                if np.any(np.abs(norms[defined] - 1.0) > 1e-6):
                    raise ValueError(f"camera {i}: non-unit normals")
        if self.depth_maps is not None:
            for i, (cam, dm) in enumerate(zip(self.cameras, self.depth_maps)):
                if dm.shape != (cam.height, cam.width):
                    raise ValueError(f"camera {i}: depth map shape mismatch")
        overlap = set(self.train_indices) & set(self.heldout_indices)
        if overlap:
            raise ValueError(f"cameras in both splits: {sorted(overlap)}")


def look_at(position, target=(0.0, 0.0, 0.0), up_hint=(0.0, 1.0, 0.0)):
    """World-to-view (R, t) for a camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up_hint, dtype=np.float64)
    if abs(np.dot(f, up / np.linalg.norm(up))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return R, -R @ position


def orbit_cameras(n_cameras, resolution, seed, distance=2.4):
    """Cameras spread over a sphere around the origin (fibonacci + seeded jitter)."""
    rng = np.random.default_rng(seed)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    f = 1.1 * resolution
    for i in range(n_cameras):
        u = 1.0 - 2.0 * (i + 0.5) / n_cameras        # cos of polar angle, in (-1, 1)
        u = 0.92 * u                                  # keep away from the up axis
        phi = golden * i + rng.uniform(-0.04, 0.04)
        rho = np.sqrt(1.0 - u * u)
        d = distance + rng.uniform(-0.05, 0.05)
        pos = d * np.array([rho * np.cos(phi), u, rho * np.sin(phi)])
        R, t = look_at(pos)
        cams.append(Camera(
            fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
            width=resolution, height=resolution,
            world_to_view_rotation=R, world_to_view_translation=t,
            near=0.1, far=3.0 * distance,
        ))
    return cams


# ---------------------------------------------------------------------------
# analytic primitives; rays and results in the object frame
# ---------------------------------------------------------------------------

def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit &= t > 1e-6
    t = np.where(hit, t, np.inf)
    p = origins + t[..., None] * dirs
    n = (p - center) / radius
    return t, n, hit


def _intersect_box(origins, dirs, half_extent):
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (-half_extent - origins) * inv
    t2 = (half_extent - origins) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_enter < t_exit) & (t_enter > 1e-6)
    t = np.where(hit, t_enter, np.inf)
    axis = np.argmax(tmin, axis=-1)
    p = origins + t[..., None] * dirs
    n = np.zeros_like(dirs)
    rows = np.arange(n.shape[0])
    n[rows, axis] = -np.sign(dirs[rows, axis])
    return t, n, hit


def _band_texture(points_obj):
    """Smooth low-frequency albedo pattern on the unit sphere surface."""
    x, y, z = points_obj[..., 0], points_obj[..., 1], points_obj[..., 2]
    r = np.sqrt(x * x + y * y + z * z) + 1e-12
    theta = np.arccos(np.clip(z / r, -1, 1))
    phi = np.arctan2(y, x)
    return np.stack([
        0.55 + 0.3 * np.sin(3 * theta) * np.cos(2 * phi),
        0.5 + 0.25 * np.cos(4 * theta),
        0.45 + 0.3 * np.sin(2 * phi),
    ], axis=-1)


_SPHERE_ALBEDO = np.array([0.75, 0.4, 0.25])
_BOX_ALBEDO = np.array([0.3, 0.55, 0.8])
_TWO_SPHERES = (
    (np.array([-0.32, 0.0, 0.0]), 0.38, np.array([0.75, 0.4, 0.25])),
    (np.array([0.42, 0.05, 0.08]), 0.24, np.array([0.3, 0.55, 0.8])),
)


def _trace_scene(kind, origins, dirs, world_rotation):
    """Nearest hit along each ray: (t, world normal, albedo, hit mask)."""
    Q = world_rotation
    o = origins @ Q          # into the object frame (Q^T applied to rows)
    d = dirs @ Q
    best_t = np.full(o.shape[0], np.inf)
    normal = np.zeros_like(o)
    albedo = np.zeros_like(o)
    if kind in ("sphere", "textured-sphere"):
        t, n, hit = _intersect_sphere(o, d, np.zeros(3), 0.5)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        normal[closer] = n[closer]
        if kind == "sphere":
            albedo[closer] = _SPHERE_ALBEDO
        else:
            p = o + t[:, None] * d
            albedo[closer] = _band_texture(p[closer])
    elif kind == "box":
        t, n, hit = _intersect_box(o, d, 0.42)
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        normal[closer] = n[closer]
        albedo[closer] = _BOX_ALBEDO
    elif kind == "two-spheres":
        for center, radius, color in _TWO_SPHERES:
            t, n, hit = _intersect_sphere(o, d, center, radius)
            closer = hit & (t < best_t)
            best_t[closer] = t[closer]
            normal[closer] = n[closer]
            albedo[closer] = color
    else:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    hit = np.isfinite(best_t)
    return best_t, normal @ Q.T, albedo, hit


def shade_lambertian(albedo, normals, light_dir):
    lambert = np.maximum(np.sum(normals * light_dir, axis=-1), 0.0)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[..., None]


def analytic_surface_color(points_world, kind, world_rotation=None, light_dir=None):
    """View-independent shaded color at surface points; oracle for mesh coloring."""
    Q = np.eye(3) if world_rotation is None else np.asarray(world_rotation)
    light = DEFAULT_LIGHT if light_dir is None else np.asarray(light_dir)
    p_obj = np.asarray(points_world) @ Q
    if kind == "sphere":
        albedo = np.tile(_SPHERE_ALBEDO, (len(p_obj), 1))
        n_obj = p_obj / np.linalg.norm(p_obj, axis=-1, keepdims=True)
    elif kind == "textured-sphere":
        albedo = _band_texture(p_obj)
        n_obj = p_obj / np.linalg.norm(p_obj, axis=-1, keepdims=True)
    else:
        raise ValueError("analytic colors are defined for sphere kinds only")
    return shade_lambertian(albedo, n_obj @ Q.T, light)


def generate_synthetic_scene(
    kind: str,
    n_cameras: int = 24,
    resolution: int = 128,
    seed: int = 0,
    world_rotation: np.ndarray | None = None,
    light_dir: np.ndarray | None = None,
) -> SceneDataset:
    """Ray-traced dataset with analytic images, depth, and camera-space normals.

    Deterministic in `seed`; images are quantized to the 8-bit lattice so the
    PNG round trip is exact.  Every 8th camera goes to the held-out split.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    if n_cameras < 2:
        raise ValueError("need at least 2 cameras")
    Q = np.eye(3) if world_rotation is None else np.asarray(world_rotation, dtype=np.float64)
    light = DEFAULT_LIGHT if light_dir is None else np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)

    cameras = orbit_cameras(n_cameras, resolution, seed)
    if world_rotation is not None:
        cameras = [Camera(
            fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy, width=c.width, height=c.height,
            world_to_view_rotation=c.world_to_view_rotation @ Q.T,
            world_to_view_translation=c.world_to_view_translation,
            near=c.near, far=c.far,
        ) for c in cameras]

    images, depths, normals = [], [], []
    for cam in cameras:
        h, w = cam.height, cam.width
        px = cam.pixel_centers().reshape(-1, 2)
        # view-space directions with z = 1: the ray parameter equals view depth
        dv = np.column_stack([
            (px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(len(px)),
        ])
        dirs = dv @ cam.world_to_view_rotation
        origins = np.tile(cam.position, (len(px), 1))
        t, n_world, albedo, hit = _trace_scene(kind, origins, dirs, Q)
        color = np.where(hit[:, None], shade_lambertian(albedo, n_world, light), 0.0)
        color = np.round(np.clip(color, 0, 1) * 255.0) / 255.0
        n_cam = -(n_world @ cam.world_to_view_rotation.T)
        n_cam = np.where(hit[:, None], n_cam, 0.0)
        depth = np.where(hit, t, 0.0)
        images.append(color.reshape(h, w, 3))
        depths.append(depth.reshape(h, w))
        normals.append(n_cam.reshape(h, w, 3))

    heldout = list(range(0, n_cameras, HELDOUT_EVERY))
    train = [i for i in range(n_cameras) if i not in heldout]
    scene = SceneDataset(
        cameras=cameras, images=images, normal_maps=normals, depth_maps=depths,
        train_indices=train, heldout_indices=heldout,
        background=np.zeros(3), kind=kind, seed=seed,
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _camera_to_json(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "near": cam.near, "far": cam.far,
        "world_to_view_rotation": cam.world_to_view_rotation.reshape(-1).tolist(),
        "world_to_view_translation": cam.world_to_view_translation.tolist(),
    }


def _camera_from_json(d: dict) -> Camera:
    return Camera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=int(d["width"]), height=int(d["height"]),
        world_to_view_rotation=np.array(d["world_to_view_rotation"]).reshape(3, 3),
        world_to_view_translation=np.array(d["world_to_view_translation"]),
        near=d["near"], far=d["far"],
    )


def save_scene(scene: SceneDataset, directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "splatnorm-scene-v1",
        "kind": scene.kind,
        "seed": scene.seed,
        "background": scene.background.tolist(),
        "train_indices": list(scene.train_indices),
        "heldout_indices": list(scene.heldout_indices),
        "has_normals": scene.normal_maps is not None,
        "has_depth": scene.depth_maps is not None,
        "cameras": [_camera_to_json(c) for c in scene.cameras],
    }
    for i, img in enumerate(scene.images):
        write_png(directory / "images" / f"cam_{i:03d}.png", img)
    if scene.normal_maps is not None:
        (directory / "normals").mkdir(exist_ok=True)
        for i, nm in enumerate(scene.normal_maps):
            write_pfm(directory / "normals" / f"cam_{i:03d}.pfm", nm)
    if scene.depth_maps is not None:
        (directory / "depth").mkdir(exist_ok=True)
        for i, dm in enumerate(scene.depth_maps):
            write_pfm(directory / "depth" / f"cam_{i:03d}.pfm", dm)
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)


def load_scene(directory) -> SceneDataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cameras = [_camera_from_json(d) for d in manifest["cameras"]]
    images = []
    for i, cam in enumerate(cameras):
        img = read_png(directory / "images" / f"cam_{i:03d}.png")
        if img.shape != (cam.height, cam.width, 3):
            raise ValueError(f"camera {i}: image dimensions {img.shape[:2]} do not "
                             f"match the manifest ({cam.height}x{cam.width})")
        images.append(img)
    normal_maps = None
    if manifest.get("has_normals"):
        normal_maps = []
        for i, cam in enumerate(cameras):
            nm = read_pfm(directory / "normals" / f"cam_{i:03d}.pfm")
            if nm.shape != (cam.height, cam.width, 3):
                raise ValueError(f"camera {i}: normal map dimensions mismatch")
            norms = np.linalg.norm(nm, axis=-1)
            defined = norms > 1e-8
            if np.any(np.abs(norms[defined] - 1.0) > 1e-4):
                logger.warning("camera %d: renormalizing normal map", i)
            nm = np.where(defined[..., None], nm / np.where(defined, norms, 1.0)[..., None], 0.0)
            normal_maps.append(nm)
    depth_maps = None
    if manifest.get("has_depth"):
        depth_maps = []
        for i, cam in enumerate(cameras):
            dm = read_pfm(directory / "depth" / f"cam_{i:03d}.pfm")
            if dm.shape != (cam.height, cam.width):
                raise ValueError(f"camera {i}: depth map dimensions mismatch")
            depth_maps.append(dm)
    scene = SceneDataset(
        cameras=cameras, images=images, normal_maps=normal_maps, depth_maps=depth_maps,
        train_indices=list(manifest["train_indices"]),
        heldout_indices=list(manifest["heldout_indices"]),
        background=np.array(manifest["background"]),
        kind=manifest.get("kind", "custom"), seed=int(manifest.get("seed", 0)),
    )
    scene.validate()
    return scene
