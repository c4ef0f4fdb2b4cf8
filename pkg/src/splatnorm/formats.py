"""File formats: PFM float maps, 8-bit PNG, and the splatting PLY layouts.

Float channels (depth, normals) travel as little-endian PFM so supervision
signals are never quantized; color travels as 8-bit PNG.  Gaussian sets use
the de-facto splatting PLY vertex layout so files interoperate with
mainstream trainers and viewers.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

from .core import GaussianSet


class PlyFormatError(ValueError):
    """Malformed PLY header or property layout."""


# ---------------------------------------------------------------------------
# PFM (portable float map), scale -1.0 = little endian, rows bottom-to-top
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) arrays")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: magic {magic!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# PNG color images
# ---------------------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """Write a float [0, 1] (H, W, 3) image as 8-bit RGB."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Gaussian PLY (binary little-endian, float32)
# ---------------------------------------------------------------------------

GAUSSIAN_PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def save_gaussians(gs: GaussianSet, path) -> None:
    """Write the set in the interoperable splatting layout (see module docs).

    f_rest is channel-major: 15 degree>=1 coefficients for R, then G, then B.
    opacity is the raw logit, scale_* the log scales, rot_* the quaternion.
    """
    n = len(gs)
    rows = np.zeros((n, len(GAUSSIAN_PLY_PROPERTIES)), dtype="<f4")
    rows[:, 0:3] = gs.means
    rows[:, 6:9] = gs.sh_coeffs[:, :, 0]
    rows[:, 9:54] = gs.sh_coeffs[:, :, 1:].reshape(n, 45)
    rows[:, 54] = gs.opacity_logits
    rows[:, 55:58] = gs.log_scales
    rows[:, 58:62] = gs.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in GAUSSIAN_PLY_PROPERTIES]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def load_gaussians(path) -> GaussianSet:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyFormatError("malformed PLY header")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise PlyFormatError("expected binary little-endian PLY")
    count = None
    props: list[str] = []
    for line in lines:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("element "):
            raise PlyFormatError(f"unexpected element: {line}")
        elif line.startswith("property") and count is not None:
            kind, name = line.split()[1:3]
            if kind != "float":
                raise PlyFormatError(f"property {name} must be float32")
            props.append(name)
    if count is None:
        raise PlyFormatError("missing vertex element")
    if props != GAUSSIAN_PLY_PROPERTIES:
        missing = set(GAUSSIAN_PLY_PROPERTIES) - set(props)
        raise PlyFormatError(
            f"property layout mismatch (missing: {sorted(missing) or 'none'}; "
            f"got {len(props)} properties)"
        )
    body = blob[end + len(b"end_header\n"):]
    expected = count * len(props) * 4
    if len(body) < expected:
        raise PlyFormatError("truncated PLY body")
    rows = np.frombuffer(body[:expected], dtype="<f4").reshape(count, len(props)).astype(np.float64)
    sh = np.zeros((count, 3, 16))
    sh[:, :, 0] = rows[:, 6:9]
    sh[:, :, 1:] = rows[:, 9:54].reshape(count, 3, 15)
    gs = GaussianSet(
        means=rows[:, 0:3],
        rotations=rows[:, 58:62],
        log_scales=rows[:, 55:58],
        opacity_logits=rows[:, 54],
        sh_coeffs=sh,
        scene_bounds=np.stack([rows[:, 0:3].min(axis=0), rows[:, 0:3].max(axis=0)])
        if count else np.zeros((2, 3)),
    )
    norms = np.linalg.norm(gs.rotations, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise PlyFormatError("zero-norm rotation quaternion in file")
    gs.rotations = gs.rotations / norms
    return gs


# ---------------------------------------------------------------------------
# Oriented point clouds and triangle meshes
# ---------------------------------------------------------------------------

def write_oriented_points_ply(path, positions: np.ndarray, normals: np.ndarray) -> None:
    """Binary little-endian PLY with x,y,z,nx,ny,nz float32, Poisson-tool ready."""
    positions = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    normals = np.asarray(normals, dtype="<f4").reshape(-1, 3)
    if len(positions) == 0:
        raise ValueError("refusing to write an empty point cloud")
    if len(positions) != len(normals):
        raise ValueError("positions and normals disagree in length")
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(positions)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.hstack([positions, normals]).astype("<f4").tobytes())


def read_oriented_points_ply(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyFormatError("malformed PLY header")
    count = 0
    for line in blob[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    data = np.frombuffer(blob[end + len(b"end_header\n"):], dtype="<f4", count=count * 6)
    data = data.reshape(count, 6).astype(np.float64)
    return data[:, :3], data[:, 3:]


def write_mesh_obj(path, vertices, triangles, vertex_normals=None) -> None:
    """ASCII OBJ with v/vn/f records; face indices are 1-based."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in vertices]
    if vertex_normals is not None:
        lines += [f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}" for n in np.asarray(vertex_normals)]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in triangles + 1]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_mesh_ply(path):
    """Read back a mesh written by `write_mesh_ply`.

    Returns (vertices, triangles, vertex_normals, vertex_colors in [0, 1]).
    """
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyFormatError("malformed PLY header")
    n_vert = n_face = 0
    for line in blob[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
    body = blob[end + len(b"end_header\n"):]
    vertex_dtype = np.dtype([("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)])
    verts = np.frombuffer(body, dtype=vertex_dtype, count=n_vert)
    face_dtype = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
    faces = np.frombuffer(body[n_vert * vertex_dtype.itemsize:], dtype=face_dtype, count=n_face)
    if n_face and not np.all(faces["count"] == 3):
        raise PlyFormatError("non-triangular face in mesh PLY")
    return (
        verts["xyz"].astype(np.float64),
        faces["idx"].astype(np.int64),
        verts["n"].astype(np.float64),
        verts["rgb"].astype(np.float64) / 255.0,
    )


def write_mesh_ply(path, vertices, triangles, vertex_normals=None, vertex_colors=None) -> None:
    """Binary little-endian mesh PLY: x,y,z,nx,ny,nz float32 + red,green,blue uchar."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    n = len(vertices)
    normals = (np.zeros((n, 3)) if vertex_normals is None
               else np.asarray(vertex_normals, dtype=np.float64).reshape(n, 3))
    colors = (np.full((n, 3), 0.5) if vertex_colors is None
              else np.asarray(vertex_colors, dtype=np.float64).reshape(n, 3))
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    vertex_dtype = np.dtype(
        [("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)]
    )
    rows = np.zeros(n, dtype=vertex_dtype)
    rows["xyz"] = vertices
    rows["n"] = normals
    rows["rgb"] = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    face_dtype = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
    faces = np.zeros(len(triangles), dtype=face_dtype)
    faces["count"] = 3
    faces["idx"] = triangles
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())
        f.write(faces.tobytes())
