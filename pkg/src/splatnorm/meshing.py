"""Isosurface extraction, mesh coloring, Chamfer evaluation, and exports.

Marching cubes runs on the estimated-SDF grid with the project sign
convention (positive = inside): triangle normals point toward the negative
side.  The 256-case table is constructed once at import by walking each
cube configuration's crossing edges face by face; ambiguous faces are always
resolved the same way from the face's corner signs alone, so adjacent cells
agree and closed level sets triangulate watertight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .formats import write_mesh_obj, write_mesh_ply, write_oriented_points_ply
from .rasterizer import RenderConfig, render
from .sdf import OrientedPointCloud, SdfGrid

WELD_DECIMALS = 9          # vertices closer than 1e-9 are merged
DEGENERATE_AREA = 1e-12

CUBE_VERTS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.float64)
CUBE_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]
CUBE_FACES = [
    (0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
    (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),
]
# local edge -> (axis, di, dj, dk) of the grid edge it lies on
EDGE_GRID = [
    (0, 0, 0, 0), (1, 1, 0, 0), (0, 0, 1, 0), (1, 0, 0, 0),
    (0, 0, 0, 1), (1, 1, 0, 1), (0, 0, 1, 1), (1, 0, 0, 1),
    (2, 0, 0, 0), (2, 1, 0, 0), (2, 1, 1, 0), (2, 0, 1, 0),
]

_EDGE_ID = {frozenset(e): i for i, e in enumerate(CUBE_EDGES)}


def _build_tri_table():
    """Triangle fans (as local edge-id triples) for all 256 sign patterns."""
    table = []
    for config in range(256):
        inside = [(config >> v) & 1 for v in range(8)]
        crossed = [i for i, (a, b) in enumerate(CUBE_EDGES) if inside[a] != inside[b]]
        if not crossed:
            table.append([])
            continue
        partners = {e: [] for e in crossed}
        for face in CUBE_FACES:
            loop = list(face)
            fedges = [_EDGE_ID[frozenset((loop[i], loop[(i + 1) % 4]))] for i in range(4)]
            fcrossed = [e for e in fedges if e in partners]
            if len(fcrossed) == 2:
                a, b = fcrossed
                partners[a].append(b)
                partners[b].append(a)
            elif len(fcrossed) == 4:
                # ambiguous face: connect the pair of edges around each inside
                # corner, decided by the face's corner signs alone so the
                # neighboring cell makes the same choice
                for i in range(4):
                    if inside[loop[i]]:
                        e1 = _EDGE_ID[frozenset((loop[i - 1], loop[i]))]
                        e2 = _EDGE_ID[frozenset((loop[i], loop[(i + 1) % 4]))]
                        partners[e1].append(e2)
                        partners[e2].append(e1)
        assert all(len(p) == 2 for p in partners.values())

        loops = []
        seen = set()
        for start in crossed:
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            prev, cur = None, start
            while True:
                nxt = partners[cur][0] if partners[cur][0] != prev else partners[cur][1]
                if nxt == start:
                    break
                loop.append(nxt)
                seen.add(nxt)
                prev, cur = cur, nxt
            loops.append(loop)

        triangles = []
        for loop in loops:
            mids = np.array([CUBE_VERTS[list(CUBE_EDGES[e])].mean(axis=0) for e in loop])
            normal = np.zeros(3)
            for i in range(len(mids)):  # Newell's method
                a, b = mids[i], mids[(i + 1) % len(mids)]
                normal += np.cross(a, b)
            inner = np.array([
                CUBE_VERTS[CUBE_EDGES[e][0]] if inside[CUBE_EDGES[e][0]]
                else CUBE_VERTS[CUBE_EDGES[e][1]] for e in loop
            ]).mean(axis=0)
            outward = mids.mean(axis=0) - inner
            if np.dot(normal, outward) < 0:
                loop = loop[::-1]
            for i in range(1, len(loop) - 1):
                triangles.append((loop[0], loop[i], loop[i + 1]))
        table.append(triangles)
    return table


TRI_TABLE = _build_tri_table()


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (N, 3)
    triangles: np.ndarray                # (M, 3) vertex indices
    vertex_normals: np.ndarray | None = None
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    def triangle_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norms, 1e-30)

    def compute_vertex_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])  # area-weighted
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, t[:, k], fn)
        vn /= np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-30)
        self.vertex_normals = vn
        return vn

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        """Uniform-by-area surface samples."""
        if len(self.triangles) == 0:
            raise ValueError("cannot sample an empty mesh")
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(t), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=n))
        r2 = rng.uniform(size=n)
        a, b, c = v[t[pick, 0]], v[t[pick, 1]], v[t[pick, 2]]
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the iso level set; sentinel vertices count as outside.

    Linear interpolation along crossed edges, exact vertex sharing through a
    global edge index (welded by construction), triangle normals toward the
    negative (outside) side.  No crossings yield an empty mesh.
    """
    values = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("grid values must be finite")
    values = np.where(values >= 0.999 * grid.sentinel, -grid.sentinel, values)
    nx, ny, nz = values.shape
    inside = values > iso
    ax, ay, az = grid.axes()

    # global crossing vertices per edge direction
    def edge_vertices(axis):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[axis] = slice(0, -1)
        sl1[axis] = slice(1, None)
        v0 = values[tuple(sl0)]
        v1 = values[tuple(sl1)]
        crossed = inside[tuple(sl0)] != inside[tuple(sl1)]
        index = np.full(v0.shape, -1, dtype=np.int64)
        count = int(crossed.sum())
        index[crossed] = np.arange(count)
        t = np.zeros(v0.shape)
        np.divide(iso - v0, v1 - v0, out=t, where=crossed)
        ii, jj, kk = np.nonzero(crossed)
        base = np.stack([ax[ii], ay[jj], az[kk]], axis=1)
        step = np.zeros(3)
        step[axis] = (ax, ay, az)[axis][1] - (ax, ay, az)[axis][0]
        pos = base + t[crossed][:, None] * step
        return index, pos

    idx_x, pos_x = edge_vertices(0)
    idx_y, pos_y = edge_vertices(1)
    idx_z, pos_z = edge_vertices(2)
    offsets = [0, len(pos_x), len(pos_x) + len(pos_y)]
    vertices = (np.concatenate([pos_x, pos_y, pos_z])
                if len(pos_x) + len(pos_y) + len(pos_z) else np.zeros((0, 3)))
    edge_index = [idx_x, idx_y, idx_z]

    # cell configurations
    config = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CUBE_VERTS.astype(int)):
        config |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] << bit

    tri_chunks = []
    for c in np.unique(config):
        tris = TRI_TABLE[c]
        if not tris:
            continue
        ci, cj, ck = np.nonzero(config == c)
        for ea, eb, ec in tris:
            ids = []
            for e in (ea, eb, ec):
                axis, di, dj, dk = EDGE_GRID[e]
                gidx = edge_index[axis][ci + di, cj + dj, ck + dk]
                ids.append(gidx + offsets[axis])
            tri_chunks.append(np.stack(ids, axis=1))
    if not tri_chunks:
        return TriangleMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64))
    triangles = np.concatenate(tri_chunks)

    mesh = _weld_and_clean(vertices, triangles)
    mesh.compute_vertex_normals()
    return mesh


def _weld_and_clean(vertices, triangles) -> TriangleMesh:
    """Merge coincident vertices (1e-9), drop degenerate triangles and
    unused vertices."""
    if len(vertices):
        key = np.round(vertices / 10.0**-WELD_DECIMALS).astype(np.int64)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        vertices = vertices[first]
        triangles = inverse[triangles]
    same = (
        (triangles[:, 0] == triangles[:, 1])
        | (triangles[:, 1] == triangles[:, 2])
        | (triangles[:, 0] == triangles[:, 2])
    )
    triangles = triangles[~same]
    if len(triangles):
        v = vertices
        cross = np.cross(v[triangles[:, 1]] - v[triangles[:, 0]],
                         v[triangles[:, 2]] - v[triangles[:, 0]])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        triangles = triangles[areas > DEGENERATE_AREA]
    used = np.unique(triangles) if len(triangles) else np.zeros(0, dtype=np.int64)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(vertices=vertices[used],
                        triangles=remap[triangles] if len(triangles) else triangles)


def mesh_edges(mesh: TriangleMesh) -> np.ndarray:
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return np.sort(e, axis=1)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge shared by exactly two triangles."""
    if len(mesh.triangles) == 0:
        return False
    edges = mesh_edges(mesh)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    v = len(mesh.vertices)
    f = len(mesh.triangles)
    e = len(np.unique(mesh_edges(mesh), axis=0))
    return v - e + f


def chamfer_distance(a, b, n_samples: int = 100_000, seed: int = 0) -> float:
    """Symmetric Chamfer: half the sum of mean nearest-neighbor distances.

    Accepts point arrays or TriangleMesh (sampled uniformly by area).  Nearest
    neighbors are exact (k-d tree results equal brute force).
    """
    pa = a.sample_points(n_samples, seed) if isinstance(a, TriangleMesh) else np.asarray(a, dtype=np.float64)
    pb = b.sample_points(n_samples, seed + 1) if isinstance(b, TriangleMesh) else np.asarray(b, dtype=np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer_distance needs non-empty inputs")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def color_mesh(mesh: TriangleMesh, gaussians, cameras, cfg: RenderConfig | None = None,
               depth_tolerance: float = 0.01) -> TriangleMesh:
    """Bake rendered colors onto vertices.

    Each vertex takes the color of its most front-facing unoccluded view
    (occlusion test: rendered surface depth within 1% of the vertex depth);
    vertices hidden everywhere average their colored neighbors.
    """
    from .sdf import _bilinear

    cfg = cfg or RenderConfig()
    if mesh.vertex_normals is None:
        mesh.compute_vertex_normals()
    n = len(mesh.vertices)
    best_score = np.full(n, -np.inf)
    colors = np.full((n, 3), np.nan)
    for cam in cameras:
        fb = render(gaussians, cam, cfg)
        v = cam.world_to_view(mesh.vertices)
        z = v[:, 2]
        ok = (z > cam.near) & (z < cam.far)
        px = cam.fx * v[:, 0] / np.where(ok, z, 1.0) + cam.cx
        py = cam.fy * v[:, 1] / np.where(ok, z, 1.0) + cam.cy
        ok &= (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        if not ok.any():
            continue
        alpha = _bilinear(fb.alpha, px, py)
        surf = _bilinear(fb.depth, px, py) / np.maximum(alpha, 1e-12)
        ok &= (alpha > 0.5) & (np.abs(z - surf) <= depth_tolerance * z)
        if not ok.any():
            continue
        to_cam = cam.position - mesh.vertices
        to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-30)
        score = np.abs(np.sum(mesh.vertex_normals * to_cam, axis=1))
        better = ok & (score > best_score)
        if not better.any():
            continue
        img = fb.to_image()
        for ch in range(3):
            colors[better, ch] = _bilinear(img[:, :, ch], px[better], py[better])
        best_score[better] = score[better]

    # neighbor-mean fallback for vertices hidden in every view
    missing = np.isnan(colors[:, 0])
    if missing.any() and not missing.all():
        edges = mesh_edges(mesh)
        for _ in range(64):
            missing = np.isnan(colors[:, 0])
            if not missing.any():
                break
            acc = np.zeros((n, 3))
            cnt = np.zeros(n)
            for u, w in ((edges[:, 0], edges[:, 1]), (edges[:, 1], edges[:, 0])):
                valid = ~np.isnan(colors[w, 0])
                np.add.at(acc, u[valid], colors[w[valid]])
                np.add.at(cnt, u[valid], 1.0)
            fill = missing & (cnt > 0)
            colors[fill] = acc[fill] / cnt[fill][:, None]
    colors = np.where(np.isnan(colors), 0.5, colors)
    mesh.vertex_colors = np.clip(colors, 0.0, 1.0)
    return mesh


def export_oriented_points(cloud: OrientedPointCloud, path) -> None:
    """Poisson-ready oriented point export (binary little-endian PLY)."""
    if len(cloud) == 0:
        raise ValueError("refusing to export an empty point cloud")
    write_oriented_points_ply(path, cloud.positions, cloud.normals)


def export_mesh_obj(mesh: TriangleMesh, path) -> None:
    write_mesh_obj(path, mesh.vertices, mesh.triangles, mesh.vertex_normals)


def export_mesh_ply(mesh: TriangleMesh, path) -> None:
    write_mesh_ply(path, mesh.vertices, mesh.triangles, mesh.vertex_normals,
                   mesh.vertex_colors)
