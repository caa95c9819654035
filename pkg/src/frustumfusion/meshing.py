"""Isosurface extraction (marching cubes over a dense SDF grid), chamfer
distance with a spatial-grid nearest-neighbor index, and mesh utilities."""

from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

DEFAULT_RESOLUTION = 128
DEFAULT_BBOX = (-1.0, 1.0)
DEFAULT_SAMPLE_COUNT = 100_000


@dataclass
class SdfGrid:
    values: np.ndarray      # (nx, ny, nz)
    origin: np.ndarray      # (3,)
    spacing: np.ndarray     # (3,)

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("SdfGrid values must be finite")


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (n, 3) float64
    faces: np.ndarray       # (m, 3) int64

    def __post_init__(self):
        if len(self.faces) and (self.faces.max() >= len(self.vertices)
                                or self.faces.min() < 0):
            raise ValueError("face indices out of range")

    def is_empty(self):
        return len(self.faces) == 0


def sample_sdf_grid(field_fn, bbox=DEFAULT_BBOX, resolution=DEFAULT_RESOLUTION,
                    chunk_size=65536):
    """Evaluate a scalar field on a cubic lattice, chunked to bound memory.

    field_fn maps (P, 3) float32 points to (P,) values. Chunk boundaries
    never produce chunks smaller than 32 points (tiny tails are merged into
    the previous chunk) so results are identical for any chunk size.
    """
    lo, hi = bbox
    axis = np.linspace(lo, hi, resolution, dtype=np.float64)
    spacing = np.full(3, (hi - lo) / (resolution - 1))
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3).astype(np.float32)
    n = len(pts)
    chunk_size = max(int(chunk_size), 32)
    bounds = list(range(0, n, chunk_size)) + [n]
    if len(bounds) >= 3 and bounds[-1] - bounds[-2] < 32:
        bounds.pop(-2)
    vals = np.empty(n, dtype=np.float32)
    for lo_i, hi_i in zip(bounds[:-1], bounds[1:]):
        out = np.asarray(field_fn(pts[lo_i:hi_i]), dtype=np.float32)
        vals[lo_i:hi_i] = out.reshape(-1)
    grid = vals.reshape(resolution, resolution, resolution)
    return SdfGrid(values=grid, origin=np.array([lo, lo, lo]),
                   spacing=spacing)


def _global_edge_ids(ii, jj, kk, ny, nz):
    """Map cell coords + the 12 local edges to unique lattice edge ids.

    A lattice edge is identified by its lower corner and axis
    (0=x, 1=y, 2=z): id = ((i*ny + j)*nz + k)*3 + axis.
    """
    def eid(i, j, k, axis):
        return ((i * ny + j) * nz + k) * 3 + axis

    return np.stack([
        eid(ii, jj, kk, 0),              # e0: v0-v1 (+x)
        eid(ii + 1, jj, kk, 1),          # e1: v1-v2 (+y)
        eid(ii, jj + 1, kk, 0),          # e2: v3-v2 (+x)
        eid(ii, jj, kk, 1),              # e3: v0-v3 (+y)
        eid(ii, jj, kk + 1, 0),          # e4
        eid(ii + 1, jj, kk + 1, 1),      # e5
        eid(ii, jj + 1, kk + 1, 0),      # e6
        eid(ii, jj, kk + 1, 1),          # e7
        eid(ii, jj, kk, 2),              # e8: v0-v4 (+z)
        eid(ii + 1, jj, kk, 2),          # e9
        eid(ii + 1, jj + 1, kk, 2),      # e10
        eid(ii, jj + 1, kk, 2),          # e11
    ], axis=1)


def marching_cubes(grid, iso=0.0):
    """Classic marching cubes with shared vertices on lattice edges.

    Vertices are linearly interpolated zero crossings; faces index into the
    deduplicated vertex array, so adjacent cells share vertices exactly.
    Degenerate triangles (repeated vertex ids) are dropped. A grid without
    any sign change yields an empty mesh.
    """
    vals = grid.values
    nx, ny, nz = vals.shape
    if min(nx, ny, nz) < 2:
        raise ValueError("marching_cubes needs at least 2 samples per axis")
    inside = vals < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= (inside[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
                 .astype(np.uint16) << bit)
    active = (case != 0) & (case != 255)
    if not active.any():
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            faces=np.zeros((0, 3), dtype=np.int64))
    ii, jj, kk = np.nonzero(active)
    cell_cases = case[ii, jj, kk]
    cell_edges = _global_edge_ids(ii, jj, kk, ny, nz)   # (n_cells, 12)

    tri_counts = np.array([sum(1 for e in row if e >= 0) // 3
                           for row in TRI_TABLE])
    faces_edges = []
    for c in np.unique(cell_cases):
        row = [e for e in TRI_TABLE[c] if e >= 0]
        sel = cell_cases == c
        edges_c = cell_edges[sel]                       # (m, 12)
        tris = np.asarray(row, dtype=np.int64).reshape(-1, 3)
        for tri in tris:
            faces_edges.append(edges_c[:, tri])
    faces_eids = np.concatenate(faces_edges, axis=0)

    used, faces = np.unique(faces_eids, return_inverse=True)
    faces = faces.reshape(-1, 3)

    # vertex per used lattice edge: linear interpolation of zero crossing
    axis = used % 3
    rest = used // 3
    k0 = rest % nz
    j0 = (rest // nz) % ny
    i0 = rest // (nz * ny)
    p0 = np.stack([i0, j0, k0], axis=1).astype(np.float64)
    offs = np.eye(3, dtype=np.int64)[axis]
    i1, j1, k1 = i0 + offs[:, 0], j0 + offs[:, 1], k0 + offs[:, 2]
    v0 = vals[i0, j0, k0].astype(np.float64)
    v1 = vals[i1, j1, k1].astype(np.float64)
    denom = v1 - v0
    t = np.where(np.abs(denom) > 0, (iso - v0) / np.where(denom == 0, 1.0,
                                                          denom), 0.5)
    t = np.clip(t, 0.0, 1.0)
    pos = p0 + offs * t[:, None]
    verts = grid.origin[None, :] + pos * grid.spacing[None, :]

    # drop degenerate faces (tri-table corners landing on the same vertex)
    ok = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
          & (faces[:, 0] != faces[:, 2]))
    faces = faces[ok]
    # the tri counts array documents expected face totals per case; keep a
    # cheap sanity check against gross table corruption
    expected = int(tri_counts[cell_cases].sum())
    if len(faces) > expected:
        raise AssertionError("marching cubes produced excess faces")
    return TriangleMesh(vertices=verts, faces=faces.astype(np.int64))


def edge_incidence(mesh):
    """Map each undirected mesh edge to the number of incident faces."""
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def is_watertight(mesh):
    """True when every edge is shared by exactly two faces."""
    if mesh.is_empty():
        return False
    _, counts = edge_incidence(mesh)
    return bool(np.all(counts == 2))


def triangle_areas(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh_points(mesh, count=DEFAULT_SAMPLE_COUNT, rng=None):
    """Uniform area-weighted surface samples."""
    if mesh.is_empty():
        return np.zeros((0, 3))
    rng = rng or np.random.default_rng(0)
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    probs = areas / total
    idx = rng.choice(len(areas), size=count, p=probs)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    a = mesh.vertices[mesh.faces[idx, 0]]
    b = mesh.vertices[mesh.faces[idx, 1]]
    c = mesh.vertices[mesh.faces[idx, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# ---------------------------------------------------------------------------
# chamfer distance
# ---------------------------------------------------------------------------

def _min_sq_dist(points, q):
    """Smallest squared distance from q to a point array. Shared by the
    grid index and the brute-force path so their results are bit-equal."""
    d = points - q
    return float((d * d).sum(axis=1).min())


class GridIndex:
    """Uniform-grid nearest-neighbor index with exact expanding-ring
    search: after scanning all cells within Chebyshev ring r, any point in
    an unscanned cell is farther than r * cell, so the current best is
    final once best <= r * cell. Queries that leave the near rings empty
    fall back to a brute-force scan (exact by construction)."""

    MAX_RING = 4

    def __init__(self, points, cell=None):
        self.points = np.asarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("empty point set")
        span = float(np.ptp(self.points, axis=0).max())
        if cell is None:
            cell = span / max(len(self.points) ** (1 / 3), 1.0)
        self.degenerate = not (cell > 0) or len(self.points) < 8
        self.cell = float(cell) if cell > 0 else 1.0
        self.origin = self.points.min(axis=0)
        self.cells = {}
        if not self.degenerate:
            coords = np.floor((self.points - self.origin) / self.cell)
            for i, key in enumerate(map(tuple, coords.astype(np.int64))):
                self.cells.setdefault(key, []).append(i)
            self.cells = {k: np.asarray(v) for k, v in self.cells.items()}

    def _ring_keys(self, base, r):
        bx, by, bz = base
        if r == 0:
            yield base
            return
        rng = range(-r, r + 1)
        for dx in rng:
            for dy in rng:
                for dz in rng:
                    if max(abs(dx), abs(dy), abs(dz)) == r:
                        yield (bx + dx, by + dy, bz + dz)

    def nearest_distance(self, query):
        """Distance from each query point to its nearest indexed point."""
        query = np.asarray(query, dtype=np.float64)
        out = np.empty(len(query))
        for qi, q in enumerate(query):
            if self.degenerate:
                out[qi] = np.sqrt(_min_sq_dist(self.points, q))
                continue
            base = tuple(np.floor((q - self.origin) / self.cell)
                         .astype(np.int64))
            best = np.inf
            resolved = False
            for r in range(self.MAX_RING + 1):
                cand = []
                for key in self._ring_keys(base, r):
                    hit = self.cells.get(key)
                    if hit is not None:
                        cand.append(hit)
                if cand:
                    idx = (cand[0] if len(cand) == 1
                           else np.concatenate(cand))
                    best = min(best, _min_sq_dist(self.points[idx], q))
                if best <= (r * self.cell) ** 2:
                    resolved = True
                    break
            if not resolved:
                best = _min_sq_dist(self.points, q)
            out[qi] = np.sqrt(best)
        return out


def nearest_distances_brute(a, b):
    """O(n*m) exact nearest distances from each point of a to set b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    for i, p in enumerate(a):
        out[i] = np.sqrt(_min_sq_dist(b, p))
    return out


def chamfer(a, b, method="grid"):
    """Symmetric chamfer distance: (mean NN(a->b) + mean NN(b->a)) / 2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    if method == "grid":
        d_ab = GridIndex(b).nearest_distance(a)
        d_ba = GridIndex(a).nearest_distance(b)
    elif method == "brute":
        d_ab = nearest_distances_brute(a, b)
        d_ba = nearest_distances_brute(b, a)
    else:
        raise ValueError(f"unknown chamfer method {method!r}")
    return 0.5 * (d_ab.mean() + d_ba.mean())
