"""Triangle meshes and scalar grids: signed distance, voxelization, isosurfaces.

Conventions used throughout the package:

* signed distance is negative inside a closed surface, positive outside;
* occupancy is 1 inside, 0 outside, with the surface at the 0.5 level;
* a ``ScalarGrid`` samples its field at cell centers, i.e. value ``[i, j, k]``
  lives at ``origin + spacing * (i + 0.5, j + 0.5, k + 0.5)``, so the grid
  covers the box ``[origin, origin + spacing * dims]``;
* on disk, grid values are little-endian float32 in x-fastest order.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE


class NotWatertightError(ValueError):
    """Raised when an operation needs a closed, consistently oriented mesh."""


# Fixed, generically oriented ray directions for inside/outside parity voting.
# Irrational-ish components avoid axis/edge alignment with typical meshes.
_PARITY_RAYS = np.array([
    [0.57735027, 0.57735027, 0.57735027],
    [-0.28523361, 0.89708523, -0.33726456],
    [0.80178373, -0.26726124, -0.53452248],
])


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in meters; optional unit vertex normals."""

    vertices: np.ndarray          # (V, 3) float64
    faces: np.ndarray             # (F, 3) int64
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices contain NaN/Inf")
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.vertex_normals is not None:
            self.vertex_normals = np.ascontiguousarray(self.vertex_normals, dtype=np.float64)
            if self.vertex_normals.shape != self.vertices.shape:
                raise ValueError("vertex_normals must match vertices shape")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """Face corner positions, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise ValueError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.faces.copy(),
                            None if self.vertex_normals is None else self.vertex_normals.copy())

    def transformed(self, scale: float, offset) -> "TriangleMesh":
        """Similarity transform v -> scale * v + offset (normals unchanged)."""
        return TriangleMesh(self.vertices * float(scale) + np.asarray(offset, dtype=np.float64),
                            self.faces.copy(),
                            None if self.vertex_normals is None else self.vertex_normals.copy())

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two opposing half-edges."""
        if len(self.faces) == 0:
            return False
        f = self.faces
        half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        und = np.sort(half, axis=1)
        _, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
        if not (counts == 2).all():
            return False
        # opposing orientation: of the two half-edges per undirected edge,
        # exactly one must be stored in sorted order
        asc = (half[:, 0] < half[:, 1]).astype(np.int64)
        per_edge = np.zeros(counts.shape, dtype=np.int64)
        np.add.at(per_edge, inverse, asc)
        return bool((per_edge == 1).all())


@dataclass
class ScalarGrid:
    """Uniform scalar field sampled at cell centers."""

    dims: tuple[int, int, int]
    origin: np.ndarray            # (3,) meters, corner of the covered box
    spacing: float                # meters per cell, isotropic
    values: np.ndarray = field(repr=False)  # (nx, ny, nz)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = float(self.spacing)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.dims)
        if any(d < 2 for d in self.dims):
            raise ValueError(f"grid dims must be >= 2 per axis, got {self.dims}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if not np.isfinite(self.values).all():
            raise ValueError("grid values contain NaN/Inf")

    def cell_centers_1d(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + self.spacing * (np.arange(n) + 0.5)

    def cell_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + self.spacing * (np.array([i, j, k]) + 0.5)


def save_grid(grid: ScalarGrid, path) -> None:
    """Binary grid format: "SGRD", u32 version, u32 nx ny nz, f32 origin[3],
    f32 spacing, then nx*ny*nz little-endian f32 values, x-fastest."""
    nx, ny, nz = grid.dims
    with open(path, "wb") as fh:
        fh.write(b"SGRD")
        fh.write(struct.pack("<IIII", 1, nx, ny, nz))
        fh.write(struct.pack("<fff", *grid.origin.astype(np.float32)))
        fh.write(struct.pack("<f", np.float32(grid.spacing)))
        flat = np.transpose(grid.values, (2, 1, 0)).astype("<f4").ravel()
        fh.write(flat.tobytes())


def load_grid(path) -> ScalarGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"SGRD":
            raise ValueError(f"not a grid file (magic {magic!r})")
        version, nx, ny, nz = struct.unpack("<IIII", fh.read(16))
        if version != 1:
            raise ValueError(f"unsupported grid version {version}")
        origin = np.array(struct.unpack("<fff", fh.read(12)), dtype=np.float64)
        spacing = struct.unpack("<f", fh.read(4))[0]
        flat = np.frombuffer(fh.read(4 * nx * ny * nz), dtype="<f4")
        values = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    return ScalarGrid((nx, ny, nz), origin, spacing, values)


def save_obj(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ with v/vn/f records, 1-based indices."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    has_normals = mesh.vertex_normals is not None
    if has_normals:
        for n in mesh.vertex_normals:
            lines.append(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}")
    for f in mesh.faces:
        a, b, c = f + 1
        if has_normals:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    vertices, normals, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    mesh = TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    if normals and len(normals) == len(vertices):
        mesh.vertex_normals = np.array(normals, dtype=np.float64)
    return mesh


# ---------------------------------------------------------------------------
# point/triangle distance


def closest_point_on_triangles(points: np.ndarray, a, b, c) -> np.ndarray:
    """Closest point on triangle (a, b, c) for each paired query point.

    All inputs are (N, 3); vectorized version of Ericson's
    ClosestPtPointTriangle region tests.
    """
    p = points
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(mask, value):
        fresh = mask & ~done
        out[fresh] = value[fresh]
        done[fresh] = True

    settle((d1 <= 0) & (d2 <= 0), a)
    settle((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
    settle((d6 >= 0) & (d5 <= d6), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
    den_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
    settle((va <= 0) & (d4 >= d3) & (d5 >= d6), b + w_bc[:, None] * (c - b))
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    settle(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def unsigned_distance(mesh: TriangleMesh, points: np.ndarray,
                      chunk: int = 512) -> np.ndarray:
    """Exact min distance from each point to the mesh surface (brute force)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.triangles()
    T = len(tri)
    if T == 0:
        raise ValueError("empty mesh")
    result = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        P = len(p)
        pp = np.repeat(p, T, axis=0)
        aa = np.tile(tri[:, 0], (P, 1))
        bb = np.tile(tri[:, 1], (P, 1))
        cc = np.tile(tri[:, 2], (P, 1))
        cl = closest_point_on_triangles(pp, aa, bb, cc)
        d = np.linalg.norm(pp - cl, axis=1).reshape(P, T)
        result[s:s + chunk] = d.min(axis=1)
    return result


class MeshDistanceQuery:
    """Accelerated point-to-surface distance via a KD-tree of surface samples.

    Each sample remembers its source face; a query takes the k nearest
    samples and evaluates the exact point-to-triangle distance on their
    faces. The result is exact whenever the true closest face is among the
    candidates, and its error is bounded by the sample spacing otherwise.
    """

    def __init__(self, mesh: TriangleMesh, target_spacing: float | None = None):
        if mesh.is_empty():
            raise ValueError("empty mesh")
        self.mesh = mesh
        tri = mesh.triangles()
        areas = mesh.face_areas()
        if target_spacing is None:
            # aim for a few samples per face without exploding tiny meshes
            target_spacing = max(np.sqrt(max(areas.sum(), 1e-12)) / 256.0, 1e-6)
        per_face = np.maximum(1, np.ceil(areas / (target_spacing ** 2)).astype(np.int64))
        per_face = np.minimum(per_face, 64)
        face_ids = np.repeat(np.arange(len(tri)), per_face)
        # low-discrepancy barycentric pattern, deterministic
        m = len(face_ids)
        u = (np.arange(m) * 0.7548776662466927) % 1.0
        v = (np.arange(m) * 0.5698402909980532) % 1.0
        flip = u + v > 1
        u[flip] = 1 - u[flip]
        v[flip] = 1 - v[flip]
        t = tri[face_ids]
        samples = (t[:, 0] * (1 - u - v)[:, None] + t[:, 1] * u[:, None]
                   + t[:, 2] * v[:, None])
        corners = tri.reshape(-1, 3)
        corner_ids = np.repeat(np.arange(len(tri)), 3)
        self._samples = np.concatenate([samples, corners])
        self._face_ids = np.concatenate([face_ids, corner_ids])
        self._tree = cKDTree(self._samples)
        self._tri = tri

    def distances(self, points: np.ndarray, k: int = 8) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(k, len(self._samples))
        _, idx = self._tree.query(points, k=k)
        if k == 1:
            idx = idx[:, None]
        cand = self._face_ids[idx]                      # (P, k)
        P = len(points)
        pp = np.repeat(points, k, axis=0)
        t = self._tri[cand.ravel()]
        cl = closest_point_on_triangles(pp, t[:, 0], t[:, 1], t[:, 2])
        d = np.linalg.norm(pp - cl, axis=1).reshape(P, k)
        return d.min(axis=1)


# ---------------------------------------------------------------------------
# inside/outside tests


def _ray_parity(mesh: TriangleMesh, points: np.ndarray, direction: np.ndarray,
                chunk: int = 2048) -> np.ndarray:
    """Parity of ray/surface crossings along one direction (Moller-Trumbore)."""
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    d = direction / np.linalg.norm(direction)
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)                  # (T,)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    crossings = np.zeros(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        svec = p[:, None, :] - v0[None, :, :]           # (P, T, 3)
        u = np.einsum("ptj,tj->pt", svec, h) * inv_det
        q = np.cross(svec, e1[None, :, :])
        v = np.einsum("ptj,j->pt", q, d) * inv_det
        t = np.einsum("ptj,tj->pt", q, e2) * inv_det
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        crossings[s:s + chunk] = hit.sum(axis=1)
    return crossings % 2


def points_inside(mesh: TriangleMesh, points: np.ndarray,
                  check_watertight: bool = True) -> np.ndarray:
    """Inside test by ray-crossing parity, majority over three fixed rays."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if check_watertight and not mesh.is_watertight():
        raise NotWatertightError("inside test needs a closed, oriented mesh")
    votes = np.zeros(len(points), dtype=np.int64)
    for ray in _PARITY_RAYS:
        votes += _ray_parity(mesh, points, ray)
    return votes >= 2


class InsideQuery:
    """Accelerated inside test: one +x ray per point with triangle candidates
    from a 2D bin grid over yz bounding boxes.

    Same parity semantics as points_inside away from grazing configurations;
    built once per mesh, then queries are vectorized per bin.
    """

    def __init__(self, mesh: TriangleMesh, grid: int = 48,
                 check_watertight: bool = True):
        if check_watertight and not mesh.is_watertight():
            raise NotWatertightError("inside test needs a closed, oriented mesh")
        tri = mesh.triangles()
        a = tri[:, 0]
        self._a = a
        self._d00 = tri[:, 1, 1:] - a[:, 1:]              # (T, 2) yz edge 1
        self._d01 = tri[:, 2, 1:] - a[:, 1:]              # (T, 2) yz edge 2
        self._den = (self._d00[:, 0] * self._d01[:, 1]
                     - self._d01[:, 0] * self._d00[:, 1])
        self._ex = np.stack([tri[:, 1, 0] - a[:, 0], tri[:, 2, 0] - a[:, 0]], 1)
        usable = np.abs(self._den) > 1e-16                # not parallel to +x
        lo, hi = mesh.bounding_box()
        self._lo = lo[1:] - 1e-9
        self._hi = hi[1:] + 1e-9
        self._grid = grid
        span = np.maximum(self._hi - self._lo, 1e-12)
        self._inv_cell = grid / span
        tmin = tri[:, :, 1:].min(axis=1)
        tmax = tri[:, :, 1:].max(axis=1)
        b0 = np.clip(((tmin - self._lo) * self._inv_cell).astype(np.int64), 0, grid - 1)
        b1 = np.clip(((tmax - self._lo) * self._inv_cell).astype(np.int64), 0, grid - 1)
        entries = []
        for t in np.nonzero(usable)[0]:
            for by in range(b0[t, 0], b1[t, 0] + 1):
                entries.append((by * grid + np.arange(b0[t, 1], b1[t, 1] + 1), t))
        if entries:
            bins = np.concatenate([e[0] for e in entries])
            tids = np.concatenate([np.full(len(e[0]), e[1]) for e in entries])
            order = np.argsort(bins, kind="stable")
            self._bin_sorted = bins[order]
            self._tri_sorted = tids[order]
            self._bin_starts = np.searchsorted(self._bin_sorted,
                                               np.arange(grid * grid + 1))
        else:
            self._bin_sorted = np.zeros(0, dtype=np.int64)
            self._tri_sorted = np.zeros(0, dtype=np.int64)
            self._bin_starts = np.zeros(grid * grid + 1, dtype=np.int64)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.zeros(len(pts), dtype=bool)
        in_slab = ((pts[:, 1:] >= self._lo) & (pts[:, 1:] <= self._hi)).all(axis=1)
        idx = np.nonzero(in_slab)[0]
        if len(idx) == 0:
            return inside
        cell = np.clip(((pts[idx, 1:] - self._lo) * self._inv_cell).astype(np.int64),
                       0, self._grid - 1)
        bins = cell[:, 0] * self._grid + cell[:, 1]
        order = np.argsort(bins, kind="stable")
        sorted_bins = bins[order]
        boundaries = np.nonzero(np.diff(sorted_bins))[0] + 1
        groups = np.split(order, boundaries)
        for group in groups:
            b = bins[group[0]]
            t0, t1 = self._bin_starts[b], self._bin_starts[b + 1]
            cand = self._tri_sorted[t0:t1]
            if len(cand) == 0:
                continue
            p = pts[idx[group]]
            rel = p[:, None, 1:] - self._a[cand][None, :, 1:]  # (P, T, 2)
            den = self._den[cand]
            u = (rel[:, :, 0] * self._d01[cand, 1]
                 - self._d01[cand, 0] * rel[:, :, 1]) / den
            v = (self._d00[cand, 0] * rel[:, :, 1]
                 - rel[:, :, 0] * self._d00[cand, 1]) / den
            hit = (u >= 0) & (v >= 0) & (u + v <= 1)
            xhit = (self._a[cand, 0][None]
                    + u * self._ex[cand, 0][None] + v * self._ex[cand, 1][None])
            crossings = (hit & (xhit > p[:, 0:1])).sum(axis=1)
            inside[idx[group]] = (crossings % 2) == 1
        return inside


def points_inside_fast(mesh: TriangleMesh, points: np.ndarray,
                       check_watertight: bool = True) -> np.ndarray:
    return InsideQuery(mesh, check_watertight=check_watertight)(points)


def signed_distance(mesh: TriangleMesh, point) -> float:
    """Signed distance to the mesh surface, negative inside."""
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not mesh.is_watertight():
        raise NotWatertightError("signed distance needs a watertight mesh")
    d = unsigned_distance(mesh, point)[0]
    if d < 1e-12:
        return 0.0
    inside = points_inside(mesh, point, check_watertight=False)[0]
    return -d if inside else d


def signed_distances(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Vectorized signed_distance (exact magnitudes, parity-vote signs)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not mesh.is_watertight():
        raise NotWatertightError("signed distance needs a watertight mesh")
    d = unsigned_distance(mesh, points)
    inside = points_inside(mesh, points, check_watertight=False)
    return np.where(inside, -d, d)


def _column_inside(mesh: TriangleMesh, grid: ScalarGrid) -> np.ndarray:
    """Inside mask for all cell centers via x-directed scanline parity.

    For every (y, z) column of cell centers, collect the x coordinates where
    the column's ray crosses a triangle, then mark centers covered by an odd
    number of crossings to their right as inside.
    """
    nx, ny, nz = grid.dims
    xs = grid.cell_centers_1d(0)
    ys = grid.cell_centers_1d(1)
    zs = grid.cell_centers_1d(2)
    # nudge breaks exact vertex/edge alignment deterministically
    eps = 1e-7 * grid.spacing
    ys = ys + eps
    zs = zs + 2.1 * eps

    tri = mesh.triangles()
    col_hits: dict[int, list[float]] = {}
    y0 = ys[0]
    z0 = zs[0]
    sp = grid.spacing
    for t in tri:
        a, b, c = t
        ymin, ymax = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        zmin, zmax = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        j0 = max(0, int(np.ceil((ymin - y0) / sp)))
        j1 = min(ny - 1, int(np.floor((ymax - y0) / sp)))
        k0 = max(0, int(np.ceil((zmin - z0) / sp)))
        k1 = min(nz - 1, int(np.floor((zmax - z0) / sp)))
        if j0 > j1 or k0 > k1:
            continue
        yy = ys[j0:j1 + 1]
        zz = zs[k0:k1 + 1]
        Y, Z = np.meshgrid(yy, zz, indexing="ij")
        # 2D barycentric test in the yz plane
        d00 = (b[1] - a[1], b[2] - a[2])
        d01 = (c[1] - a[1], c[2] - a[2])
        den = d00[0] * d01[1] - d01[0] * d00[1]
        if abs(den) < 1e-16:
            continue  # triangle parallel to the x axis: never crossed transversally
        py = Y - a[1]
        pz = Z - a[2]
        u = (py * d01[1] - d01[0] * pz) / den
        v = (d00[0] * pz - py * d00[1]) / den
        hit = (u >= 0) & (v >= 0) & (u + v <= 1)
        if not hit.any():
            continue
        # x on the triangle plane at (y, z)
        xhit = a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0])
        jj, kk = np.nonzero(hit)
        cols = (j0 + jj) * nz + (k0 + kk)
        for col, xv in zip(cols.tolist(), xhit[hit].tolist()):
            col_hits.setdefault(col, []).append(xv)

    inside = np.zeros((nx, ny, nz), dtype=bool)
    for col, hits in col_hits.items():
        j, k = divmod(col, nz)
        hits = np.sort(np.asarray(hits))
        # crossings strictly to the right of the center: odd count = inside
        n_right = len(hits) - np.searchsorted(hits, xs, side="right")
        inside[:, j, k] = (n_right % 2) == 1
    return inside


# ---------------------------------------------------------------------------
# spec operations


def voxelize_occupancy(mesh: TriangleMesh, dims,
                       origin=None, spacing: float | None = None) -> ScalarGrid:
    """Binary occupancy grid: cell = 1 iff its center is inside the mesh.

    Without explicit placement the grid covers the mesh bounding box with
    isotropic cells (the longest axis fixes the spacing, other axes are
    centered).
    """
    if not mesh.is_watertight():
        raise NotWatertightError("voxelization needs a watertight mesh")
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if origin is None or spacing is None:
        lo, hi = mesh.bounding_box()
        extent = hi - lo
        if np.any(extent <= 0):
            raise ValueError("degenerate bounding box")
        spacing = float(np.max(extent / np.asarray(dims)))
        center = 0.5 * (lo + hi)
        origin = center - 0.5 * spacing * np.asarray(dims)
    grid = ScalarGrid(dims, origin, spacing, np.zeros(dims))
    inside = _column_inside(mesh, grid)
    grid.values = inside.astype(np.float64)
    return grid


def mesh_to_sdf_grid(mesh: TriangleMesh, dims, padding: float,
                     origin=None, spacing: float | None = None) -> ScalarGrid:
    """Signed distance sampled at cell centers of a grid covering the mesh
    bounding box expanded by ``padding`` on every side."""
    if not mesh.is_watertight():
        raise NotWatertightError("SDF grid needs a watertight mesh")
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if origin is None or spacing is None:
        lo, hi = mesh.bounding_box()
        extent = hi - lo
        if np.any(extent <= 0):
            raise ValueError("degenerate bounding box")
        if padding < 0:
            raise ValueError("padding must be nonnegative")
        spacing = float(np.max((extent + 2 * padding) / np.asarray(dims)))
        center = 0.5 * (lo + hi)
        origin = center - 0.5 * spacing * np.asarray(dims)
    grid = ScalarGrid(dims, origin, spacing, np.zeros(dims))
    xs = grid.cell_centers_1d(0)
    ys = grid.cell_centers_1d(1)
    zs = grid.cell_centers_1d(2)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    centers = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    query = MeshDistanceQuery(mesh, target_spacing=0.5 * grid.spacing)
    dist = query.distances(centers).reshape(grid.dims)
    inside = _column_inside(mesh, grid)
    grid.values = np.where(inside, -dist, dist)
    return grid


def marching_cubes(grid: ScalarGrid, iso: float) -> TriangleMesh:
    """Extract the iso-level set as a triangle mesh (256-case table, linear
    edge interpolation). Output normals point toward increasing field values,
    so SDF grids at iso 0 produce outward-facing surfaces."""
    values = grid.values
    nx, ny, nz = grid.dims
    inside = values < iso

    # 8-bit case index per cell
    ci = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        ci |= inside[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz] << bit

    active = np.nonzero((ci != 0) & (ci != 255))
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell_idx = np.stack(active, axis=1)                 # (A, 3)
    cases = ci[active]                                  # (A,)
    masks = EDGE_TABLE[cases]                           # (A,)

    # canonical lattice-edge key per cube edge: lower cell-center node + axis
    edge_lower = np.minimum(CORNER_OFFSETS[EDGE_CORNERS[:, 0]],
                            CORNER_OFFSETS[EDGE_CORNERS[:, 1]])        # (12, 3)
    edge_axis = np.argmax(np.abs(CORNER_OFFSETS[EDGE_CORNERS[:, 0]]
                                 - CORNER_OFFSETS[EDGE_CORNERS[:, 1]]), axis=1)

    need = (masks[:, None] & (1 << np.arange(12))[None, :]) != 0       # (A, 12)
    lower = cell_idx[:, None, :] + edge_lower[None, :, :]              # (A, 12, 3)
    keys = ((lower[..., 0] * ny + lower[..., 1]) * nz
            + lower[..., 2]) * 3 + edge_axis[None, :]                  # (A, 12)

    used_keys = keys[need]
    uniq_keys, inv = np.unique(used_keys, return_inverse=True)
    vert_of = np.full((len(cell_idx), 12), -1, dtype=np.int64)
    vert_of[need] = inv

    # interpolate one vertex per unique lattice edge
    axis = uniq_keys % 3
    rest = uniq_keys // 3
    kz = rest % nz
    rest //= nz
    ky = rest % ny
    kx = rest // ny
    p1 = np.stack([kx, ky, kz], axis=1)
    p2 = p1.copy()
    p2[np.arange(len(p2)), axis] += 1
    v1 = values[p1[:, 0], p1[:, 1], p1[:, 2]]
    v2 = values[p2[:, 0], p2[:, 1], p2[:, 2]]
    denom = v2 - v1
    t = np.where(np.abs(denom) > 1e-300, (iso - v1) / np.where(denom == 0, 1.0, denom), 0.5)
    t = np.clip(t, 0.0, 1.0)
    pos1 = grid.origin + grid.spacing * (p1 + 0.5)
    pos2 = grid.origin + grid.spacing * (p2 + 0.5)
    verts = pos1 + t[:, None] * (pos2 - pos1)

    # assemble faces from the triangle table
    tris = TRI_TABLE[cases]                             # (A, 16)
    valid = tris >= 0
    n_tri = valid.sum(axis=1) // 3
    rows = np.repeat(np.arange(len(cases)), n_tri * 3)
    cols = np.concatenate([np.arange(3 * n) for n in n_tri]) if len(n_tri) else np.array([], dtype=np.int64)
    edge_ids = tris[rows, cols]
    faces = vert_of[rows, edge_ids].reshape(-1, 3)
    if (faces < 0).any():
        raise RuntimeError("marching cubes consistency failure")
    # table winding faces the low-value side; flip so normals point toward
    # increasing values (outward for negative-inside SDFs)
    return TriangleMesh(verts, faces[:, [0, 2, 1]])


def compute_vertex_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Area-weighted average of incident face normals, normalized in place."""
    tri = mesh.triangles()
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # length = 2*area
    normals = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(normals, mesh.faces[:, c], face_n)
    norms = np.linalg.norm(normals, axis=1)
    degenerate = norms < 1e-14
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} vertices with zero normal "
                      "(isolated or degenerate)", stacklevel=2)
    normals[~degenerate] /= norms[~degenerate, None]
    return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy(), normals)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0, 0, 0)) -> TriangleMesh:
    """Geodesic sphere by repeated midpoint subdivision of an icosahedron."""
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        mids: dict[tuple[int, int], int] = {}
        vlist = list(verts)
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in mids:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                mids[key] = len(vlist)
                vlist.append(m)
            return mids[key]

        for (a, b, c) in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius + np.asarray(center, dtype=np.float64), faces)


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box with outward-facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
             (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7)]
    faces = []
    for (a, b, c, d) in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(corners, np.array(faces, dtype=np.int64))
