"""Triangle meshes, test domains and sampling designs.

A :class:`TriMesh` is immutable once built: geometry (areas, edge lengths,
normals) and vertex-to-triangle adjacency are computed in the constructor and
the arrays are marked read-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import qmc

from .errors import InvalidArgument, MeshError


class TriMesh:
    """Oriented triangulated surface.

    Args:
        vertices: (n, 3) positions. 2-D input is padded with z = 0.
        triangles: (m, 3) vertex indices, counter-clockwise w.r.t. the normal.
    """

    def __init__(self, vertices, triangles, *, check: bool = True):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError(f"vertices must have shape (n, 2|3), got {v.shape}")
        if v.shape[1] == 2:
            v = np.column_stack([v, np.zeros(len(v))])
        t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.vertices = v
        self.triangles = t
        bad = np.flatnonzero((t < 0).any(1) | (t >= len(v)).any(1))
        if len(bad):  # checked early: geometry below indexes with t
            raise MeshError(f"triangle {bad[0]} has out-of-range vertex index",
                            entity=("triangle", int(bad[0])))

        p0, p1, p2 = (v[t[:, k]] for k in range(3))
        cross = np.cross(p1 - p0, p2 - p0)
        dbl = np.linalg.norm(cross, axis=1)
        self.areas = 0.5 * dbl
        with np.errstate(invalid="ignore", divide="ignore"):
            self.normals = cross / dbl[:, None]
        # edge k is opposite to corner k
        self.edge_lengths = np.column_stack(
            [np.linalg.norm(p2 - p1, axis=1),
             np.linalg.norm(p0 - p2, axis=1),
             np.linalg.norm(p1 - p0, axis=1)])
        if check:
            self.validate()

        order = np.argsort(t.ravel(), kind="stable")
        counts = np.bincount(t.ravel(), minlength=len(v))
        self._vt_ptr = np.concatenate([[0], np.cumsum(counts)])
        self._vt_idx = order // 3
        for arr in (self.vertices, self.triangles, self.areas, self.normals,
                    self.edge_lengths, self._vt_ptr, self._vt_idx):
            arr.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def vertex_triangles(self, i: int) -> np.ndarray:
        return self._vt_idx[self._vt_ptr[i]:self._vt_ptr[i + 1]]

    def validate(self) -> None:
        """Raise :class:`MeshError` if any structural invariant is violated."""
        t, nv = self.triangles, len(self.vertices)
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        bad = np.flatnonzero((t < 0).any(1) | (t >= nv).any(1))
        if len(bad):
            raise MeshError(f"triangle {bad[0]} has out-of-range vertex index",
                            entity=("triangle", int(bad[0])))
        bad = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2])
                             | (t[:, 0] == t[:, 2]))
        if len(bad):
            raise MeshError(f"triangle {bad[0]} repeats a vertex",
                            entity=("triangle", int(bad[0])))
        scale = max(np.ptp(self.vertices, axis=0).max(), 1e-300)
        bad = np.flatnonzero(~(self.areas > 1e-14 * scale**2))
        if len(bad):
            raise MeshError(f"triangle {bad[0]} is degenerate (zero area)",
                            entity=("triangle", int(bad[0])))

        half = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(half, axis=1)
        uniq, inv, cnt = np.unique(key, axis=0, return_inverse=True,
                                   return_counts=True)
        if (cnt > 2).any():
            e = uniq[np.argmax(cnt > 2)]
            raise MeshError(f"non-manifold edge ({e[0]}, {e[1]}) shared by "
                            f"{cnt.max()} triangles", entity=("edge", tuple(map(int, e))))
        # an interior edge must be traversed in both directions
        hu, hcnt = np.unique(half, axis=0, return_counts=True)
        if (hcnt > 1).any():
            e = hu[np.argmax(hcnt > 1)]
            raise MeshError(f"inconsistent orientation at edge ({e[0]}, {e[1]})",
                            entity=("edge", tuple(map(int, e))))

    # -- derived quantities ------------------------------------------------

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, (k, 2) with i < j."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        u, c = np.unique(e, axis=0, return_counts=True)
        mask = np.zeros(self.n_vertices, bool)
        mask[u[c == 1].ravel()] = True
        return mask

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        n = np.zeros_like(self.vertices)
        w = (self.normals * self.areas[:, None])
        for k in range(3):
            np.add.at(n, self.triangles[:, k], w)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def vertex_areas(self) -> np.ndarray:
        """Summed area of incident triangles."""
        return np.bincount(self.triangles.ravel(),
                           weights=np.repeat(self.areas, 3),
                           minlength=self.n_vertices)

    @cached_property
    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]],
                                    axis=1).mean())

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def is_planar(self, tol: float = 1e-8) -> bool:
        return bool(np.all(np.abs(self.normals @ self.normals[0]) >= 1 - tol))

    def vertex_neighbors(self) -> list[np.ndarray]:
        e = self.edges
        nb = [[] for _ in range(self.n_vertices)]
        for i, j in e:
            nb[i].append(j)
            nb[j].append(i)
        return [np.array(sorted(x), dtype=np.int64) for x in nb]


@dataclass(frozen=True)
class PointSample:
    """A point on the mesh given by triangle and barycentric coordinates."""

    triangle: int
    bary: tuple[float, float, float]
    position: tuple[float, float, float]
    distance: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.bary)
        if abs(b.sum() - 1) > 1e-12 or (b < 0).any():
            raise InvalidArgument(f"invalid barycentric coordinates {self.bary}")


@dataclass(frozen=True)
class SampleSet:
    """Vectorized collection of surface points (triangle, barycentric, position)."""

    triangles: np.ndarray
    bary: np.ndarray
    positions: np.ndarray
    distances: np.ndarray | None = None

    def __len__(self):
        return len(self.triangles)

    def __getitem__(self, i) -> PointSample:
        return PointSample(int(self.triangles[i]), tuple(map(float, self.bary[i])),
                           tuple(map(float, self.positions[i])),
                           0.0 if self.distances is None else float(self.distances[i]))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.triangles[idx], self.bary[idx], self.positions[idx],
                         None if self.distances is None else self.distances[idx])

    def interpolate(self, mesh: TriMesh, values: np.ndarray) -> np.ndarray:
        """Barycentric interpolation of per-vertex ``values``."""
        vals = np.asarray(values)[mesh.triangles[self.triangles]]
        return np.einsum("nk,nk...->n...", self.bary, vals)


# -- domains -----------------------------------------------------------------

def build_unit_grid_mesh(n: int) -> TriMesh:
    """Regular n x n grid on [-1, 1]^2, each cell split along its
    lower-left to upper-right diagonal."""
    if int(n) != n or n < 2:
        raise InvalidArgument(f"grid needs n >= 2 points per side, got {n}")
    n = int(n)
    xs = np.linspace(-1.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(n * n)])
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="xy")
    v00 = (j * n + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + n, v00 + n + 1
    tris = np.concatenate([np.column_stack([v00, v10, v11]),
                           np.column_stack([v00, v11, v01])])
    return TriMesh(verts, tris)


def build_cylinder_mesh(n_around: int = 32, n_along: int = 16,
                        radius: float = 1.0, length: float = 2.0) -> TriMesh:
    """Open cylinder around the z-axis, outward normals."""
    if n_around < 3 or n_along < 2:
        raise InvalidArgument("cylinder needs n_around >= 3 and n_along >= 2")
    th = 2 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(-length / 2, length / 2, n_along)
    verts = np.array([(radius * np.cos(a), radius * np.sin(a), z)
                      for z in zs for a in th])
    tris = []
    for r in range(n_along - 1):
        for c in range(n_around):
            a, b = r * n_around + c, r * n_around + (c + 1) % n_around
            tris += [(a, b, b + n_around), (a, b + n_around, a + n_around)]
    return TriMesh(verts, tris)


def build_icosphere_mesh(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Closed sphere by repeated midpoint subdivision of an icosahedron."""
    p = (1 + 5 ** 0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
         (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
         (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(radius * np.array(verts), f)


def build_hemisphere_mesh(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Upper part (z >= 0 at all corners) of an icosphere, compacted."""
    sphere = build_icosphere_mesh(subdivisions, radius)
    t = sphere.triangles
    keep = (sphere.vertices[t][:, :, 2] >= -1e-12).all(axis=1)
    t = t[keep]
    used = np.unique(t)
    remap = -np.ones(sphere.n_vertices, np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(sphere.vertices[used], remap[t])


# -- sampling ----------------------------------------------------------------

def latin_hypercube_sample(n: int, bounds, seed: int | None = None) -> np.ndarray:
    """Random Latin hypercube design with one point per stratum on every axis.

    ``bounds`` is a sequence of (low, high) pairs, one per axis.
    """
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or not np.all(b[:, 1] > b[:, 0]):
        raise InvalidArgument(f"degenerate bounds {bounds!r}")
    u = qmc.LatinHypercube(d=len(b), seed=np.random.default_rng(seed)).random(n)
    return b[:, 0] + u * (b[:, 1] - b[:, 0])


def farthest_point_sample(mesh: TriMesh, k: int, start_vertex: int) -> list[int]:
    """Greedy farthest-point selection under unit-speed geodesic distance.

    Ties go to the lowest vertex index.
    """
    from .eikonal import geodesic_distance

    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    if k > mesh.n_vertices:
        raise InvalidArgument(f"k={k} exceeds vertex count {mesh.n_vertices}")
    if not 0 <= start_vertex < mesh.n_vertices:
        raise InvalidArgument(f"start vertex {start_vertex} out of range")
    chosen = [int(start_vertex)]
    dist = geodesic_distance(mesh, [start_vertex])
    while len(chosen) < k:
        d = np.where(np.isfinite(dist), dist, -1.0)
        d[chosen] = -1.0
        nxt = int(np.argmax(d))  # first maximum -> lowest index
        chosen.append(nxt)
        dist = np.minimum(dist, geodesic_distance(mesh, [nxt]))
    return chosen


def sample_uniform_by_area(mesh: TriMesh, n: int, seed: int | None = None) -> SampleSet:
    """Uniform random points on the surface (area-weighted triangle choice)."""
    rng = np.random.default_rng(seed)
    tri = rng.choice(mesh.n_triangles, size=n, p=mesh.areas / mesh.areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.column_stack([1 - s, s * (1 - r2), s * r2])
    pos = np.einsum("nk,nkd->nd", bary, mesh.vertices[mesh.triangles[tri]])
    return SampleSet(tri, bary, pos, np.zeros(n))


def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to p; returns barycentrics.

    Vectorized version of the region-based algorithm from Ericson,
    *Real-Time Collision Detection*, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
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

    n = len(p)
    bary = np.empty((n, 3))
    done = np.zeros(n, bool)

    def put(mask, b0, b1, b2):
        m = mask & ~done
        bary[m, 0], bary[m, 1], bary[m, 2] = b0[m], b1[m], b2[m]
        done[m] = True

    one, zero = np.ones(n), np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), one, zero, zero)
        put((d3 >= 0) & (d4 <= d3), zero, one, zero)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - v, v, zero)
        put((d6 >= 0) & (d5 <= d6), zero, zero, one)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - w, zero, w)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - w, w)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones(n, bool), 1 - v - w, v, w)
    bary = np.clip(bary, 0.0, None)
    return bary / bary.sum(axis=1, keepdims=True)


def project_points(mesh: TriMesh, points, chunk: int | None = None) -> SampleSet:
    """Closest point on the mesh for every query point (global minimum over
    all triangles)."""
    if mesh.n_triangles == 0:
        raise InvalidArgument("empty mesh")
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[None]
    if P.shape[1] == 2:
        P = np.column_stack([P, np.zeros(len(P))])
    V, T = mesh.vertices, mesh.triangles
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    m = len(T)
    chunk = chunk or max(1, 100_000 // m)
    tri = np.empty(len(P), np.int64)
    bary = np.empty((len(P), 3))
    dist = np.empty(len(P))
    for s in range(0, len(P), chunk):
        q = P[s:s + chunk]
        k = len(q)
        qq = np.repeat(q, m, axis=0)
        bb = _closest_on_triangles(qq, np.tile(a, (k, 1)), np.tile(b, (k, 1)),
                                   np.tile(c, (k, 1)))
        cl = (bb[:, :1] * np.tile(a, (k, 1)) + bb[:, 1:2] * np.tile(b, (k, 1))
              + bb[:, 2:] * np.tile(c, (k, 1)))
        d2 = ((cl - qq) ** 2).sum(1).reshape(k, m)
        best = np.argmin(d2, axis=1)
        tri[s:s + k] = best
        bary[s:s + k] = bb.reshape(k, m, 3)[np.arange(k), best]
        dist[s:s + k] = np.sqrt(d2[np.arange(k), best])
    pos = np.einsum("nk,nkd->nd", bary, V[T[tri]])
    return SampleSet(tri, bary, pos, dist)
