"""Smooth per-vertex tangent frames.

The frame ``{v1, v2, n}`` is what the fiber angle is measured against, so it
should vary slowly over the surface.  On planar meshes a constant frame is
enough; on curved ones :func:`vector_heat_basis` transports a single seed
vector everywhere by a short-time diffusion with the connection Laplacian
(the vector heat method of Sharp, Soliman and Crane, 2019).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .errors import InvalidArgument, SolverError
from .geometry import SampleSet, TriMesh


@dataclass(frozen=True)
class TangentBasis:
    """Right-handed orthonormal frame per vertex; all arrays (n, 3)."""

    v1: np.ndarray
    v2: np.ndarray
    n: np.ndarray

    def check(self, tol: float = 1e-10) -> None:
        for name, a in (("v1", self.v1), ("v2", self.v2), ("n", self.n)):
            if np.abs(np.linalg.norm(a, axis=1) - 1).max() > tol:
                raise AssertionError(f"{name} is not unit length")
        for a, b in ((self.v1, self.v2), (self.v1, self.n), (self.v2, self.n)):
            if np.abs(np.einsum("ij,ij->i", a, b)).max() > tol:
                raise AssertionError("frame is not orthogonal")
        if np.abs(np.cross(self.n, self.v1) - self.v2).max() > tol:
            raise AssertionError("frame is not right-handed")

    def coordinates(self, vectors: np.ndarray) -> np.ndarray:
        """(n, 2) components of tangent vectors in the (v1, v2) frame."""
        return np.column_stack([np.einsum("ij,ij->i", vectors, self.v1),
                                np.einsum("ij,ij->i", vectors, self.v2)])

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return coords[:, :1] * self.v1 + coords[:, 1:2] * self.v2

    def at(self, mesh: TriMesh, samples: SampleSet) -> "TangentBasis":
        """Frames at surface points: barycentric blend of v1, re-orthonormalized
        against the triangle normal."""
        n = mesh.normals[samples.triangles]
        v1 = np.einsum("nk,nkd->nd", samples.bary, self.v1[mesh.triangles[samples.triangles]])
        v1 -= np.einsum("ij,ij->i", v1, n)[:, None] * n
        norm = np.linalg.norm(v1, axis=1, keepdims=True)
        if (norm < 1e-12).any():
            raise SolverError("basis vectors cancel inside a triangle (frame singularity)")
        v1 /= norm
        return TangentBasis(v1, np.cross(n, v1), n)


def _frame_from(n: np.ndarray, v1: np.ndarray) -> TangentBasis:
    v1 = v1 - np.einsum("ij,ij->i", v1, n)[:, None] * n
    v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
    return TangentBasis(v1, np.cross(n, v1), n.copy())


def trivial_planar_basis(mesh: TriMesh) -> TangentBasis:
    """Constant frame for a flat mesh: v1 is the x-axis projected to the plane."""
    if not mesh.is_planar():
        raise InvalidArgument("mesh is not planar")
    n0 = mesh.normals[0]
    ref = np.array([1.0, 0.0, 0.0])
    if np.linalg.norm(ref - (ref @ n0) * n0) < 1e-6:
        ref = np.array([0.0, 1.0, 0.0])
    nv = mesh.n_vertices
    return _frame_from(np.tile(n0, (nv, 1)), np.tile(ref, (nv, 1)))


# -- intrinsic vertex layout ---------------------------------------------------

@dataclass
class _VertexLayout:
    nbrs: list  # ordered outgoing neighbours per vertex
    raw: list  # cumulative corner angle at each outgoing edge
    total: np.ndarray  # angle sum per vertex
    boundary: np.ndarray
    scale: np.ndarray  # 2*pi / total for interior vertices, 1 on the boundary

    def angle(self, i: int, j: int) -> float:
        k = self._pos[i][j]
        return self.raw[i][k] * self.scale[i]

    def __post_init__(self):
        self._pos = [{j: k for k, j in enumerate(nb)} for nb in self.nbrs]


def _corner_angles(mesh: TriMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    ang = np.empty((mesh.n_triangles, 3))
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        w = p[:, (k + 2) % 3] - p[:, k]
        ang[:, k] = np.arctan2(np.linalg.norm(np.cross(u, w), axis=1),
                               np.einsum("ij,ij->i", u, w))
    return ang


def _vertex_layout(mesh: TriMesh) -> _VertexLayout:
    ang = _corner_angles(mesh)
    wedges: list[dict[int, tuple[int, float]]] = [dict() for _ in range(mesh.n_vertices)]
    for t, (a, b, c) in enumerate(mesh.triangles):
        wedges[a][b] = (c, ang[t, 0])
        wedges[b][c] = (a, ang[t, 1])
        wedges[c][a] = (b, ang[t, 2])
    nbrs, raw = [], []
    total = np.zeros(mesh.n_vertices)
    boundary = np.zeros(mesh.n_vertices, bool)
    for i, w in enumerate(wedges):
        if not w:
            raise InvalidArgument(f"vertex {i} has no incident triangles")
        ends = {k for k, _ in w.values()}
        starts = [j for j in w if j not in ends]
        if len(starts) > 1:
            raise InvalidArgument(f"vertex {i} is non-manifold")
        boundary[i] = bool(starts)
        j = starts[0] if starts else min(w)
        order, cum, acc = [j], [0.0], 0.0
        while j in w:
            k, a = w[j]
            acc += a
            if k == order[0]:
                break
            order.append(k)
            cum.append(acc)
            j = k
        nbrs.append(order)
        raw.append(np.array(cum))
        total[i] = acc
    scale = np.where(boundary, 1.0, 2 * np.pi / total)
    return _VertexLayout(nbrs, raw, total, boundary, scale)


def _cotan_weights(mesh: TriMesh):
    """Edge list (i, j) and cotangent weights (cot a + cot b) / 2."""
    ang = _corner_angles(mesh)
    cot = 1.0 / np.tan(ang)
    T = mesh.triangles
    I = np.concatenate([T[:, 1], T[:, 2], T[:, 0]])
    J = np.concatenate([T[:, 2], T[:, 0], T[:, 1]])
    W = 0.5 * np.concatenate([cot[:, 0], cot[:, 1], cot[:, 2]])
    key = np.sort(np.column_stack([I, J]), axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    w = np.bincount(inv.ravel(), weights=W, minlength=len(uniq))
    return uniq, w


def cotan_laplacian(mesh: TriMesh) -> sp.csr_matrix:
    """Positive semidefinite cotangent Laplacian."""
    e, w = _cotan_weights(mesh)
    n = mesh.n_vertices
    L = sp.coo_matrix((np.concatenate([-w, -w]),
                       (np.concatenate([e[:, 0], e[:, 1]]),
                        np.concatenate([e[:, 1], e[:, 0]]))), shape=(n, n)).tocsr()
    return (L - sp.diags(np.asarray(L.sum(axis=1)).ravel())).tocsr()


def lumped_mass(mesh: TriMesh) -> sp.dia_matrix:
    return sp.diags(mesh.vertex_areas / 3.0)


def connection_laplacian(mesh: TriMesh, layout: _VertexLayout | None = None) -> sp.csr_matrix:
    """Hermitian connection Laplacian on complex per-vertex tangent vectors."""
    layout = layout or _vertex_layout(mesh)
    e, w = _cotan_weights(mesh)
    phi_ij = np.array([layout.angle(i, j) for i, j in e])
    phi_ji = np.array([layout.angle(j, i) for i, j in e])
    rho_ji = np.exp(1j * (phi_ij + np.pi - phi_ji))  # frame j -> frame i
    n = mesh.n_vertices
    off = sp.coo_matrix((np.concatenate([-w * rho_ji, -w * np.conj(rho_ji)]),
                         (np.concatenate([e[:, 0], e[:, 1]]),
                          np.concatenate([e[:, 1], e[:, 0]]))), shape=(n, n))
    deg = np.bincount(e.ravel(), weights=np.repeat(w, 2), minlength=n)
    return (off + sp.diags(deg.astype(complex))).tocsr()


class _AngleMap:
    """Converts between intrinsic (rescaled) angles at a vertex and world
    tangent vectors, piecewise linearly over the incident wedges."""

    def __init__(self, mesh: TriMesh, layout: _VertexLayout, i: int):
        self.n = mesh.vertex_normals[i]
        d = mesh.vertices[layout.nbrs[i]] - mesh.vertices[i]
        d -= np.outer(d @ self.n, self.n)
        self.u = d / np.linalg.norm(d, axis=1, keepdims=True)
        self.raw = layout.raw[i]
        self.total = layout.total[i]
        self.scale = layout.scale[i]
        self.boundary = layout.boundary[i]
        m = len(self.u)
        nxt = self.u[(np.arange(m) + 1) % m]
        proj = np.arctan2(np.einsum("ij,ij->i", np.cross(self.u, nxt), np.tile(self.n, (m, 1))),
                          np.einsum("ij,ij->i", self.u, nxt)) % (2 * np.pi)
        self.wedge_raw = np.diff(np.append(self.raw, self.total))
        self.wedge_proj = proj if not self.boundary else proj[:-1]
        self.proj_cum = np.concatenate([[0.0], np.cumsum(self.wedge_proj)])

    def _rot(self, u, a):
        return np.cos(a) * u + np.sin(a) * np.cross(self.n, u)

    def to_world(self, ang: float) -> np.ndarray:
        r = ang / self.scale
        if self.boundary:
            if r <= 0:
                return self._rot(self.u[0], r)
            if r >= self.total:
                return self._rot(self.u[-1], r - self.total)
        else:
            r %= self.total
        k = min(np.searchsorted(self.raw, r, side="right") - 1, len(self.wedge_raw) - 1)
        f = (r - self.raw[k]) / self.wedge_raw[k]
        return self._rot(self.u[k], f * self.wedge_proj[k])

    def from_world(self, v: np.ndarray) -> float:
        v = v - (v @ self.n) * self.n
        om = np.arctan2(np.cross(self.u[0], v) @ self.n, self.u[0] @ v)
        if self.boundary:
            span = self.proj_cum[-1]
            if om < 0 and om < span - 2 * np.pi:
                om += 2 * np.pi
            if om < 0:
                return om * self.scale
            if om >= span:
                return (self.total + om - span) * self.scale
        else:
            om %= 2 * np.pi
        k = min(np.searchsorted(self.proj_cum, om, side="right") - 1, len(self.wedge_proj) - 1)
        f = (om - self.proj_cum[k]) / self.wedge_proj[k]
        return (self.raw[k] + f * self.wedge_raw[k]) * self.scale


def default_seed(mesh: TriMesh) -> tuple[int, np.ndarray]:
    """Vertex of largest incident area, with the first principal axis of the
    vertex cloud (projected to its tangent plane) as direction."""
    i = int(np.argmax(mesh.vertex_areas))
    X = mesh.vertices - mesh.vertices.mean(axis=0)
    axes = np.linalg.svd(X, full_matrices=False)[2]
    n = mesh.vertex_normals[i]
    for a in axes:
        t = a - (a @ n) * n
        if np.linalg.norm(t) > 1e-6:
            return i, t / np.linalg.norm(t)
    raise SolverError("could not find a tangential seed direction")


def _solve(A, b, rtol, method):
    if method == "direct":
        # LU keeps the exponentially small far-field values accurate (and
        # positive); an iterative solve only controls the global residual
        return splu(A.tocsc()).solve(b)
    if method != "cg":
        raise InvalidArgument(f"unknown solver {method!r}")
    x, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=20 * A.shape[0])
    if info != 0:
        raise SolverError(f"conjugate gradient did not converge (info={info})")
    return x


def vector_heat_basis(mesh: TriMesh, source_vertex: int | None = None,
                      source_vector=None, t: float | None = None,
                      rtol: float = 1e-10, method: str = "direct") -> TangentBasis:
    """Smooth frame by short-time vector heat diffusion of one seed vector.

    Defaults: seed from :func:`default_seed`, ``t = mean_edge_length**2``.
    ``method="cg"`` uses conjugate gradients at relative residual ``rtol``,
    which is only adequate when the whole mesh lies within a few diffusion
    lengths ``sqrt(t)`` of the seed.
    """
    if source_vertex is None or source_vector is None:
        s_i, s_v = default_seed(mesh)
        source_vertex = s_i if source_vertex is None else source_vertex
        source_vector = s_v if source_vector is None else source_vector
    if not 0 <= source_vertex < mesh.n_vertices:
        raise InvalidArgument(f"source vertex {source_vertex} out of range")
    vec = np.asarray(source_vector, float)
    nrm = mesh.vertex_normals[source_vertex]
    tang = vec - (vec @ nrm) * nrm
    if np.linalg.norm(tang) < 1e-12 * max(np.linalg.norm(vec), 1e-300):
        raise InvalidArgument("source vector has no tangential component")
    t = mesh.mean_edge_length ** 2 if t is None else float(t)

    n_comp = _n_components(mesh)
    if n_comp > 1:
        raise SolverError(f"mesh has {n_comp} connected components; the heat "
                          "system is singular on all but the seeded one")

    layout = _vertex_layout(mesh)
    maps = [_AngleMap(mesh, layout, i) for i in range(mesh.n_vertices)]
    M = lumped_mass(mesh)
    Lc = connection_laplacian(mesh, layout)
    Ls = cotan_laplacian(mesh)

    x0 = np.zeros(mesh.n_vertices, complex)
    mag = np.linalg.norm(tang)
    x0[source_vertex] = mag * np.exp(1j * maps[source_vertex].from_world(tang / mag))
    X = _solve((M + t * Lc).tocsr(), x0, rtol, method)
    delta = np.zeros(mesh.n_vertices)
    delta[source_vertex] = 1.0
    As = (M + t * Ls).tocsr()
    u = _solve(As, mag * delta, rtol, method)
    phi = _solve(As, delta, rtol, method)
    with np.errstate(divide="ignore", invalid="ignore"):
        Y = X / np.abs(X) * (u / phi)  # transported vector with restored magnitude
    if not np.isfinite(Y).all():
        raise SolverError("diffused vector field vanished at some vertices")

    v1 = np.array([maps[i].to_world(np.angle(Y[i])) for i in range(mesh.n_vertices)])
    return _frame_from(mesh.vertex_normals, v1)


def _n_components(mesh: TriMesh) -> int:
    from scipy.sparse.csgraph import connected_components

    e = mesh.edges
    n = mesh.n_vertices
    A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(A, directed=False)[0]
