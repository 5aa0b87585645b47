"""Anisotropic eikonal forward solver on triangle meshes.

Solves ``sqrt(D grad(phi) . grad(phi)) = 1`` with a fast iterative method:
an active set of triangles is swept with a vectorized local solver until no
vertex time improves by more than a relative tolerance.  Each local update
minimizes, over the opposite edge, the arrival time measured in the metric
``M = D^-1`` restricted to the triangle plane.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, SolverError
from .geometry import SampleSet, TriMesh

log = logging.getLogger(__name__)


def tangential_projector(normals: np.ndarray) -> np.ndarray:
    n = np.asarray(normals, float)
    return np.eye(3) - n[..., :, None] * n[..., None, :]


@dataclass(frozen=True)
class ConductivityTensorField:
    """Per-vertex symmetric 3x3 conductivity tensors (units of speed^2)."""

    tensors: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.tensors, float)
        if D.ndim != 3 or D.shape[1:] != (3, 3):
            raise InvalidArgument(f"tensors must be (n, 3, 3), got {D.shape}")
        if np.abs(D - D.transpose(0, 2, 1)).max(initial=0) > 1e-12 * max(1.0, np.abs(D).max(initial=0)):
            raise InvalidArgument("conductivity tensors are not symmetric")
        object.__setattr__(self, "tensors", D)

    @classmethod
    def isotropic(cls, mesh: TriMesh, speed: float = 1.0) -> "ConductivityTensorField":
        P = tangential_projector(mesh.vertex_normals)
        return cls(speed**2 * P)

    @classmethod
    def constant(cls, mesh: TriMesh, D) -> "ConductivityTensorField":
        D = np.asarray(D, float)
        if D.shape == (2, 2):
            D = np.pad(D, ((0, 1), (0, 1)))
        return cls(np.broadcast_to(D, (mesh.n_vertices, 3, 3)).copy())

    def triangle_tensors(self, mesh: TriMesh) -> np.ndarray:
        """Vertex average projected onto each triangle plane."""
        Dt = self.tensors[mesh.triangles].mean(axis=1)
        P = tangential_projector(mesh.normals)
        return P @ Dt @ P


@dataclass
class ActivationMap:
    """Arrival times (ms or model time units) on mesh vertices."""

    times: np.ndarray
    sources: list[tuple[int, float]]
    samples: SampleSet | None = None
    sample_times: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def unreachable(self) -> np.ndarray:
        return np.flatnonzero(~np.isfinite(self.times))


def _local_frames(mesh: TriMesh):
    """Corner coordinates in an orthonormal in-plane frame per triangle."""
    V, T = mesh.vertices, mesh.triangles
    p0, p1, p2 = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    eu = (p1 - p0) / np.linalg.norm(p1 - p0, axis=1, keepdims=True)
    ev = np.cross(mesh.normals, eu)
    basis = np.stack([eu, ev], axis=2)  # (m, 3, 2)
    local = np.einsum("mkd,mdj->mkj", np.stack([p0, p1, p2], 1) - p0[:, None], basis)
    return basis, local


def _triangle_metrics(mesh: TriMesh, D: ConductivityTensorField) -> np.ndarray:
    basis, local = _local_frames(mesh)
    Dt = D.triangle_tensors(mesh)
    D2 = np.einsum("mdi,mde,mej->mij", basis, Dt, basis)
    lam = np.linalg.eigvalsh(D2)
    scale = max(np.abs(lam).max(), 1e-300)
    bad = np.flatnonzero(lam[:, 0] <= 1e-12 * scale)
    if len(bad):
        raise SolverError(f"conductivity tensor on triangle {bad[0]} is not positive "
                          f"definite on its plane (eigenvalues {lam[bad[0]]})",
                          entity=("triangle", int(bad[0])))
    M = np.linalg.inv(D2)
    # per corner c: the other two corners A = c+1, B = c+2
    alpha = np.empty((mesh.n_triangles, 3))
    beta = np.empty_like(alpha)
    gamma = np.empty_like(alpha)
    for c in range(3):
        A, B = (c + 1) % 3, (c + 2) % 3
        a = local[:, c] - local[:, A]
        b = local[:, B] - local[:, A]
        alpha[:, c] = np.einsum("mi,mij,mj->m", b, M, b)
        beta[:, c] = np.einsum("mi,mij,mj->m", a, M, b)
        gamma[:, c] = np.einsum("mi,mij,mj->m", a, M, a)
    return alpha, beta, gamma


def _local_update(TA, TB, alpha, beta, gamma):
    """Minimum over the edge A-B of T(lam) + metric distance to the corner."""
    with np.errstate(invalid="ignore", over="ignore"):
        f0 = TA + np.sqrt(gamma)
        f1 = TB + np.sqrt(np.maximum(gamma - 2 * beta + alpha, 0.0))
        best = np.minimum(f0, f1)
        both = np.isfinite(TA) & np.isfinite(TB)
        dT = np.where(both, TB - TA, 0.0)
        ok = both & (dT * dT < alpha)
        c = np.maximum(gamma - beta * beta / alpha, 0.0)
        shift = dT * np.sqrt(c / (alpha * np.where(ok, alpha - dT * dT, 1.0)))
        lam = np.clip(beta / alpha - shift, 0.0, 1.0)
        q = np.maximum(gamma - 2 * lam * beta + lam * lam * alpha, 0.0)
        fi = TA + lam * dT + np.sqrt(q)
    return np.where(ok, np.minimum(best, fi), best)


def solve_fim(mesh: TriMesh, D: ConductivityTensorField, sources,
              rtol: float = 1e-9, source_radius: float = 0.0,
              max_sweeps: int | None = None) -> ActivationMap:
    """Arrival times from ``sources``, a list of ``(vertex, initial_time)``
    pairs or bare vertex indices (initial time 0).

    With ``source_radius > 0`` every vertex within that Euclidean distance
    of a source is initialized (and then held fixed) with the exact
    constant-tensor time computed from the source vertex tensor.  A fixed
    physical radius removes the ``h log(1/h)`` error of first-order schemes
    at point sources, giving first-order convergence overall; it assumes the
    tensor is roughly constant inside the ball.
    """
    src = [(int(s), 0.0) if np.ndim(s) == 0 else (int(s[0]), float(s[1]))
           for s in sources]
    if not src:
        raise InvalidArgument("at least one source is required")
    for v, _ in src:
        if not 0 <= v < mesh.n_vertices:
            raise InvalidArgument(f"source vertex {v} out of range")
    if D.tensors.shape[0] != mesh.n_vertices:
        raise InvalidArgument("tensor field does not match mesh vertex count")

    alpha, beta, gamma = _triangle_metrics(mesh, D)
    T = mesh.triangles
    times = np.full(mesh.n_vertices, np.inf)
    fixed = np.zeros(mesh.n_vertices, bool)
    for v, t0 in src:
        times[v] = min(times[v], t0)
        fixed[v] = True
    if source_radius > 0:
        P = tangential_projector(mesh.vertex_normals)
        for v, t0 in src:
            d = mesh.vertices - mesh.vertices[v]
            ball = np.flatnonzero(np.linalg.norm(d, axis=1) <= source_radius)
            Ds = P[v] @ D.tensors[v] @ P[v]
            dd = d[ball] @ P[v]
            local = t0 + np.sqrt(np.maximum(
                np.einsum("ni,ij,nj->n", dd, np.linalg.pinv(Ds, hermitian=True), dd), 0.0))
            times[ball] = np.minimum(times[ball], local)
            fixed[ball] = True

    changed = fixed.copy()
    max_sweeps = max_sweeps or 50 * mesh.n_vertices
    sweeps = 0
    while changed.any():
        sweeps += 1
        if sweeps > max_sweeps:
            raise SolverError(f"FIM did not converge in {max_sweeps} sweeps")
        act = np.flatnonzero(changed[T].any(axis=1))
        Ta = T[act]
        tv = times[Ta]
        cand = np.empty((len(act), 3))
        for c in range(3):
            A, B = (c + 1) % 3, (c + 2) % 3
            cand[:, c] = _local_update(tv[:, A], tv[:, B], alpha[act, c],
                                       beta[act, c], gamma[act, c])
        new = times.copy()
        np.minimum.at(new, Ta.ravel(), cand.ravel())
        new[fixed] = times[fixed]
        finite = times[np.isfinite(times)]
        tol = rtol * max(np.abs(finite).max(initial=0.0), 1.0)
        changed = new < times - tol
        times = np.where(changed, new, times)

    amap = ActivationMap(times, src, info={"sweeps": sweeps})
    if len(amap.unreachable):
        log.warning("%d vertices unreachable from the sources", len(amap.unreachable))
    return amap


def geodesic_distance(mesh: TriMesh, sources) -> np.ndarray:
    """Unit-speed isotropic arrival time, i.e. approximate geodesic distance."""
    return solve_fim(mesh, ConductivityTensorField.isotropic(mesh), sources).times


def analytic_constant_tensor_map(D, x) -> np.ndarray | float:
    """Exact arrival time ``sqrt(D^-1 x . x)`` for a constant tensor and a
    point source at the origin.  ``D`` is 2x2 SPD or a 3x3 tensor of
    tangential rank 2 (pseudo-inverse on its range)."""
    D = np.asarray(D, float)
    x = np.asarray(x, float)
    if D.shape == (2, 2):
        if np.linalg.eigvalsh(D)[0] <= 1e-14 * max(np.abs(D).max(), 1e-300):
            raise InvalidArgument("tensor is singular")
        Dinv = np.linalg.inv(D)
    elif D.shape == (3, 3):
        lam = np.linalg.eigvalsh(D)
        if lam[1] <= 1e-14 * max(np.abs(lam).max(), 1e-300):
            raise InvalidArgument("tensor has tangential rank < 2")
        Dinv = np.linalg.pinv(D, hermitian=True)
    else:
        raise InvalidArgument(f"expected a 2x2 or 3x3 tensor, got {D.shape}")
    q = np.einsum("...i,ij,...j->...", x, Dinv, x)
    out = np.sqrt(np.maximum(q, 0.0))
    return float(out) if out.ndim == 0 else out


def barycentric_gradients(mesh: TriMesh) -> np.ndarray:
    """(m, 3, 3): gradient of each hat function restricted to each triangle."""
    V, T = mesh.vertices, mesh.triangles
    p = V[T]
    out = np.empty((mesh.n_triangles, 3, 3))
    for k in range(3):
        e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
        out[:, k] = np.cross(mesh.normals, e) / (2 * mesh.areas[:, None])
    return out


def map_gradient(mesh: TriMesh, times) -> np.ndarray:
    """Per-triangle gradient of the piecewise linear interpolant (in-plane)."""
    phi = np.asarray(getattr(times, "times", times), float)
    G = barycentric_gradients(mesh)
    return np.einsum("mk,mkd->md", phi[mesh.triangles], G)


def local_cv(mesh: TriMesh, times, eps: float = 1e-9):
    """Local speed ``1 / |grad phi|`` per triangle.

    Returns ``(speed, undefined)``; ``speed`` is NaN where the gradient norm
    is below ``eps`` (front collisions, breakthroughs, flat maps).
    """
    g = np.linalg.norm(map_gradient(mesh, times), axis=1)
    undefined = ~(g > eps)
    with np.errstate(divide="ignore"):
        speed = np.where(undefined, np.nan, 1.0 / g)
    return speed, undefined
