"""Data-driven baselines, error metrics, noise injection and unseen-map checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .conductivity import DEFAULT_SPEED2_CAP, assemble_tensor
from .eikonal import ActivationMap, ConductivityTensorField, map_gradient, solve_fim
from .errors import InvalidArgument
from .geometry import TriMesh

N_ANGLE_GRID = 65


@dataclass
class FitReport:
    """Per-vertex result of the residual-minimizing tensor fit."""

    tensors: np.ndarray  # (n, 3, 3)
    a: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    residual: np.ndarray  # sum of squared residuals at the minimizer
    rank: np.ndarray  # numerical rank of the gradient set
    unique: np.ndarray  # bool


def _residuals(theta, e1, e2, g1, g2):
    c, s = np.cos(theta), np.sin(theta)
    P = c * g1 + s * g2
    Q = -s * g1 + c * g2
    return np.sqrt(np.maximum(e1 * P * P + e2 * Q * Q, 0.0)) - 1.0


def _linear_speeds(theta, g1, g2, cap):
    """Least-squares (e1, e2) of ``e1 P^2 + e2 Q^2 = 1`` for each angle."""
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    P2 = (c * g1 + s * g2) ** 2
    Q2 = (-s * g1 + c * g2) ** 2
    A = np.stack([P2, Q2], axis=-1)  # (K, M, 2)
    sol = np.stack([np.linalg.lstsq(Ak, np.ones(len(g1)), rcond=None)[0] for Ak in A])
    return np.clip(sol, 1e-9, cap)


def _fit_one(g1, g2, cap):
    theta = np.arccos(np.linspace(-1.0, 1.0, N_ANGLE_GRID))
    E = _linear_speeds(theta, g1, g2, cap)
    cost = [np.sum(_residuals(t, e[0], e[1], g1, g2) ** 2) for t, e in zip(theta, E)]
    k = int(np.argmin(cost))
    x0 = np.array([theta[k], E[k, 0], E[k, 1]])
    lo, hi = np.array([0.0, 1e-9, 1e-9]), np.array([np.pi, cap, cap])
    x0 = np.clip(x0, lo + 1e-12, hi - 1e-12)
    res = least_squares(lambda x: _residuals(x[0], x[1], x[2], g1, g2), x0,
                        bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=2000)
    best = res.x if 2 * res.cost <= cost[k] else x0
    return best, float(np.sum(_residuals(best[0], best[1], best[2], g1, g2) ** 2))


def fit_tensor_from_gradients(gradients, v1, v2, cap: float = DEFAULT_SPEED2_CAP,
                              rank_tol: float = 1e-8) -> FitReport:
    """Minimize ``sum_m (sqrt(D g_m . g_m) - 1)^2`` over D = D(a, e1, e2).

    ``gradients`` is (n, M, d) or (M, d) activation gradients, ``v1``/``v2``
    the frames (n, d) or (d,).  A 65-point grid over ``a`` seeds a bounded
    least-squares refinement of (angle, e1, e2).
    """
    g = np.asarray(gradients, float)
    single = g.ndim == 2
    if single:
        g = g[None]
    v1 = np.atleast_2d(np.asarray(v1, float))
    v2 = np.atleast_2d(np.asarray(v2, float))
    if g.shape[1] == 0 or g.shape[0] == 0:
        raise InvalidArgument("at least one gradient per vertex is required")
    n, M = g.shape[:2]
    v1 = np.broadcast_to(v1, (n, v1.shape[-1]))
    v2 = np.broadcast_to(v2, (n, v2.shape[-1]))
    G1 = np.einsum("nmd,nd->nm", g, v1)
    G2 = np.einsum("nmd,nd->nm", g, v2)

    out = np.empty((n, 3))
    resid = np.empty(n)
    rank = np.empty(n, int)
    for i in range(n):
        x, resid[i] = _fit_one(G1[i], G2[i], cap)
        out[i] = x
        sv = np.linalg.svd(np.stack([G1[i], G2[i]], 1), compute_uv=False)
        rank[i] = int((sv > rank_tol * max(sv.max(initial=0.0), 1e-300)).sum())
    a = np.cos(out[:, 0])
    D = assemble_tensor(a, out[:, 1], out[:, 2], v1, v2)
    if D.shape[-1] == 2:
        D = np.pad(D, ((0, 0), (0, 1), (0, 1)))
    unique = (rank >= 2) & (M >= 3)
    rep = FitReport(D, a, out[:, 1], out[:, 2], resid, rank, unique)
    if single:
        rep = FitReport(*(np.asarray(f)[0] for f in
                          (rep.tensors, rep.a, rep.e1, rep.e2, rep.residual, rep.rank, rep.unique)))
    return rep


def fiber_angle_error(f_true, f_pred) -> np.ndarray:
    """Unsigned angle ``arccos |f . f_hat|`` in degrees."""
    f = np.asarray(f_true, float)
    p = np.asarray(f_pred, float)
    nf = np.linalg.norm(f, axis=-1)
    npred = np.linalg.norm(p, axis=-1)
    if (nf == 0).any() or (npred == 0).any():
        raise InvalidArgument("fiber vectors must be nonzero")
    c = np.abs(np.einsum("...i,...i->...", f, p)) / (nf * npred)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def map_rmse(pred, true) -> float:
    pred = np.asarray(pred, float)
    true = np.asarray(true, float)
    if pred.shape != true.shape:
        raise InvalidArgument(f"length mismatch: {pred.shape} vs {true.shape}")
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def add_noise(times, sigma: float, seed=None) -> np.ndarray:
    if sigma < 0:
        raise InvalidArgument("sigma must be >= 0")
    times = np.asarray(times, float)
    if sigma == 0:
        return times.copy()
    return times + np.random.default_rng(seed).normal(0.0, sigma, size=times.shape)


def validate_unseen_map(mesh: TriMesh, D_learned: ConductivityTensorField,
                        D_true: ConductivityTensorField, new_source,
                        source_radius: float = 0.0) -> tuple[float, ActivationMap, ActivationMap]:
    """RMSE between maps from a held-out source under both tensor fields."""
    learned = solve_fim(mesh, D_learned, [new_source], source_radius=source_radius)
    true = solve_fim(mesh, D_true, [new_source], source_radius=source_radius)
    ok = np.isfinite(learned.times) & np.isfinite(true.times)
    return map_rmse(learned.times[ok], true.times[ok]), learned, true


def error_summary(errors) -> dict:
    e = np.asarray(errors, float)
    e = e[np.isfinite(e)]
    if e.size == 0:
        return {"mean": np.nan, "median": np.nan, "p25": np.nan, "p75": np.nan}
    p25, med, p75 = np.percentile(e, [25, 50, 75])
    return {"mean": float(e.mean()), "median": float(med), "p25": float(p25), "p75": float(p75)}


def vertex_gradients(mesh: TriMesh, times) -> np.ndarray:
    """Area-weighted average of per-triangle map gradients at each vertex."""
    G = map_gradient(mesh, times)
    acc = np.zeros((mesh.n_vertices, 3))
    w = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], G * mesh.areas[:, None])
        np.add.at(w, mesh.triangles[:, k], mesh.areas)
    return acc / w[:, None]


METRICS_COLUMNS = ("experiment", "method", "maps", "noise", "seed", "region",
                   "fiber_error_mean_deg", "fiber_error_median_deg", "fiber_error_p25",
                   "fiber_error_p75", "rmse_ms", "unseen_rmse_ms")


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRICS_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return v
