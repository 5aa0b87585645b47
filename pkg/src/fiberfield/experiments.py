"""Synthetic experiment pipeline: domain, ground truth, data generation,
training and evaluation.  The CLI is a thin file-based wrapper around these
functions; tests call them directly."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .config import ExperimentConfig
from .conductivity import assemble_tensor, fiber_direction, params_from_tensor
from .eikonal import ConductivityTensorField, solve_fim
from .errors import InvalidArgument
from .estimators import (add_noise, error_summary, fiber_angle_error, fit_tensor_from_gradients,
                         map_rmse, validate_unseen_map, vertex_gradients)
from .geometry import (SampleSet, TriMesh, build_cylinder_mesh, build_hemisphere_mesh,
                       build_icosphere_mesh, build_unit_grid_mesh, farthest_point_sample,
                       latin_hypercube_sample, project_points, sample_uniform_by_area)
from .tangent_basis import TangentBasis, trivial_planar_basis, vector_heat_basis
from .trainer import Dataset, TrainedModel, train

log = logging.getLogger(__name__)


# -- domain and basis ----------------------------------------------------------

def build_domain(cfg: ExperimentConfig) -> TriMesh:
    d = cfg.domain
    if d.kind == "grid":
        return build_unit_grid_mesh(d.n)
    if d.kind == "cylinder":
        return build_cylinder_mesh()
    if d.kind == "hemisphere":
        return build_hemisphere_mesh(d.subdivisions)
    if d.kind == "icosphere":
        return build_icosphere_mesh(d.subdivisions)
    return fileio.load_mesh(d.path)


def is_flat_xy(mesh: TriMesh) -> bool:
    """Planar mesh lying in a z = const plane (networks then take 2-D input)."""
    return mesh.is_planar() and np.ptp(mesh.vertices[:, 2]) < 1e-12


def build_basis(cfg: ExperimentConfig, mesh: TriMesh) -> TangentBasis:
    b = cfg.basis
    kind = b.kind
    if kind == "auto":
        kind = "planar" if mesh.is_planar() else "vector_heat"
    if kind == "planar":
        return trivial_planar_basis(mesh)
    return vector_heat_basis(mesh, None if b.source_vertex < 0 else b.source_vertex,
                             np.array(b.source_vector) if b.source_vector else None,
                             b.diffusion_time or None)


# -- ground truth --------------------------------------------------------------

@dataclass
class GroundTruth:
    D: ConductivityTensorField
    fibers: np.ndarray  # (n, 3) unit
    a: np.ndarray
    e1: np.ndarray
    e2: np.ndarray


def piecewise_truth(mesh: TriMesh) -> GroundTruth:
    """diag(1, 1/2) where x + y < 0 and diag(1/2, 1) elsewhere."""
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    lower = x + y < 0
    D = np.zeros((mesh.n_vertices, 3, 3))
    D[:, 0, 0] = np.where(lower, 1.0, 0.5)
    D[:, 1, 1] = np.where(lower, 0.5, 1.0)
    fibers = np.where(lower[:, None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    a = np.where(lower, 1.0, 0.0)
    return GroundTruth(ConductivityTensorField(D), fibers, a,
                       np.ones(mesh.n_vertices), np.full(mesh.n_vertices, 0.5))


def truth_from_params(mesh: TriMesh, basis: TangentBasis, a, e1, e2) -> GroundTruth:
    n = mesh.n_vertices
    a, e1, e2 = (np.broadcast_to(np.asarray(v, float), (n,)).copy() for v in (a, e1, e2))
    D = assemble_tensor(a, e1, e2, basis.v1, basis.v2)
    f, _ = fiber_direction(D, basis.v1)
    return GroundTruth(ConductivityTensorField(D), f, a, e1, e2)


def build_truth(cfg: ExperimentConfig, mesh: TriMesh, basis: TangentBasis) -> GroundTruth | None:
    t = cfg.truth
    if t.kind == "piecewise":
        return piecewise_truth(mesh)
    if t.kind == "constant":
        return truth_from_params(mesh, basis, t.a, t.e1, t.e2)
    if t.kind == "file":
        _, data = fileio.read_vtk(t.path)
        missing = {"a", "e1", "e2"} - set(data)
        if missing:
            raise InvalidArgument(f"{t.path}: missing point data {sorted(missing)}")
        return truth_from_params(mesh, basis, data["a"], data["e1"], data["e2"])
    return None


def discontinuity_distance(mesh: TriMesh) -> np.ndarray:
    """Distance of each vertex to the line x + y = 0."""
    return np.abs(mesh.vertices[:, 0] + mesh.vertices[:, 1]) / np.sqrt(2.0)


# -- sources and samples -------------------------------------------------------

def nearest_vertex(mesh: TriMesh, points) -> np.ndarray:
    P = np.atleast_2d(np.asarray(points, float))
    if P.shape[1] == 2:
        P = np.column_stack([P, np.zeros(len(P))])
    d = ((P[:, None, :] - mesh.vertices[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


def _bounds(mesh: TriMesh):
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    dims = [k for k in range(3) if hi[k] - lo[k] > 1e-12]
    return dims, np.column_stack([lo[dims], hi[dims]])


def place_sources(cfg: ExperimentConfig, mesh: TriMesh) -> tuple[list[int], int]:
    """Training source vertices and one held-out source vertex."""
    s = cfg.sources
    rng = np.random.default_rng([cfg.seed, 7])
    if s.kind == "explicit":
        src = [int(v) for v in s.vertices]
        for v in src:
            if not 0 <= v < mesh.n_vertices:
                raise InvalidArgument(f"source vertex {v} out of range")
    elif s.kind == "lhs":
        dims, b = _bounds(mesh)
        pts = latin_hypercube_sample(s.count, b, seed=int(rng.integers(2**31)))
        full = np.tile(mesh.vertices.mean(0), (s.count, 1))
        full[:, dims] = pts
        src = [int(v) for v in project_to_vertex(mesh, full)]
    else:
        src = farthest_point_sample(mesh, s.count, s.start_vertex)
    if s.hold_out >= 0:
        hold = int(s.hold_out)
    else:
        cand = np.setdiff1d(np.arange(mesh.n_vertices), src)
        hold = int(rng.choice(cand))
    return src, hold


def project_to_vertex(mesh: TriMesh, points) -> np.ndarray:
    """Closest surface point, then its nearest triangle corner."""
    ss = project_points(mesh, points)
    corner = ss.bary.argmax(axis=1)
    return mesh.triangles[ss.triangles, corner]


def split_counts(total: int, maps: int) -> list[int]:
    """Split ``total`` samples over ``maps`` maps as evenly as possible."""
    if maps < 1 or total < maps:
        raise InvalidArgument("need total >= maps >= 1")
    q, r = divmod(total, maps)
    return [q + (1 if m < r else 0) for m in range(maps)]


def sample_points(cfg: ExperimentConfig, mesh: TriMesh, n: int, seed) -> SampleSet:
    kind = cfg.sampling.kind
    if kind == "auto":
        kind = "lhs" if mesh.is_planar() else "area"
    if kind == "area":
        return sample_uniform_by_area(mesh, n, seed)
    dims, b = _bounds(mesh)
    pts = np.tile(mesh.vertices.mean(0), (n, 1))
    pts[:, dims] = latin_hypercube_sample(n, b, seed)
    return project_points(mesh, pts)


@dataclass
class MapData:
    map_id: int
    source: int
    vertex_times: np.ndarray  # solver units
    positions: np.ndarray  # (N, 3) sample locations
    times_ms: np.ndarray  # observed (possibly noisy) sample times


@dataclass
class GeneratedData:
    mesh: TriMesh
    basis: TangentBasis
    truth: GroundTruth | None
    maps: list[MapData]
    hold_out: int
    meta: dict = field(default_factory=dict)


def generate(cfg: ExperimentConfig, mesh: TriMesh | None = None,
             basis: TangentBasis | None = None) -> GeneratedData:
    """Simulate ``sampling.maps`` activation maps and draw sparse samples."""
    mesh = mesh if mesh is not None else build_domain(cfg)
    basis = basis if basis is not None else build_basis(cfg, mesh)
    truth = build_truth(cfg, mesh, basis)
    if truth is None:
        raise InvalidArgument("generating synthetic maps needs a ground truth")
    sources, hold = place_sources(cfg, mesh)
    s = cfg.sampling
    counts = split_counts(s.total, s.maps)
    seeds = np.random.default_rng([cfg.seed, 11]).integers(0, 2**31, size=(s.maps, 2))
    shared = sample_points(cfg, mesh, counts[0], int(seeds[0, 0])) if s.shared else None
    maps = []
    for m in range(s.maps):
        amap = solve_fim(mesh, truth.D, [sources[m]], source_radius=s.fim_source_radius)
        pts = shared.subset(np.arange(counts[m])) if shared is not None else \
            sample_points(cfg, mesh, counts[m], int(seeds[m, 0]))
        t = pts.interpolate(mesh, amap.times) * s.time_unit_ms
        t = add_noise(t, s.noise_ms, int(seeds[m, 1]))
        maps.append(MapData(m, sources[m], amap.times, pts.positions, t))
    meta = {"sources": sources, "hold_out": hold,
            "t_max_ms": max(float(np.max(m.vertex_times)) for m in maps) * s.time_unit_ms}
    return GeneratedData(mesh, basis, truth, maps, hold, meta)


# -- training ------------------------------------------------------------------

def collocation_points(mesh: TriMesh, basis: TangentBasis):
    """Vertices plus triangle barycenters with their interpolated frames."""
    m = mesh.n_triangles
    bary = np.full((m, 3), 1.0 / 3.0)
    ss = SampleSet(np.arange(m), bary, mesh.barycenters)
    fb = basis.at(mesh, ss)
    pts = np.concatenate([mesh.vertices, mesh.barycenters])
    return pts, np.concatenate([basis.v1, fb.v1]), np.concatenate([basis.v2, fb.v2])


def make_dataset(cfg: ExperimentConfig, mesh: TriMesh, basis: TangentBasis,
                 positions, times_ms) -> Dataset:
    dim = 2 if is_flat_xy(mesh) else 3
    pts, v1, v2 = collocation_points(mesh, basis)
    unit = cfg.sampling.time_unit_ms
    raw = [np.maximum(np.asarray(t, float) / unit, 0.0) for t in times_ms]
    return Dataset.from_raw([np.asarray(p)[:, :dim] for p in positions], raw,
                            pts[:, :dim], v1[:, :dim], v2[:, :dim], cfg.training.t_max)


def train_model(cfg: ExperimentConfig, data: GeneratedData, callback=None) -> TrainedModel:
    ds = make_dataset(cfg, data.mesh, data.basis, [m.positions for m in data.maps],
                      [m.times_ms for m in data.maps])
    return train(cfg.training, ds, callback)


def learned_tensor_field(model: TrainedModel, mesh: TriMesh,
                         basis: TangentBasis) -> ConductivityTensorField:
    D = model.tensors(mesh.vertices, basis.v1, basis.v2)
    return ConductivityTensorField(0.5 * (D + D.transpose(0, 2, 1)))


# -- evaluation ----------------------------------------------------------------

@dataclass
class Evaluation:
    rows: list[dict]
    point_data: dict
    errors: np.ndarray | None


def _fiber_rows(cfg, errors, mesh, truth_kind, base):
    rows = []
    regions = [("all", np.ones(mesh.n_vertices, bool))]
    if truth_kind == "piecewise":
        h = mesh.mean_edge_length
        smooth = discontinuity_distance(mesh) >= cfg.evaluate.band_width_h * h / 2
        regions.append(("smooth", smooth))
    for name, mask in regions:
        st = error_summary(errors[mask])
        rows.append({**base, "region": name, "fiber_error_mean_deg": st["mean"],
                     "fiber_error_median_deg": st["median"], "fiber_error_p25": st["p25"],
                     "fiber_error_p75": st["p75"]})
    return rows


def evaluate_model(cfg: ExperimentConfig, data: GeneratedData, model: TrainedModel) -> Evaluation:
    """Fiber-angle statistics, fit RMSE per map and unseen-map RMSE."""
    mesh, basis, truth = data.mesh, data.basis, data.truth
    unit = cfg.sampling.time_unit_ms
    D_hat = learned_tensor_field(model, mesh, basis)
    f_hat, _ = fiber_direction(D_hat.tensors, basis.v1)
    a, e1, e2 = model.fiber_params(mesh.vertices)
    pred = model.times(mesh.vertices)
    pd = {"fiber_pred": f_hat, "a_pred": a, "e1_pred": e1, "e2_pred": e2,
          "v1": basis.v1, "v2": basis.v2}

    fit_rmse = []
    for m, md in enumerate(data.maps):
        pd[f"time_pred_{m}"] = pred[m] * unit
        # against the observed samples (the only quantity available clinically)
        sample_pred = model.times(md.positions, m) * unit
        fit_rmse.append(map_rmse(sample_pred, md.times_ms))
    base = {"experiment": cfg.experiment, "method": "pinn", "maps": len(data.maps),
            "noise": cfg.sampling.noise_ms, "seed": cfg.seed,
            "rmse_ms": float(np.mean(fit_rmse)), "unseen_rmse_ms": float("nan")}

    errors = None
    if truth is None:
        return Evaluation([{**base, "region": "all", "fiber_error_mean_deg": float("nan"),
                            "fiber_error_median_deg": float("nan"),
                            "fiber_error_p25": float("nan"), "fiber_error_p75": float("nan")}],
                          pd, None)
    if cfg.evaluate.unseen:
        rmse, learned, true = validate_unseen_map(mesh, D_hat, truth.D, data.hold_out,
                                                  cfg.sampling.fim_source_radius)
        base["unseen_rmse_ms"] = rmse * unit
        pd["unseen_pred"] = np.where(np.isfinite(learned.times), learned.times, -1.0) * unit
        pd["unseen_true"] = true.times * unit
    errors = fiber_angle_error(truth.fibers, f_hat)
    pd["fiber_true"] = truth.fibers
    pd["fiber_error_deg"] = errors
    rows = _fiber_rows(cfg, errors, mesh, cfg.truth.kind, base)
    return Evaluation(rows, pd, errors)


def interpolate_samples(mesh: TriMesh, positions, times) -> np.ndarray:
    """Vertex values from scattered samples: piecewise-linear interpolation
    over the samples' Delaunay triangulation on flat domains (nearest sample
    outside the hull), inverse-distance weighting of the 4 nearest samples on
    curved surfaces."""
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
    from scipy.spatial import cKDTree

    P = np.asarray(positions, float)
    t = np.asarray(times, float)
    if is_flat_xy(mesh) and len(P) >= 3:
        try:
            lin = LinearNDInterpolator(P[:, :2], t)(mesh.vertices[:, :2])
        except Exception:  # degenerate (collinear) sample sets
            lin = np.full(mesh.n_vertices, np.nan)
        near = NearestNDInterpolator(P[:, :2], t)(mesh.vertices[:, :2])
        return np.where(np.isfinite(lin), lin, near)
    k = min(4, len(P))
    d, idx = cKDTree(P).query(mesh.vertices, k=list(range(1, k + 1)))
    w = 1.0 / np.maximum(d, 1e-12) ** 2
    return (w * t[idx]).sum(1) / w.sum(1)


def run_baseline(cfg: ExperimentConfig, data: GeneratedData) -> tuple[Evaluation, object]:
    """Residual-minimizing tensor fit from interpolated map gradients."""
    mesh, basis, truth = data.mesh, data.basis, data.truth
    unit = cfg.sampling.time_unit_ms
    grads = []
    for md in data.maps:
        vt = interpolate_samples(mesh, md.positions, md.times_ms / unit)
        grads.append(vertex_gradients(mesh, vt))
    G = np.stack(grads, axis=1)
    rep = fit_tensor_from_gradients(G, basis.v1, basis.v2, cap=cfg.training.cap)
    f_hat, _ = fiber_direction(rep.tensors, basis.v1)
    pd = {"fiber_pred": f_hat, "a_pred": rep.a, "e1_pred": rep.e1, "e2_pred": rep.e2,
          "unique": rep.unique.astype(float), "fit_residual": rep.residual}
    base = {"experiment": cfg.experiment, "method": "baseline", "maps": len(data.maps),
            "noise": cfg.sampling.noise_ms, "seed": cfg.seed, "rmse_ms": float("nan"),
            "unseen_rmse_ms": float("nan")}
    if truth is None:
        return Evaluation([{**base, "region": "all"}], pd, None), rep
    D_hat = ConductivityTensorField(rep.tensors)
    if cfg.evaluate.unseen:
        rmse, _, _ = validate_unseen_map(mesh, D_hat, truth.D, data.hold_out,
                                         cfg.sampling.fim_source_radius)
        base["unseen_rmse_ms"] = rmse * unit
    errors = fiber_angle_error(truth.fibers, f_hat)
    pd["fiber_error_deg"] = errors
    return Evaluation(_fiber_rows(cfg, errors, mesh, cfg.truth.kind, base), pd, errors), rep


def truth_params_in_basis(truth: GroundTruth, basis: TangentBasis):
    """(a, e1, e2) of the ground truth expressed in ``basis``."""
    return params_from_tensor(truth.D.tensors, basis.v1, basis.v2)
