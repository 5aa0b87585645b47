import csv

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from fiberfield.conductivity import assemble_tensor
from fiberfield.eikonal import ConductivityTensorField
from fiberfield.errors import InvalidArgument
from fiberfield.estimators import (METRICS_COLUMNS, add_noise, error_summary, fiber_angle_error,
                                   fit_tensor_from_gradients, map_rmse, validate_unseen_map,
                                   vertex_gradients, write_metrics_csv)
from fiberfield.geometry import build_unit_grid_mesh

D2 = np.diag([1.0, 0.5])
EX, EY = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def exact_gradients(D, directions):
    """Unit-speed gradients g = D^-1 u / sqrt(u . D^-1 u) for wave directions u."""
    Di = np.linalg.inv(D)
    out = []
    for u in directions:
        u = np.asarray(u, float) / np.linalg.norm(u)
        g = Di @ u
        out.append(g / np.sqrt(g @ D @ g))
    return np.array(out)


# -- baseline fit --------------------------------------------------------------

def test_fit_three_maps_recovers_tensor():
    g = exact_gradients(D2, [(1, 0.2), (-0.3, 1), (0.7, -0.7)])
    rep = fit_tensor_from_gradients(g, EX, EY)
    assert np.linalg.norm(rep.tensors[:2, :2] - D2) < 1e-6
    assert rep.unique and rep.rank == 2


def test_fit_parallel_gradients_not_unique():
    g = exact_gradients(D2, [(1, 0.3), (1, 0.3)])
    assert not fit_tensor_from_gradients(g, EX, EY).unique


def test_fit_single_map_is_flagged():
    g = exact_gradients(D2, [(1, 1)])
    rep = fit_tensor_from_gradients(g, EX, EY)
    assert not rep.unique
    # whatever it returns still reproduces the one observation
    assert rep.residual < 1e-12


def test_fit_empty_raises():
    with pytest.raises(InvalidArgument):
        fit_tensor_from_gradients(np.zeros((0, 2)), EX, EY)


@given(theta=st.floats(0, np.pi), e1=st.floats(0.1, 2.2), e2=st.floats(0.1, 2.2),
       seed=st.integers(0, 1000))
def test_fit_residual_not_worse_than_truth(theta, e1, e2, seed):
    D = assemble_tensor(np.cos(theta), e1, e2, EX, EY)
    r = np.random.default_rng(seed)
    dirs = r.normal(size=(3, 2))
    assume(np.abs(np.linalg.svd(dirs, compute_uv=False)).min() > 0.1)
    g = exact_gradients(D, dirs) * (1 + 0.05 * r.normal(size=(3, 1)))
    rep = fit_tensor_from_gradients(g, EX, EY)
    r_true = np.sum((np.sqrt(np.einsum("mi,ij,mj->m", g, D, g)) - 1) ** 2)
    assert rep.residual <= r_true + 1e-9
    assert np.linalg.eigvalsh(rep.tensors[:2, :2]).min() > 0


def test_fit_batched_vertices():
    g = exact_gradients(D2, [(1, 0), (0, 1), (1, 1)])
    rep = fit_tensor_from_gradients(np.stack([g, g[[0, 0, 0]]]), EX, EY)
    assert rep.tensors.shape == (2, 3, 3)
    assert rep.unique.tolist() == [True, False]


# -- angle error ---------------------------------------------------------------

def test_angle_error_examples():
    f = np.array([1.0, 0, 0])
    assert fiber_angle_error(f, f) == pytest.approx(0, abs=1e-6)
    assert fiber_angle_error(f, -f) == pytest.approx(0, abs=1e-6)
    c = np.radians(30)
    assert fiber_angle_error(f, [np.cos(c), np.sin(c), 0]) == pytest.approx(30, abs=1e-9)
    with pytest.raises(InvalidArgument):
        fiber_angle_error(f, np.zeros(3))


vec = st.lists(st.floats(-1, 1), min_size=3, max_size=3).map(np.array)


@given(a=vec, b=vec)
def test_angle_error_properties(a, b):
    assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
    e = fiber_angle_error(a, b)
    assert 0 <= e <= 90
    assert e == pytest.approx(fiber_angle_error(b, a), abs=1e-9)
    assert e == pytest.approx(fiber_angle_error(-a, b), abs=1e-9)


# -- RMSE, noise, summaries ----------------------------------------------------

def test_rmse_examples():
    x = np.array([1.0, 5.0, -2.0])
    assert map_rmse(x, x) == 0
    assert map_rmse(x + 0.7, x) == pytest.approx(0.7)
    assert map_rmse([0, 2], [1, 1]) == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        map_rmse([1, 2], [1])


def test_noise():
    t = np.linspace(0, 10, 10_000)
    assert np.array_equal(add_noise(t, 0), t)
    n = add_noise(t, 1.0, seed=5)
    assert n.shape == t.shape
    assert 0.97 <= np.std(n - t) <= 1.03
    assert np.array_equal(n, add_noise(t, 1.0, seed=5))
    with pytest.raises(InvalidArgument):
        add_noise(t, -1)


def test_error_summary():
    s = error_summary([1.0, 2.0, 3.0, np.nan])
    assert s == {"mean": 2.0, "median": 2.0, "p25": 1.5, "p75": 2.5}
    assert np.isnan(error_summary([])["mean"])


def test_vertex_gradients_linear_field():
    m = build_unit_grid_mesh(7)
    g = vertex_gradients(m, 2 * m.vertices[:, 0] - m.vertices[:, 1])
    assert np.allclose(g, [2, -1, 0], atol=1e-12)


def test_metrics_csv(tmp_path):
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, [{"experiment": "e", "method": "network", "maps": 3,
                           "fiber_error_mean_deg": 1.5, "rmse_ms": float("nan")}])
    with open(p) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert rows[0]["rmse_ms"] == "nan" and rows[0]["maps"] == "3"


# -- unseen map ----------------------------------------------------------------

def test_validate_unseen_map():
    m = build_unit_grid_mesh(15)
    aniso = ConductivityTensorField.constant(m, np.diag([1.0, 0.5, 0.0]))
    rmse, _, _ = validate_unseen_map(m, aniso, aniso, 100)
    assert rmse == 0
    iso = ConductivityTensorField.constant(m, np.diag([0.5, 0.5, 0.0]))
    rmse, learned, true = validate_unseen_map(m, iso, aniso, 100)
    assert rmse > 0 and learned.times.shape == true.times.shape
