import csv
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fiberfield import trainer as tr
from fiberfield.config import parse_config
from fiberfield.errors import InvalidArgument, NonFiniteLossError
from fiberfield.experiments import generate, make_dataset
from fiberfield.neural_field import activation_map_spec, fiber_params_spec, init_params
from fiberfield.trainer import (AdamState, Batch, Dataset, FieldValues, TrainingConfig,
                                adam_step, compute_loss, huber, load_model, loss_from_fields,
                                normalize_times, save_model, train, write_history_csv)


# -- config and presets --------------------------------------------------------

def test_presets():
    p2 = TrainingConfig.preset_2d()
    assert p2.phi_hidden == (10,) * 5 and p2.d_hidden == (5,) * 5
    assert (p2.iterations, p2.batch_size, p2.alpha_m, p2.alpha_a) == (3000, 32, 1e-2, 1e-9)
    assert p2.delta_e == p2.delta_a == 1e-3 and p2.learning_rate == 1e-3
    p3 = TrainingConfig.preset_3d()
    assert p3.phi_hidden == (20,) * 7 and p3.d_hidden == (20,) * 5
    assert (p3.iterations, p3.alpha_m) == (30000, 1e-4)


@pytest.mark.parametrize("kw", [{"alpha_e": -1}, {"delta_a": 0}, {"iterations": 0},
                                {"batch_size": 0}])
def test_config_invariants(kw):
    with pytest.raises(InvalidArgument):
        TrainingConfig(**kw)


# -- normalization -------------------------------------------------------------

def test_normalize_times_examples():
    t_max, maps = normalize_times([[0, 100, 250], [20]])
    assert t_max == 250 and maps[0][2] == 1.0
    with pytest.warns(UserWarning):
        t_max, maps = normalize_times([[0.0]])
    assert t_max == 1 and maps[0][0] == 0
    with pytest.raises(InvalidArgument):
        normalize_times([[]])


@given(c=st.floats(0.01, 100), t=st.lists(st.floats(0, 1000), min_size=1, max_size=10))
def test_normalize_scale_invariance(c, t):
    t = np.array(t)
    if t.max() == 0:
        t[0] = 1.0
    a, ma = normalize_times([t])
    b, mb = normalize_times([c * t])
    assert b == pytest.approx(c * a)
    assert np.allclose(ma[0], mb[0])
    assert (ma[0] >= 0).all() and (ma[0] <= 1).all()


def test_dataset_rejects_negative_times():
    with pytest.raises(InvalidArgument):
        Dataset([np.zeros((1, 2))], [np.array([-0.1])], np.zeros((1, 2)),
                np.zeros((1, 2)), np.zeros((1, 2)), 1.0)


# -- Huber ---------------------------------------------------------------------

def test_huber_examples():
    assert huber(np.zeros(2), 1e-3) == 0
    d = 0.3
    assert huber(np.array([d, 0.0]), d) == pytest.approx(d / 2, abs=1e-12)
    assert huber(np.array([0.0, 1.0]), 1e-3) == pytest.approx(0.9995, abs=1e-12)


@given(q=st.lists(st.floats(-5, 5), min_size=2, max_size=2), d=st.floats(1e-3, 2))
def test_huber_bounds(q, d):
    q = np.array(q)
    n = np.linalg.norm(q)
    h = huber(q, d)
    assert h >= 0 and h <= n * n / (2 * d) + 1e-12 and h >= n - d / 2 - 1e-12


# -- loss on analytic fields ---------------------------------------------------

D_TRUE = np.diag([1.0, 0.5])


def analytic_fields(x, t_max, e_scale=1.0, bd=3):
    """Constant tensor diag(1, 1/2) in the frame (ex, ey), a = 1, and the exact
    normalized map sqrt(x^2 + 2 y^2) / t_max."""
    n = len(x)
    r = np.sqrt(x[:, 0] ** 2 + 2 * x[:, 1] ** 2)
    g = np.stack([x[:, 0], 2 * x[:, 1]], axis=1) / r[:, None] / t_max
    z = np.zeros((n, 2))
    ph = np.linspace(0.1, 0.9, bd)[None]
    return FieldValues(phi_hat=ph, phi=ph.copy(), w=np.full((1, bd), 1 / bd),
                       grad_phi=g[None], a=np.ones(n), s=np.zeros(n),
                       e1=np.full(n, e_scale), e2=np.full(n, 0.5 * e_scale),
                       grad_a=z, grad_e1=z, grad_e2=z,
                       v1=np.tile([1.0, 0], (n, 1)), v2=np.tile([0, 1.0], (n, 1)))


def test_exact_solution_has_zero_loss(rng):
    x = rng.uniform(-1, 1, size=(200, 2))
    cfg = TrainingConfig(alpha_e=0, alpha_a=0)
    total, terms, _ = loss_from_fields(analytic_fields(x, 1.7), cfg, 1.7)
    assert total < 1e-8 and terms["eiko"] < 1e-20


@pytest.mark.parametrize("s", [0.5, 0.9, 1.3, 2.0])
def test_constant_wrong_speed(s, rng):
    x = rng.uniform(-1, 1, size=(50, 2))
    cfg = TrainingConfig(alpha_m=1, alpha_e=0, alpha_a=0)
    total, terms, _ = loss_from_fields(analytic_fields(x, 1.0, e_scale=s * s), cfg, 1.0)
    assert terms["eiko"] == pytest.approx((s - 1) ** 2, abs=1e-12)


def test_single_data_point():
    x = np.array([[0.3, 0.4]])
    fv = analytic_fields(x, 1.0, bd=1)
    fv.phi_hat = np.array([[0.6]])
    fv.phi = np.array([[0.5]])
    fv.w = np.ones((1, 1))
    cfg = TrainingConfig(alpha_m=0, alpha_e=0, alpha_a=0)
    total, _, _ = loss_from_fields(fv, cfg, 1.0)
    assert total == pytest.approx(0.01, abs=1e-15)


def test_non_finite_term_is_named(rng):
    fv = analytic_fields(rng.uniform(-1, 1, size=(5, 2)), 1.0)
    fv.grad_e1 = fv.grad_e1.copy()
    fv.grad_e1[0, 0] = np.inf
    with pytest.raises(NonFiniteLossError) as e:
        loss_from_fields(fv, TrainingConfig(), 1.0)
    assert e.value.term == "cv"


# -- loss through networks -----------------------------------------------------

def small_problem(seed=0, M=2, Bd=6, Bc=7, dim=2, hidden=(4,)):
    r = np.random.default_rng(seed)
    ps = activation_map_spec(dim, hidden)
    ds = fiber_params_spec(dim, hidden)
    p = init_params(ps, seed, stack=M)
    d = init_params(ds, seed + 1)
    p = p.with_flat(p.flat() + 0.5 * r.normal(size=p.size))
    d = d.with_flat(d.flat() + 0.5 * r.normal(size=d.size))
    ang = r.uniform(0, 2 * np.pi, Bc)
    v1 = np.stack([np.cos(ang), np.sin(ang)], 1)
    v2 = np.stack([-np.sin(ang), np.cos(ang)], 1)
    b = Batch(r.uniform(-1, 1, (M, Bd, dim)), r.uniform(0, 1, (M, Bd)),
              np.full((M, Bd), 1 / (M * Bd)), r.uniform(-1, 1, (Bc, dim)), v1, v2)
    return p, d, b


def test_terms_nonnegative_and_alpha_monotone():
    p, d, b = small_problem()
    lo = compute_loss(p, d, b, TrainingConfig(alpha_e=1e-3), 1.3, 1.0)
    hi = compute_loss(p, d, b, TrainingConfig(alpha_e=1e-1), 1.3, 1.0)
    assert all(v >= 0 for v in lo.terms.values())
    assert lo.terms["cv"] > 0 and hi.total > lo.total


def test_data_term_invariant_to_duplication():
    p, d, b = small_problem(M=1)
    cfg = TrainingConfig()
    base = compute_loss(p, d, b, cfg, 1.0, 1.0).terms["data"]
    b2 = Batch(np.concatenate([b.x_data, b.x_data], 1), np.concatenate([b.phi, b.phi], 1),
               np.concatenate([b.w, b.w], 1) / 2, b.y, b.v1, b.v2)
    assert compute_loss(p, d, b2, cfg, 1.0, 1.0).terms["data"] == pytest.approx(base, rel=1e-12)


def test_loss_gradient_vs_fd():
    p, d, b = small_problem(seed=3)
    cfg = TrainingConfig(alpha_m=0.5, alpha_e=0.3, alpha_a=0.2, delta_e=0.05, delta_a=0.5)
    res = compute_loss(p, d, b, cfg, 1.5, 0.8, grad=True)
    g = np.concatenate([res.grad_phi.flat(), res.grad_d.flat()])
    v = np.concatenate([p.flat(), d.flat()])
    n = p.size

    def f(w):
        return compute_loss(p.with_flat(w[:n]), d.with_flat(w[n:]), b, cfg, 1.5, 0.8).total

    h = 1e-5
    fd = np.array([(f(v + h * e) - f(v - h * e)) / (2 * h) for e in np.eye(len(v))])
    assert np.abs(fd - g).max() / np.abs(g).max() < 1e-4


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient():
    x = np.array([1.0, -2.0])
    y, st_ = adam_step(x, np.zeros(2), AdamState.zeros(2))
    assert np.array_equal(x, y) and st_.t == 1


def test_adam_first_step_is_sign():
    g = np.array([3.0, -0.02, 1e3])
    y, _ = adam_step(np.zeros(3), g, AdamState.zeros(3), lr=1e-3)
    assert np.allclose(y, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_constant_gradient_limit():
    g = np.array([0.5, -4.0])
    x, state = np.zeros(2), AdamState.zeros(2)
    for _ in range(5000):
        prev = x
        x, state = adam_step(x, g, state, lr=1e-2)
    assert np.allclose(x - prev, -1e-2 * np.sign(g), rtol=1e-6)


# -- training ------------------------------------------------------------------

def constant_problem(maps=3, seed=0):
    cfg = parse_config({"seed": seed, "domain": {"n": 21},
                        "truth": {"kind": "constant", "a": 1.0, "e1": 1.0, "e2": 0.5},
                        "sampling": {"maps": maps, "total": 150},
                        "training": {"preset": "2d", "seed": seed}})
    data = generate(cfg)
    ds = make_dataset(cfg, data.mesh, data.basis, [m.positions for m in data.maps],
                      [m.times_ms for m in data.maps])
    return cfg, ds


def test_train_is_deterministic():
    cfg, ds = constant_problem()
    tc = TrainingConfig(phi_hidden=(6,), d_hidden=(4,), iterations=60, log_every=20)
    a, b = train(tc, ds), train(tc, ds)
    assert a.history == b.history
    assert [r["iteration"] for r in a.history] == [0, 20, 40, 60]
    assert np.array_equal(a.d.params.flat(), b.d.params.flat())
    c = train(TrainingConfig(phi_hidden=(6,), d_hidden=(4,), iterations=60, seed=1), ds)
    assert c.history != a.history


def test_divergence_guard(monkeypatch):
    _, ds = constant_problem()
    tc = TrainingConfig(phi_hidden=(4,), d_hidden=(4,), iterations=50, log_every=10)
    real = tr.compute_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if kw.get("grad") and calls["n"] > 20:
            raise NonFiniteLossError("eiko")
        return real(*a, **kw)

    monkeypatch.setattr(tr, "compute_loss", flaky)
    model = train(tc, ds)
    assert model.diverged
    assert model.phi.params.check_finite() and model.d.params.check_finite()
    assert np.isfinite(model.times(ds.colloc)).all()


@pytest.mark.slow
def test_training_reduces_loss_100x():
    cfg, ds = constant_problem(maps=3)
    model = train(cfg.training, ds)
    h = model.history
    assert h[0]["iteration"] == 0 and h[-1]["iteration"] == 3000
    assert h[0]["total"] / h[-1]["total"] >= 100


def test_history_csv_and_model_round_trip(tmp_path):
    _, ds = constant_problem(maps=2)
    model = train(TrainingConfig(phi_hidden=(5,), d_hidden=(3,), iterations=30, log_every=10), ds)
    path = tmp_path / "history.csv"
    write_history_csv(path, model.history)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(tr.HISTORY_COLUMNS)
    assert float(rows[-1]["total"]) == model.history[-1]["total"]
    save_model(tmp_path / "model.bin", model)
    m2 = load_model(tmp_path / "model.bin")
    assert m2.config == model.config and m2.t_max == model.t_max and m2.n_maps == 2
    assert np.array_equal(m2.times(ds.colloc), model.times(ds.colloc))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.array_equal(m2.fiber_params(ds.colloc)[0], model.fiber_params(ds.colloc)[0])
