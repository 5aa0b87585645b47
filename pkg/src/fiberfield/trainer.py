"""Joint fit of per-map activation networks and one conductivity network.

The loss is

    L = L_data + alpha_m L_eiko + alpha_e L_cv + alpha_a L_ang

with a squared data misfit per map, the squared eikonal residual
``T_max sqrt(D grad(phi) . grad(phi)) - 1`` at collocation points, and Huber
total-variation penalties on the spatial gradients of e1, e2 and a.  All
derivatives are computed in closed form and pushed through the networks by
:func:`fiberfield.neural_field.backward_raw`.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .conductivity import DEFAULT_SPEED2_CAP, assemble_tensor, fiber_direction
from .errors import InvalidArgument, NonFiniteLossError
from .neural_field import (MlpParams, NeuralField, activation_map_spec, backward_raw,
                           fiber_params_spec, forward, forward_raw, init_params, load_fields,
                           save_fields)

log = logging.getLogger(__name__)

SQRT_FLOOR = 1e-12
TERMS = ("data", "eiko", "cv", "ang")


@dataclass
class TrainingConfig:
    alpha_m: float = 1e-2
    alpha_e: float = 1e-5
    alpha_a: float = 1e-9
    delta_e: float = 1e-3
    delta_a: float = 1e-3
    t_max: float | None = None  # None: largest observed time
    cap: float = DEFAULT_SPEED2_CAP
    phi_hidden: tuple[int, ...] = (10,) * 5
    d_hidden: tuple[int, ...] = (5,) * 5
    iterations: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.phi_hidden = tuple(self.phi_hidden)
        self.d_hidden = tuple(self.d_hidden)
        for k in ("alpha_m", "alpha_e", "alpha_a"):
            if getattr(self, k) < 0:
                raise InvalidArgument(f"{k} must be >= 0")
        if self.delta_e <= 0 or self.delta_a <= 0:
            raise InvalidArgument("Huber thresholds must be > 0")
        if self.iterations < 1 or self.batch_size < 1:
            raise InvalidArgument("iterations and batch_size must be >= 1")
        if self.t_max is not None and self.t_max <= 0:
            raise InvalidArgument("t_max must be positive")

    @classmethod
    def preset_2d(cls, **kw) -> "TrainingConfig":
        return cls(**{**dict(alpha_m=1e-2, phi_hidden=(10,) * 5, d_hidden=(5,) * 5,
                             iterations=3000), **kw})

    @classmethod
    def preset_3d(cls, **kw) -> "TrainingConfig":
        return cls(**{**dict(alpha_m=1e-4, phi_hidden=(20,) * 7, d_hidden=(20,) * 5,
                             iterations=30000), **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi_hidden"] = list(self.phi_hidden)
        d["d_hidden"] = list(self.d_hidden)
        return d


def normalize_times(raw_maps):
    """Scale all maps by their common maximum ``T_max``.

    Returns ``(T_max, [normalized maps])``; an all-zero dataset keeps
    ``T_max = 1``.
    """
    maps = [np.asarray(m, float) for m in raw_maps]
    if not maps or sum(m.size for m in maps) == 0:
        raise InvalidArgument("at least one sample is required")
    t_max = max(float(m.max()) for m in maps if m.size)
    if t_max <= 0:
        warnings.warn("all activation times are zero; using T_max = 1")
        t_max = 1.0
    return t_max, [m / t_max for m in maps]


@dataclass
class Dataset:
    """Normalized training data.

    ``positions[m]`` are (N_m, dim) data locations, ``times[m]`` normalized
    arrival times, ``colloc`` (N_C, dim) collocation points with tangent
    frames ``v1``/``v2`` (N_C, dim).
    """

    positions: list[np.ndarray]
    times: list[np.ndarray]
    colloc: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    t_max: float

    def __post_init__(self):
        if len(self.positions) != len(self.times) or not self.positions:
            raise InvalidArgument("need one time array per map and at least one map")
        for p, t in zip(self.positions, self.times):
            if len(p) != len(t) or len(t) == 0:
                raise InvalidArgument("every map needs >= 1 sample with matching times")
            if (t < 0).any():
                raise InvalidArgument("activation times must be >= 0")
        if len(self.colloc) == 0:
            raise InvalidArgument("at least one collocation point is required")

    @property
    def n_maps(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.colloc.shape[1]

    @classmethod
    def from_raw(cls, positions, raw_times, colloc, v1, v2, t_max=None):
        if t_max is None:
            t_max, times = normalize_times(raw_times)
        else:
            times = [np.asarray(t, float) / t_max for t in raw_times]
        dim = np.asarray(colloc).shape[1]
        return cls([np.asarray(p, float)[:, :dim] for p in positions], times,
                   np.asarray(colloc, float), np.asarray(v1, float)[:, :dim],
                   np.asarray(v2, float)[:, :dim], float(t_max))

    def normalization(self):
        pts = np.concatenate([self.colloc, *self.positions])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return (lo + hi) / 2, max(float((hi - lo).max()) / 2, 1e-12)


def huber(q, delta: float):
    """Huber TV of vectors ``q`` (..., d): quadratic below ``delta``."""
    n = np.linalg.norm(q, axis=-1)
    return np.where(n <= delta, n * n / (2 * delta), n - delta / 2)


def huber_grad(q, delta: float):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(n <= delta, q / delta, q / np.maximum(n, 1e-300))


# -- loss on field values ------------------------------------------------------

@dataclass
class FieldValues:
    """Everything the loss needs, evaluated at the batch points.

    Data rows: ``phi_hat``/``phi`` (M, Bd) with weights ``w`` (M, Bd).
    Collocation rows: ``grad_phi`` (M, Bc, dim), ``a``/``s`` = sqrt(1-a^2),
    ``e1``/``e2`` (Bc,), gradients ``grad_a``, ``grad_e1``, ``grad_e2``
    (Bc, dim), frames ``v1``/``v2`` (Bc, dim).
    """

    phi_hat: np.ndarray
    phi: np.ndarray
    w: np.ndarray
    grad_phi: np.ndarray
    a: np.ndarray
    s: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    grad_a: np.ndarray
    grad_e1: np.ndarray
    grad_e2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray


def eikonal_speed(grad_phi, a, s, e1, e2, v1, v2):
    """``D grad . grad`` with D assembled from (a, e1, e2) in the frame."""
    g1 = np.einsum("...i,...i->...", grad_phi, v1)
    g2 = np.einsum("...i,...i->...", grad_phi, v2)
    P = a * g1 + s * g2
    Q = -s * g1 + a * g2
    return e1 * P * P + e2 * Q * Q, (g1, g2, P, Q)


def _check(term, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteLossError(term)


def loss_from_fields(fv: FieldValues, cfg: TrainingConfig, t_max: float, grad: bool = False):
    """Loss terms from field values; with ``grad`` also returns the
    derivatives with respect to every field in ``fv`` (as a dict)."""
    M, Bc = fv.grad_phi.shape[:2]
    res = fv.phi_hat - fv.phi
    l_data = float((fv.w * res * res).sum())
    _check("data", l_data)

    q, (g1, g2, P, Q) = eikonal_speed(fv.grad_phi, fv.a, fv.s, fv.e1, fv.e2,
                                      fv.v1[None], fv.v2[None])
    sq = np.sqrt(np.maximum(q, SQRT_FLOOR))
    r = t_max * sq - 1.0
    l_eiko = float((r * r).mean())
    _check("eiko", l_eiko)

    l_cv = float((huber(fv.grad_e1, cfg.delta_e) + huber(fv.grad_e2, cfg.delta_e)).mean())
    _check("cv", l_cv)
    l_ang = float(huber(fv.grad_a, cfg.delta_a).mean())
    _check("ang", l_ang)

    terms = {"data": l_data, "eiko": l_eiko, "cv": l_cv, "ang": l_ang}
    total = l_data + cfg.alpha_m * l_eiko + cfg.alpha_e * l_cv + cfg.alpha_a * l_ang
    if not grad:
        return total, terms, None

    g = {"phi_hat": 2 * fv.w * res}
    gr = cfg.alpha_m * 2 * r / (M * Bc)
    gq = gr * t_max / (2 * sq) * (q > SQRT_FLOOR)
    g["e1"] = (gq * P * P).sum(0)
    g["e2"] = (gq * Q * Q).sum(0)
    gP = gq * 2 * fv.e1 * P
    gQ = gq * 2 * fv.e2 * Q
    g["a"] = (gP * g1 + gQ * g2).sum(0)
    g["s"] = (gP * g2 - gQ * g1).sum(0)
    gg1 = gP * fv.a - gQ * fv.s
    gg2 = gP * fv.s + gQ * fv.a
    g["grad_phi"] = gg1[..., None] * fv.v1[None] + gg2[..., None] * fv.v2[None]
    g["grad_e1"] = cfg.alpha_e / Bc * huber_grad(fv.grad_e1, cfg.delta_e)
    g["grad_e2"] = cfg.alpha_e / Bc * huber_grad(fv.grad_e2, cfg.delta_e)
    g["grad_a"] = cfg.alpha_a / Bc * huber_grad(fv.grad_a, cfg.delta_a)
    return total, terms, g


# -- loss through the networks -------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sech(u):
    e = np.exp(-np.abs(u))
    return 2 * e / (1 + e * e)


@dataclass
class Batch:
    """Normalized network inputs for one loss evaluation."""

    x_data: np.ndarray  # (M, Bd, dim)
    phi: np.ndarray  # (M, Bd)
    w: np.ndarray  # (M, Bd)
    y: np.ndarray  # (Bc, dim)
    v1: np.ndarray
    v2: np.ndarray


@dataclass
class LossResult:
    total: float
    terms: dict
    grad_phi: MlpParams | None = None
    grad_d: MlpParams | None = None


def compute_loss(phi_params: MlpParams, d_params: MlpParams, batch: Batch,
                 cfg: TrainingConfig, t_max: float, scale: float,
                 grad: bool = False) -> LossResult:
    """Four-term loss for stacked activation networks ``phi_params`` (leading
    axis M) and the conductivity network ``d_params``.

    ``scale`` converts input-space gradients to world units (inputs are
    ``(x - center) / scale``).
    """
    M, Bd = batch.phi.shape
    Bc = len(batch.y)
    xs = np.concatenate([batch.x_data, np.broadcast_to(batch.y, (M,) + batch.y.shape)], axis=1)
    zp, Jp, tape_p = forward_raw(phi_params, xs, jacobian=True)
    zd, Jd, tape_d = forward_raw(d_params, batch.y, jacobian=True)

    sp_ = _sigmoid(zp[..., 0])
    dsp = sp_ * (1 - sp_)
    d2sp = dsp * (1 - 2 * sp_)
    Jc = Jp[:, Bd:, :, 0]
    grad_phi = dsp[:, Bd:, None] * Jc / scale

    u = zd[:, 0]
    a = np.tanh(u)
    s = _sech(u)
    da = 1 - a * a
    z1, z2 = zd[:, 1], zd[:, 2]
    s1, s2 = _sigmoid(z1), _sigmoid(z2)
    ds1, ds2 = s1 * (1 - s1), s2 * (1 - s2)
    C = cfg.cap
    fv = FieldValues(
        phi_hat=sp_[:, :Bd], phi=batch.phi, w=batch.w, grad_phi=grad_phi,
        a=a, s=s, e1=C * s1, e2=C * s2,
        grad_a=da[:, None] * Jd[:, :, 0] / scale,
        grad_e1=C * ds1[:, None] * Jd[:, :, 1] / scale,
        grad_e2=C * ds2[:, None] * Jd[:, :, 2] / scale,
        v1=batch.v1, v2=batch.v2)
    total, terms, g = loss_from_fields(fv, cfg, t_max, grad=grad)
    if not grad:
        return LossResult(total, terms)

    gzp = np.zeros_like(zp)
    gJp = np.zeros_like(Jp)
    gzp[:, :Bd, 0] = g["phi_hat"] * dsp[:, :Bd]
    gg = g["grad_phi"]
    gzp[:, Bd:, 0] = (gg * Jc).sum(-1) * d2sp[:, Bd:] / scale
    gJp[:, Bd:, :, 0] = gg * dsp[:, Bd:, None] / scale

    gzd = np.zeros_like(zd)
    gJd = np.zeros_like(Jd)
    ga_vec, ge1_vec, ge2_vec = g["grad_a"], g["grad_e1"], g["grad_e2"]
    gzd[:, 0] = (g["a"] * da - g["s"] * s * a
                 + (ga_vec * Jd[:, :, 0]).sum(-1) * (-2 * a * da) / scale)
    gJd[:, :, 0] = ga_vec * da[:, None] / scale
    gzd[:, 1] = C * (g["e1"] * ds1 + (ge1_vec * Jd[:, :, 1]).sum(-1) * ds1 * (1 - 2 * s1) / scale)
    gJd[:, :, 1] = ge1_vec * (C * ds1[:, None]) / scale
    gzd[:, 2] = C * (g["e2"] * ds2 + (ge2_vec * Jd[:, :, 2]).sum(-1) * ds2 * (1 - 2 * s2) / scale)
    gJd[:, :, 2] = ge2_vec * (C * ds2[:, None]) / scale

    grad_p = backward_raw(phi_params, tape_p, gzp, gJp)
    grad_d = backward_raw(d_params, tape_d, gzd, gJd)
    return LossResult(total, terms, grad_p, grad_d)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on flat vectors; returns (params, state)."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


# -- training loop -------------------------------------------------------------

class _EpochSampler:
    """Shuffled indices drawn without replacement within each epoch."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch
        while need:
            if self.pos == self.n:
                self.perm, self.pos = self.rng.permutation(self.n), 0
            take = min(need, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class TrainedModel:
    phi: NeuralField  # stacked, one member per map
    d: NeuralField
    t_max: float
    config: TrainingConfig
    history: list = field(default_factory=list)
    diverged: bool = False

    @property
    def n_maps(self) -> int:
        return self.phi.params.weights[0].shape[0]

    def fiber_params(self, x):
        """(a, e1, e2) at world points x (N, >=dim)."""
        y = self.d(x)
        return y[..., 0], y[..., 1], y[..., 2]

    def tensors(self, x, v1, v2) -> np.ndarray:
        a, e1, e2 = self.fiber_params(x)
        return assemble_tensor(a, e1, e2, v1, v2)

    def fibers(self, x, v1, v2):
        return fiber_direction(self.tensors(x, v1, v2), v1)

    def times(self, x, m: int | None = None) -> np.ndarray:
        """Predicted arrival times in raw units, (M, N) or (N,) for map m."""
        x = np.asarray(x, float)
        if m is not None:
            return self.phi.member(m)(x)[:, 0] * self.t_max
        xn = self.phi.normalize(x)
        xs = np.broadcast_to(xn, (self.n_maps,) + xn.shape)
        return forward(self.phi.spec, self.phi.params, xs)[..., 0] * self.t_max


class _Flat:
    """Flat parameter vector with array views for the two networks."""

    def __init__(self, phi: MlpParams, d: MlpParams):
        self.shapes = [a.shape for a in phi.arrays()] + [a.shape for a in d.arrays()]
        self.n_phi = len(phi.arrays())
        self.vec = np.concatenate([phi.flat(), d.flat()])

    def views(self, vec=None):
        vec = self.vec if vec is None else vec
        arrs, k = [], 0
        for sh in self.shapes:
            n = int(np.prod(sh))
            arrs.append(vec[k:k + n].reshape(sh))
            k += n
        p, d = arrs[:self.n_phi], arrs[self.n_phi:]
        return MlpParams(p[0::2], p[1::2]), MlpParams(d[0::2], d[1::2])

    def flatten_grads(self, gp: MlpParams, gd: MlpParams) -> np.ndarray:
        return np.concatenate([gp.flat(), gd.flat()])


def _full_batch(ds: Dataset, center, scale, colloc_idx=None) -> Batch:
    M = ds.n_maps
    nmax = max(len(t) for t in ds.times)
    x = np.zeros((M, nmax, ds.dim))
    phi = np.zeros((M, nmax))
    w = np.zeros((M, nmax))
    for m in range(M):
        n = len(ds.times[m])
        x[m, :n] = (ds.positions[m] - center) / scale
        phi[m, :n] = ds.times[m]
        w[m, :n] = 1.0 / (M * n)
    ci = slice(None) if colloc_idx is None else colloc_idx
    return Batch(x, phi, w, (ds.colloc[ci] - center) / scale, ds.v1[ci], ds.v2[ci])


def evaluate_loss(model: TrainedModel, ds: Dataset, cfg: TrainingConfig | None = None) -> LossResult:
    """Loss on the whole dataset (all data, all collocation points)."""
    cfg = cfg or model.config
    b = _full_batch(ds, model.phi.center, model.phi.scale)
    return compute_loss(model.phi.params, model.d.params, b, cfg, ds.t_max, model.phi.scale)


def init_model(cfg: TrainingConfig, ds: Dataset) -> TrainedModel:
    center, scale = ds.normalization()
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**63 - 1, size=2)
    phi_spec = activation_map_spec(ds.dim, cfg.phi_hidden)
    d_spec = fiber_params_spec(ds.dim, cfg.d_hidden, cfg.cap)
    phi = NeuralField(phi_spec, init_params(phi_spec, seeds[0], stack=ds.n_maps), center, scale)
    d = NeuralField(d_spec, init_params(d_spec, seeds[1]), center, scale)
    return TrainedModel(phi, d, ds.t_max, cfg)


def train(cfg: TrainingConfig, ds: Dataset, callback=None) -> TrainedModel:
    """Adam with mini-batches of ``batch_size`` points per map plus
    ``batch_size`` collocation points per iteration.

    The returned history has one row per ``log_every`` iterations with the
    full-dataset loss terms.  On a non-finite loss the run stops and returns
    the last finite parameters with ``diverged=True``.
    """
    model = init_model(cfg, ds)
    center, scale = model.phi.center, model.phi.scale
    flat = _Flat(model.phi.params, model.d.params)
    state = AdamState.zeros(flat.vec.size)
    rng = np.random.default_rng([cfg.seed, 1])
    data_samplers = [_EpochSampler(len(t), cfg.batch_size, rng) for t in ds.times]
    colloc_sampler = _EpochSampler(len(ds.colloc), cfg.batch_size, rng)

    M = ds.n_maps
    xs_all = [(p - center) / scale for p in ds.positions]
    yc_all = (ds.colloc - center) / scale
    bd = max(s.batch for s in data_samplers)
    full = _full_batch(ds, center, scale)

    def log_row(it):
        p, d = flat.views()
        res = compute_loss(p, d, full, cfg, ds.t_max, scale)
        row = {"iteration": it, **{k: res.terms[k] for k in TERMS}, "total": res.total}
        model.history.append(row)
        if callback:
            callback(row)
        return row

    last_good = flat.vec.copy()
    for it in range(cfg.iterations):
        if it % cfg.log_every == 0:
            try:
                log_row(it)
            except NonFiniteLossError as exc:
                log.warning("divergence at iteration %d (%s)", it, exc.term)
                flat.vec = last_good
                model.diverged = True
                break
        x = np.zeros((M, bd, ds.dim))
        phi = np.zeros((M, bd))
        w = np.zeros((M, bd))
        for m, smp in enumerate(data_samplers):
            idx = smp.next()
            x[m, :len(idx)] = xs_all[m][idx]
            phi[m, :len(idx)] = ds.times[m][idx]
            w[m, :len(idx)] = 1.0 / (M * len(idx))
        ci = colloc_sampler.next()
        batch = Batch(x, phi, w, yc_all[ci], ds.v1[ci], ds.v2[ci])
        p, d = flat.views()
        try:
            res = compute_loss(p, d, batch, cfg, ds.t_max, scale, grad=True)
            g = flat.flatten_grads(res.grad_phi, res.grad_d)
            if not np.isfinite(g).all():
                raise NonFiniteLossError("gradient")
        except NonFiniteLossError as exc:
            log.warning("divergence at iteration %d (%s)", it, exc.term)
            flat.vec = last_good
            model.diverged = True
            break
        last_good = flat.vec
        flat.vec, state = adam_step(flat.vec, g, state, cfg.learning_rate)

    p, d = flat.views(flat.vec.copy())
    model.phi.params, model.d.params = p, d
    if not model.diverged:
        try:
            log_row(cfg.iterations)
        except NonFiniteLossError:
            model.diverged = True
    return model


# -- persistence ---------------------------------------------------------------

HISTORY_COLUMNS = ("iteration", "data", "eiko", "cv", "ang", "total")


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def save_model(path, model: TrainedModel) -> None:
    meta = {"t_max": model.t_max, "diverged": model.diverged,
            "training": model.config.to_dict()}
    save_fields(path, {"phi": model.phi, "d": model.d}, meta)


def load_model(path) -> TrainedModel:
    fields, meta = load_fields(path)
    missing = {"phi", "d"} - set(fields)
    if missing:
        raise InvalidArgument(f"{path}: model lacks fields {sorted(missing)}")
    cfg = TrainingConfig(**meta["training"])
    return TrainedModel(fields["phi"], fields["d"], float(meta["t_max"]), cfg,
                        diverged=bool(meta.get("diverged", False)))
