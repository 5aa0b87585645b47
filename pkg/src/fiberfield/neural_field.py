"""Small dense tanh networks with exact input and parameter derivatives.

The forward pass carries the input Jacobian of every layer alongside the
activations (forward mode over the <= 3 input dimensions).  The backward pass
then differentiates both the outputs and their input Jacobians with respect
to the weights, so losses built from spatial gradients of the network, such
as an eikonal residual, get exact parameter gradients including the
second-order paths.

Every function accepts either a single network (weights ``(out, in)``) or a
stack of K same-shaped networks (weights ``(K, out, in)``, inputs
``(K, B, d)``), which is how the per-map activation networks are evaluated
together.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .conductivity import DEFAULT_SPEED2_CAP
from .errors import InvalidArgument

HEADS = ("identity", "sigmoid", "tanh", "scaled_sigmoid")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    heads: tuple[str, ...]
    cap: float = DEFAULT_SPEED2_CAP
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise InvalidArgument("layer sizes must be >= 1")
        if not self.heads:
            raise InvalidArgument("at least one output head is required")
        for h in self.heads:
            if h not in HEADS:
                raise InvalidArgument(f"unknown head {h!r}")
        if self.activation != "tanh":
            raise InvalidArgument("only tanh hidden activations are supported")
        if self.cap <= 0:
            raise InvalidArgument("cap must be positive")

    @property
    def output_dim(self) -> int:
        return len(self.heads)

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "heads": list(self.heads), "cap": self.cap,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(d["input_dim"], tuple(d["hidden"]), tuple(d["heads"]),
                   d.get("cap", DEFAULT_SPEED2_CAP), d.get("activation", "tanh"))


def activation_map_spec(input_dim: int, hidden) -> MlpSpec:
    return MlpSpec(input_dim, tuple(hidden), ("sigmoid",))


def fiber_params_spec(input_dim: int, hidden, cap: float = DEFAULT_SPEED2_CAP) -> MlpSpec:
    """Outputs (a, e1, e2)."""
    return MlpSpec(input_dim, tuple(hidden), ("tanh", "scaled_sigmoid", "scaled_sigmoid"), cap)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v: np.ndarray) -> "MlpParams":
        arrs, k = [], 0
        for a in self.arrays():
            arrs.append(np.asarray(v[k:k + a.size], float).reshape(a.shape))
            k += a.size
        return MlpParams(arrs[0::2], arrs[1::2])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_params(spec: MlpSpec, seed=None, stack: int | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases; ``stack`` draws K networks."""
    rng = np.random.default_rng(seed)
    lead = () if stack is None else (int(stack),)
    W, b = [], []
    s = spec.sizes
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W.append(rng.uniform(-lim, lim, size=lead + (fan_out, fan_in)))
        b.append(np.zeros(lead + (fan_out,)))
    return MlpParams(W, b)


# -- output heads: value, first and second derivative w.r.t. pre-activation --

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def head_derivatives(spec: MlpSpec, z: np.ndarray):
    """Return (y, dy/dz, d2y/dz2) with the head of channel k applied to
    ``z[..., k]``."""
    y = np.empty_like(z)
    d1 = np.empty_like(z)
    d2 = np.empty_like(z)
    for k, h in enumerate(spec.heads):
        u = z[..., k]
        if h == "identity":
            y[..., k], d1[..., k], d2[..., k] = u, 1.0, 0.0
        elif h == "tanh":
            t = np.tanh(u)
            y[..., k], d1[..., k], d2[..., k] = t, 1 - t * t, -2 * t * (1 - t * t)
        else:
            s = _sigmoid(u)
            c = spec.cap if h == "scaled_sigmoid" else 1.0
            ds = s * (1 - s)
            y[..., k], d1[..., k], d2[..., k] = c * s, c * ds, c * ds * (1 - 2 * s)
    return y, d1, d2


# -- core passes ---------------------------------------------------------------

@dataclass
class Tape:
    inputs: np.ndarray
    hidden: list = field(default_factory=list)  # post-activation h_l
    hidden_jac: list = field(default_factory=list)  # d h_l / dx
    pre_jac: list = field(default_factory=list)  # d z_l / dx (hidden layers)
    jacobian: bool = True


def _t(W):
    return np.swapaxes(W, -1, -2)


def forward_raw(params: MlpParams, x: np.ndarray, jacobian: bool = True):
    """Pre-head outputs ``z`` (..., B, out), their input Jacobian
    ``Jz`` (..., B, d, out) (or None) and the tape for :func:`backward_raw`."""
    x = np.asarray(x, float)
    tape = Tape(x, jacobian=jacobian)
    h, J = x, None
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ _t(W) + b[..., None, :]
        if jacobian:
            if J is None:
                Jz = np.broadcast_to(_t(W)[..., None, :, :],
                                     z.shape[:-1] + (x.shape[-1], z.shape[-1]))
            else:
                Jz = J @ _t(W)[..., None, :, :]
        else:
            Jz = None
        if l == L - 1:
            return z, Jz, tape
        h = np.tanh(z)
        tape.hidden.append(h)
        if jacobian:
            dh = 1.0 - h * h
            J = dh[..., None, :] * Jz
            tape.pre_jac.append(Jz)
            tape.hidden_jac.append(J)


def backward_raw(params: MlpParams, tape: Tape, gz: np.ndarray,
                 gJ: np.ndarray | None = None) -> MlpParams:
    """Parameter gradient of a scalar given its derivatives with respect to
    the raw outputs (``gz``) and their input Jacobian (``gJ``)."""
    if gJ is not None and not tape.jacobian:
        raise InvalidArgument("tape was recorded without Jacobians")
    L = len(params.weights)
    gW: list = [None] * L
    gb: list = [None] * L
    for l in range(L - 1, -1, -1):
        W = params.weights[l]
        h_prev = tape.inputs if l == 0 else tape.hidden[l - 1]
        gWl = _t(gz) @ h_prev
        if gJ is not None:
            if l == 0:
                gWl = gWl + _t(gJ.sum(axis=-3))
            else:
                Jp = tape.hidden_jac[l - 1]
                sh = gJ.shape
                gWl = gWl + _t(gJ.reshape(sh[:-3] + (-1, sh[-1]))) @ Jp.reshape(
                    Jp.shape[:-3] + (-1, Jp.shape[-1]))
        gW[l] = gWl
        gb[l] = gz.sum(axis=-2)
        if l == 0:
            break
        gh = gz @ W
        h = tape.hidden[l - 1]
        dh = 1.0 - h * h
        if gJ is not None:
            gJh = gJ @ W[..., None, :, :]
            d2h = -2.0 * h * dh
            gz = gh * dh + (gJh * tape.pre_jac[l - 1]).sum(axis=-2) * d2h
            gJ = gJh * dh[..., None, :]
        else:
            gz = gh * dh
    return MlpParams(gW, gb)


# -- public API ----------------------------------------------------------------

def _check_input(spec: MlpSpec, x):
    x = np.asarray(x, float)
    if x.shape[-1] != spec.input_dim:
        raise InvalidArgument(f"input has dimension {x.shape[-1]}, expected {spec.input_dim}")
    if not np.isfinite(x).all():
        raise InvalidArgument("non-finite network input")
    return x


def forward(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    """Head-activated outputs (..., B, out)."""
    x = _check_input(spec, x)
    z, _, _ = forward_raw(params, x, jacobian=False)
    return head_derivatives(spec, z)[0]


def input_gradient(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    """Jacobian d(outputs)/dx with shape (..., B, out, d)."""
    x = _check_input(spec, x)
    z, Jz, _ = forward_raw(params, x, jacobian=True)
    _, d1, _ = head_derivatives(spec, z)
    return np.swapaxes(d1[..., None, :] * Jz, -1, -2)


def value_and_grad(spec: MlpSpec, params: MlpParams, x, loss_fn):
    """Evaluate a scalar built from outputs and their input Jacobian.

    ``loss_fn(y, jac)`` receives head outputs ``y`` (..., B, out) and
    ``jac`` (..., B, d, out) and must return ``(loss, dL/dy, dL/djac)``.
    Returns ``(loss, parameter gradient)``.
    """
    x = _check_input(spec, x)
    z, Jz, tape = forward_raw(params, x, jacobian=True)
    y, d1, d2 = head_derivatives(spec, z)
    jac = d1[..., None, :] * Jz
    loss, gy, gjac = loss_fn(y, jac)
    gz = gy * d1 + (gjac * Jz).sum(axis=-2) * d2
    gJz = gjac * d1[..., None, :]
    return loss, backward_raw(params, tape, gz, gJz)


# -- fields in world coordinates ----------------------------------------------

@dataclass
class NeuralField:
    """A network plus the input standardization ``(x - center) / scale``."""

    spec: MlpSpec
    params: MlpParams
    center: np.ndarray
    scale: float

    def normalize(self, x):
        x = np.asarray(x, float)[..., :self.spec.input_dim]
        return (x - self.center) / self.scale

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, self.normalize(x))

    def gradient(self, x) -> np.ndarray:
        """(..., B, out, d) Jacobian with respect to world coordinates."""
        return input_gradient(self.spec, self.params, self.normalize(x)) / self.scale

    def member(self, k: int) -> "NeuralField":
        """k-th network of a stacked field."""
        return NeuralField(self.spec, MlpParams([w[k] for w in self.params.weights],
                                                [b[k] for b in self.params.biases]),
                           self.center, self.scale)


def save_fields(path, fields: dict[str, NeuralField], meta: dict | None = None) -> None:
    """Write named fields to a single ``.npz`` container with a JSON header."""
    header = {"format": "fiberfield-model", "version": FORMAT_VERSION,
              "meta": meta or {}, "fields": {}}
    arrays = {}
    for name, f in fields.items():
        header["fields"][name] = {"spec": f.spec.to_dict(),
                                  "center": np.asarray(f.center).tolist(),
                                  "scale": float(f.scale),
                                  "n_layers": len(f.params.weights)}
        for l, (w, b) in enumerate(zip(f.params.weights, f.params.biases)):
            arrays[f"{name}/W{l}"] = w
            arrays[f"{name}/b{l}"] = b
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_fields(path) -> tuple[dict[str, NeuralField], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "fiberfield-model":
            raise InvalidArgument(f"{path} is not a model container")
        if header["version"] > FORMAT_VERSION:
            raise InvalidArgument(f"model format version {header['version']} is newer "
                                  f"than supported ({FORMAT_VERSION})")
        fields = {}
        for name, h in header["fields"].items():
            n = h["n_layers"]
            params = MlpParams([z[f"{name}/W{l}"] for l in range(n)],
                               [z[f"{name}/b{l}"] for l in range(n)])
            fields[name] = NeuralField(MlpSpec.from_dict(h["spec"]), params,
                                       np.asarray(h["center"], float), h["scale"])
    return fields, header["meta"]
