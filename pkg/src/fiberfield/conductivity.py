"""Conduction-velocity tensor from (a, e1, e2).

``a`` is the cosine of the fiber angle against ``v1`` of the local frame,
``e1``/``e2`` are the squared longitudinal/transverse speeds.  All functions
broadcast over leading axes and work with 2-D or 3-D frame vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

# Speed-squared cap C of the e1/e2 heads: (1.5 m/s)^2.  Not fixed by the
# method itself; any value above the largest expected e1 works.
DEFAULT_SPEED2_CAP = 2.25


@dataclass(frozen=True)
class FiberParams:
    a: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    cap: float = DEFAULT_SPEED2_CAP

    def __post_init__(self):
        a, e1, e2 = (np.asarray(x, float) for x in (self.a, self.e1, self.e2))
        if (np.abs(a) > 1).any():
            raise InvalidArgument("a must lie in [-1, 1]")
        for name, e in (("e1", e1), ("e2", e2)):
            if not ((e > 0) & (e <= self.cap)).all():
                raise InvalidArgument(f"{name} must lie in (0, {self.cap}]")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)

    @classmethod
    def from_speeds(cls, a, v_l, v_t, cap: float = DEFAULT_SPEED2_CAP):
        return cls(a, np.square(v_l), np.square(v_t), cap)


def fiber_and_transverse(a, v1, v2):
    """``l = a v1 + sqrt(1-a^2) v2`` and ``t = -sqrt(1-a^2) v1 + a v2``."""
    a = np.asarray(a, float)[..., None]
    s = np.sqrt(np.clip(1.0 - a * a, 0.0, None))
    v1, v2 = np.asarray(v1, float), np.asarray(v2, float)
    return a * v1 + s * v2, -s * v1 + a * v2


def assemble_tensor(a, e1, e2, v1, v2) -> np.ndarray:
    """``D = e1 l (x) l + e2 t (x) t``."""
    l, t = fiber_and_transverse(a, v1, v2)
    e1 = np.asarray(e1, float)[..., None, None]
    e2 = np.asarray(e2, float)[..., None, None]
    return e1 * l[..., :, None] * l[..., None, :] + e2 * t[..., :, None] * t[..., None, :]


def assemble_from_params(d: FiberParams, v1, v2) -> np.ndarray:
    return assemble_tensor(d.a, d.e1, d.e2, v1, v2)


def conduction_velocity(D, p):
    """Speed ``sqrt(D p . p)`` along unit direction ``p``."""
    q = np.einsum("...i,...ij,...j->...", p, D, p)
    return np.sqrt(np.maximum(q, 0.0))


def fiber_direction(D, v1=None, tol: float = 1e-12):
    """Principal eigenvector of ``D`` as an unsigned line.

    Returns ``(f, degenerate)``.  ``f`` is oriented to have a nonnegative
    dot product with ``v1`` when given; ``degenerate`` marks tensors whose two
    largest eigenvalues agree within ``tol`` (any direction is a fiber).
    """
    D = np.asarray(D, float)
    w, V = np.linalg.eigh(D)
    f = V[..., :, -1]
    degenerate = (w[..., -1] - w[..., -2]) <= tol
    if v1 is not None:
        sign = np.where(np.einsum("...i,...i->...", f, v1) < 0, -1.0, 1.0)
        f = f * sign[..., None]
    return f, degenerate


def params_from_tensor(D, v1, v2):
    """Inverse of :func:`assemble_tensor` for tangential tensors: returns
    ``(a, e1, e2)`` with ``a`` chosen so that ``sqrt(1-a^2) >= 0``."""
    D = np.asarray(D, float)
    w, V = np.linalg.eigh(D)
    f = V[..., :, -1]
    c1 = np.einsum("...i,...i->...", f, v1)
    c2 = np.einsum("...i,...i->...", f, v2)
    flip = c2 < 0
    c1 = np.where(flip, -c1, c1)
    c2 = np.abs(c2)
    nrm = np.hypot(c1, c2)
    a = np.clip(c1 / nrm, -1.0, 1.0)
    e1 = w[..., -1]
    t = fiber_and_transverse(a, v1, v2)[1]
    e2 = np.einsum("...i,...ij,...j->...", t, D, t)
    return a, e1, e2
