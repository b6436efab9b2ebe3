"""Model data: terminal couplings and the linear-quadratic game description."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize


class Coupling:
    """Terminal coupling ``g`` acting on arrays of shape ``(..., d)``."""

    name = "coupling"
    d = 1
    bound = np.inf

    def __call__(self, x):
        raise NotImplementedError

    def primitive(self, x):
        """A primitive of ``g`` (only defined for ``d = 1``)."""
        raise NotImplementedError(f"{self.name} has no primitive")

    def scalar(self, x):
        """Evaluate a ``d = 1`` coupling on plain scalars or 1-d arrays."""
        x = np.asarray(x, dtype=float)
        return self(x[..., None])[..., 0]


class CosKappa(Coupling):
    """``cos(kappa x)`` in one dimension; ``(cos cos, sin sin)`` in two."""

    name = "cos_kappa"
    bound = 1.0

    def __init__(self, kappa: float, d: int = 1):
        if d not in (1, 2):
            raise ValueError("cos_kappa is defined for d = 1 or d = 2")
        self.kappa = float(kappa)
        self.d = d

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.kappa
        if self.d == 1:
            return np.cos(k * x)
        c, s = np.cos(k * x), np.sin(k * x)
        return np.stack([c[..., 0] * c[..., 1], s[..., 0] * s[..., 1]], axis=-1)

    def primitive(self, x):
        if self.d != 1:
            return super().primitive(x)
        x = np.asarray(x, dtype=float)
        if self.kappa == 0:
            return x
        return np.sin(self.kappa * x) / self.kappa


def shift_root(kappa: float) -> float:
    """Most negative solution of ``cos(kappa x) = 2 x``.

    Every solution lies in ``[-1/2, 1/2]``; for ``kappa = 10`` this is about -0.384.
    """
    f = lambda x: np.cos(kappa * x) - 2 * x  # noqa: E731
    xs = np.linspace(-0.5, 0.5, 20001)
    vals = f(xs)
    idx = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
    if idx.size == 0:
        raise ValueError(f"no root of cos({kappa} x) = 2x found")
    k = idx[0]
    if vals[k] == 0:
        return float(xs[k])
    return float(optimize.brentq(f, xs[k], xs[k + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))


class ShiftedCos(Coupling):
    """``cos(kappa (x - x0)) - 2 x0`` in one dimension, so that ``g(0) = 0`` when ``cos(kappa x0) = 2 x0``."""

    name = "cos_shifted"

    def __init__(self, kappa: float, x0: Optional[float] = None):
        self.kappa = float(kappa)
        self.x0 = shift_root(self.kappa) if x0 is None else float(x0)
        self.bound = 1.0 + 2 * abs(self.x0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.cos(self.kappa * (x - self.x0)) - 2 * self.x0

    def primitive(self, x):
        x = np.asarray(x, dtype=float)
        return np.sin(self.kappa * (x - self.x0)) / self.kappa - 2 * self.x0 * x


class Constant(Coupling):
    name = "constant"

    def __init__(self, gamma, d: int = 1):
        self.gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (d,)).copy()
        self.d = d
        self.bound = float(np.max(np.abs(self.gamma))) if d else 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.gamma, x.shape).copy()

    def primitive(self, x):
        return self.gamma[0] * np.asarray(x, dtype=float)


class Table(Coupling):
    """Piecewise-linear ``d = 1`` coupling through tabulated points, flat outside the table."""

    name = "table"

    def __init__(self, xs, gs):
        xs = np.asarray(xs, dtype=float)
        gs = np.asarray(gs, dtype=float)
        if xs.ndim != 1 or xs.shape != gs.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
            raise ValueError("table needs at least two points with strictly increasing abscissae")
        self.xs, self.gs = xs, gs
        self.bound = float(np.max(np.abs(gs)))
        seg = 0.5 * (gs[1:] + gs[:-1]) * np.diff(xs)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.gs)

    def primitive(self, x):
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.xs[0], self.xs[-1])
        k = np.clip(np.searchsorted(self.xs, xc, side="right") - 1, 0, self.xs.size - 2)
        dx = xc - self.xs[k]
        slope = (self.gs[k + 1] - self.gs[k]) / (self.xs[k + 1] - self.xs[k])
        inside = self._cum[k] + self.gs[k] * dx + 0.5 * slope * dx**2
        return inside + self.gs[0] * np.minimum(x - self.xs[0], 0) + self.gs[-1] * np.maximum(
            x - self.xs[-1], 0
        )


def make_coupling(kind: str, d: int = 1, kappa: float = 1.0, x0=None, gamma=0.0, table=None) -> Coupling:
    """Build a coupling from its selector name."""
    if kind == "cos_kappa":
        return CosKappa(kappa, d)
    if kind == "cos_shifted":
        if d != 1:
            raise ValueError("cos_shifted is one-dimensional")
        return ShiftedCos(kappa, x0)
    if kind == "constant":
        return Constant(gamma, d)
    if kind == "zero":
        return Constant(0.0, d)
    if kind == "table":
        if d != 1 or table is None:
            raise ValueError("a table coupling needs d = 1 and tabulated points")
        xs, gs = table
        return Table(xs, gs)
    raise ValueError(f"unknown coupling {kind!r}")


@dataclass
class LQModel:
    """State ``dX = alpha dt + sigma dB + eps dW`` with cost
    ``1/2 E[|R X_T + g(m_T)|^2 + int |Q X + f(m)|^2 + |alpha|^2]``."""

    g: Coupling
    d: int = 1
    sigma: float = 0.0
    epsilon: float = 1.0
    T: float = 1.0
    Q: np.ndarray = None
    R: np.ndarray = None
    x0: np.ndarray = None
    f: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        d = self.d
        self.Q = np.zeros((d, d)) if self.Q is None else np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.eye(d) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float))
        self.x0 = np.zeros(d) if self.x0 is None else np.broadcast_to(np.asarray(self.x0, float), (d,)).copy()
        if self.Q.shape != (d, d) or self.R.shape != (d, d):
            raise ValueError("Q and R must be d x d")
        if self.sigma < 0 or self.epsilon < 0:
            raise ValueError("noise intensities must be non-negative")

    def terminal(self, m):
        """``R^T g(m)``: the terminal value of the intercept."""
        return np.einsum("ba,...b->...a", self.R, self.g(m))

    def running(self, m):
        """``f(m)`` or zeros."""
        m = np.asarray(m, dtype=float)
        if self.f is None:
            return np.zeros_like(m)
        return np.asarray(self.f(m), dtype=float)
