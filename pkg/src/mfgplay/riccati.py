"""Continuous and sampled-data Riccati gains for the linear part of the feedback."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfgplay.noise import TimeGrid


class FiniteEscapeError(ArithmeticError):
    """The Riccati solution left the configured bound."""


@dataclass(frozen=True)
class RiccatiTable:
    """Gain matrices ``eta`` of shape ``(p + 1, d, d)`` on a grid."""

    eta: np.ndarray
    kind: str
    Q: np.ndarray
    R: np.ndarray
    grid: TimeGrid

    @property
    def d(self) -> int:
        return self.eta.shape[1]

    def scalar_gain(self):
        """Return ``(p + 1,)`` scalars if every gain is a multiple of the identity, else None."""
        diag = np.einsum("kii->ki", self.eta)
        s = diag[:, 0]
        off = self.eta - s[:, None, None] * np.eye(self.d)
        if np.all(off == 0):
            return s.copy()
        return None


def _as_matrix(A, d=None) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if d is not None and A.shape[0] != d:
        raise ValueError(f"expected a {d}x{d} matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("cost matrices must be finite")
    return A


def continuous_riccati(Q, R, grid: TimeGrid, substeps: int = 10, bound: float = 1e6) -> RiccatiTable:
    """Solve ``eta' = eta^2 - Q^T Q`` backward from ``eta(T) = R^T R``.

    The benchmark ``Q = 0, R = I, T = 1`` returns ``I / (2 - t)`` in closed
    form. Everything else uses classical RK4 with ``substeps`` steps per node.
    """
    R = _as_matrix(R)
    d = R.shape[0]
    Q = _as_matrix(Q, d)
    eye = np.eye(d)
    t = grid.nodes
    if np.all(Q == 0) and np.array_equal(R, eye) and grid.T == 1.0:
        eta = (1.0 / (2.0 - t))[:, None, None] * eye
        return RiccatiTable(eta=eta, kind="continuous", Q=Q, R=R, grid=grid)

    QtQ = Q.T @ Q

    # in reversed time s = T - t: d eta / ds = QtQ - eta^2
    def rhs(e):
        return QtQ - e @ e

    eta = np.empty((grid.p + 1, d, d))
    e = R.T @ R
    eta[grid.p] = e
    ds = grid.step / substeps
    for k in range(grid.p - 1, -1, -1):
        for _ in range(substeps):
            k1 = rhs(e)
            k2 = rhs(e + 0.5 * ds * k1)
            k3 = rhs(e + 0.5 * ds * k2)
            k4 = rhs(e + ds * k3)
            e = e + (ds / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(e)) or np.max(np.abs(e)) > bound:
                raise FiniteEscapeError(f"Riccati solution exceeded {bound:g} near t={t[k]:.6g}")
        eta[k] = 0.5 * (e + e.T)
    return RiccatiTable(eta=eta, kind="continuous", Q=Q, R=R, grid=grid)


def discrete_riccati(Q, R, grid: TimeGrid) -> RiccatiTable:
    """Sampled-data Riccati recursion for the time-discrete control problem.

    ``P`` runs backward from ``R^T R`` through
    ``P_l = P_{l+1} - tau [P_{l+1} (I + tau P_{l+1})^{-1} P_{l+1} - Q^T Q]``
    and the gain is ``eta_l = (I + tau P_{l+1})^{-1} P_{l+1}``.
    """
    R = _as_matrix(R)
    d = R.shape[0]
    Q = _as_matrix(Q, d)
    QtQ = Q.T @ Q
    tau = grid.step
    eye = np.eye(d)
    eta = np.empty((grid.p + 1, d, d))
    P = R.T @ R
    eta[grid.p] = P
    for ell in range(grid.p - 1, -1, -1):
        A = eye + tau * P
        # A is symmetric positive definite for P PSD
        assert np.linalg.cond(A) < 1e15, "singular I + tau P"
        gain = np.linalg.solve(A, P)
        gain = 0.5 * (gain + gain.T)
        eta[ell] = gain
        P = P - tau * (P @ gain - QtQ)
        P = 0.5 * (P + P.T)
    return RiccatiTable(eta=eta, kind="discrete", Q=Q, R=R, grid=grid)
