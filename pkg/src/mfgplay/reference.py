"""Reference equilibrium by Picard iteration on the decoupled forward-backward system.

The forward component is an Ornstein-Uhlenbeck process driven by the common
noise alone. The backward component is the conditional expectation, under
the tilted measure, of the discounted terminal coupling; each conditional
expectation is a weighted Hermite regression on the forward state.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator

from mfgplay.hermite import FeatureStandardizer, MultiIndexSet, hermite_features, weighted_least_squares
from mfgplay.model import LQModel, make_coupling
from mfgplay.noise import (
    CacheCorruptionError,
    GirsanovWeights,
    NoiseBank,
    TimeGrid,
    _atomic_write,
    girsanov_weights,
    sample_noise_bank,
)
from mfgplay.policy import ControlProblem, FeedbackPolicy, empirical_cost, rollout
from mfgplay.riccati import RiccatiTable, continuous_riccati, discrete_riccati

REFERENCE_MAGIC = 0x46455246_474E4643
REFERENCE_VERSION = 1
_HEADER = struct.Struct("<7q")


class PicardConvergenceWarning(RuntimeWarning):
    pass


def simulate_ou_forward(eta: RiccatiTable, bank: NoiseBank, grid: TimeGrid, eps: float, x0=None) -> np.ndarray:
    """Euler paths ``m_{k+1} = m_k - tau eta_k m_k + eps sqrt(tau) dw_{k+1}``; shape ``(N, p + 1, d)``."""
    if bank.p != grid.p or eta.grid.p != grid.p:
        raise ValueError("grid, bank and Riccati table disagree on p")
    N, p, d = bank.N, grid.p, bank.d
    tau = grid.step
    m = np.empty((N, p + 1, d))
    m[:, 0] = 0.0 if x0 is None else x0
    noise = (eps * np.sqrt(tau)) * bank.common
    for k in range(p):
        m[:, k + 1] = m[:, k] - tau * np.einsum("de,je->jd", eta.eta[k], m[:, k]) + noise[:, k]
    return m


def discount_factors(eta: RiccatiTable) -> np.ndarray:
    """``exp(-tau sum_{s>=k} eta_s)`` for ``k = 0..p``, shape ``(p + 1, d, d)``.

    Uses the left-endpoint sum; non-commuting matrix gains are chained as an
    ordered product of one-step exponentials.
    """
    p, d, tau = eta.grid.p, eta.d, eta.grid.step
    out = np.empty((p + 1, d, d))
    out[p] = np.eye(d)
    s = eta.scalar_gain()
    if s is not None:
        tail = np.concatenate([np.cumsum(s[:p][::-1])[::-1], [0.0]])
        return np.exp(-tau * tail)[:, None, None] * np.eye(d)
    for k in range(p - 1, -1, -1):
        out[k] = linalg.expm(-tau * eta.eta[k]) @ out[k + 1]
    return out


@dataclass
class PicardResult:
    h: np.ndarray
    coef: np.ndarray
    standardizers: list = field(repr=False)


def picard_step(
    h_prev: np.ndarray,
    m_field: np.ndarray,
    eta: RiccatiTable,
    bank: NoiseBank,
    grid: TimeGrid,
    D: int,
    model: LQModel,
    clamp: float = 1.0,
    standardize: str = "diag",
) -> PicardResult:
    """One Picard update of the intercept.

    At each node ``k >= 1`` the discounted terminal coupling is regressed on
    Hermite features of the standardized forward state with the tail
    Girsanov weights of ``h_prev``; node 0 keeps the weighted mean only.
    Fitted values are clipped to ``[-clamp, clamp]``.
    """
    N, p, d = bank.N, grid.p, bank.d
    if h_prev.shape != (N, p, d) or m_field.shape != (N, p + 1, d):
        raise ValueError("fields do not match the bank")
    if model.epsilon > 0:
        weights = girsanov_weights(h_prev, bank.common, model.epsilon, grid)
    else:
        weights = GirsanovWeights.ones(N, p)
    index_set = MultiIndexSet(d, D)
    disc = discount_factors(eta)
    terminal = model.terminal(m_field[:, p])
    h = np.empty((N, p, d))
    coef = np.zeros((p, index_set.L, d))
    standardizers = []
    for k in range(p):
        X = m_field[:, k] if N > 1 else np.concatenate([m_field[:, k]] * 2)
        st = FeatureStandardizer(mode=standardize).fit(X)
        standardizers.append(st)
        target = terminal @ disc[k].T
        w = weights.tail[:, k]
        Phi = hermite_features(st.transform(m_field[:, k]), index_set)
        if k == 0:
            # deterministic start: only the constant mode carries information
            mean = np.einsum("j,jd->d", w, target) / np.sum(w)
            coef[0, 0] = mean / Phi[0, 0]
        else:
            coef[k] = weighted_least_squares(Phi, target, w).reshape(-1, d)
        h[:, k] = np.clip(np.einsum("jl,ld->jd", Phi, coef[k]), -clamp, clamp)
    return PicardResult(h=h, coef=coef, standardizers=standardizers)


@dataclass
class ReferenceSolution:
    """Regression-represented reference equilibrium on one noise bank."""

    m_field: np.ndarray
    h_field: np.ndarray
    coef: np.ndarray
    standardizers: list = field(repr=False)
    eta: RiccatiTable = field(repr=False)
    clamp: float = 1.0
    D: int = 4
    residuals: tuple = ()
    equilibrium_cost: float = float("nan")
    bank_fingerprint: str = ""
    fingerprint: str = ""

    @property
    def index_set(self) -> MultiIndexSet:
        return MultiIndexSet(self.m_field.shape[2], self.D)

    def intercept(self, m_field: np.ndarray) -> np.ndarray:
        """Apply the stored per-node regressions (with clipping) to forward paths."""
        p = self.coef.shape[0]
        out = np.empty((m_field.shape[0], p, m_field.shape[2]))
        for k, st in enumerate(self.standardizers):
            Phi = hermite_features(st.transform(m_field[:, k]), self.index_set)
            out[:, k] = np.clip(np.einsum("jl,ld->jd", Phi, self.coef[k]), -self.clamp, self.clamp)
        return out


def _l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))


def solve_reference(
    model: LQModel,
    bank: NoiseBank,
    grid: TimeGrid,
    D: int = 4,
    picard_iters: int = 10,
    clamp: float = 1.0,
    riccati: str = "continuous",
    standardize: str = "diag",
    tol: float = 1e-2,
    with_cost: bool = True,
) -> ReferenceSolution:
    """Run ``picard_iters`` Picard steps from ``h = 0`` and store the result.

    Warns with :class:`PicardConvergenceWarning` if the last two iterates
    differ by more than ``tol`` in the (j, k)-averaged L2 sense.
    """
    if riccati == "continuous":
        eta = continuous_riccati(model.Q, model.R, grid)
    elif riccati == "discrete":
        eta = discrete_riccati(model.Q, model.R, grid)
    else:
        raise ValueError(f"unknown Riccati kind {riccati!r}")
    m = simulate_ou_forward(eta, bank, grid, model.epsilon, model.x0)
    h = np.zeros((bank.N, grid.p, model.d))
    residuals = []
    result = None
    for _ in range(picard_iters):
        result = picard_step(h, m, eta, bank, grid, D, model, clamp, standardize)
        residuals.append(_l2(result.h, h))
        h = result.h
    if result is None:
        result = PicardResult(h=h, coef=np.zeros((grid.p, MultiIndexSet(model.d, D).L, model.d)), standardizers=[
            FeatureStandardizer(mode=standardize).fit(np.concatenate([m[:, k]] * 2)) for k in range(grid.p)
        ])
    if residuals and residuals[-1] > tol:
        warnings.warn(
            f"Picard iterates still differ by {residuals[-1]:.3g} > {tol:g}", PicardConvergenceWarning, stacklevel=2
        )
    sol = ReferenceSolution(
        m_field=m,
        h_field=h,
        coef=result.coef,
        standardizers=result.standardizers,
        eta=eta,
        clamp=clamp,
        D=D,
        residuals=tuple(residuals),
        bank_fingerprint=bank.fingerprint,
    )
    if with_cost:
        sol.equilibrium_cost = reference_cost(sol, bank, grid, model)
    return sol


def reference_cost(solution: ReferenceSolution, bank: NoiseBank, grid: TimeGrid, model: LQModel) -> float:
    """Estimated equilibrium cost of the feedback ``-(eta x + h)`` under the tilted measure.

    The feedback is simulated with the same Euler scheme, exploration noise
    and Girsanov weights as a learned policy, and the renormalized cost is
    returned, so that the estimate shares its random numbers with the
    learned cost series it is compared to.
    """
    p, d = grid.p, model.d
    problem = ControlProblem(model, grid, bank, env=solution.m_field, tilt=solution.h_field, D=0)
    s = solution.eta.scalar_gain()
    gain = -s[:-1] if s is not None else -solution.eta.eta[:-1]
    policy = FeedbackPolicy(gain, np.zeros((p, 1, d)), problem.standardizers, problem.index_set)
    batch = rollout(policy, problem, intercept=-solution.h_field)
    return empirical_cost(batch, problem)[1]


def config_fingerprint(**items) -> str:
    text = ";".join(f"{k}={items[k]!r}" for k in sorted(items))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_reference(sol: ReferenceSolution, path, seed: int, M: int) -> None:
    N, P1, d = sol.m_field.shape
    p = P1 - 1
    header = _HEADER.pack(REFERENCE_MAGIC, REFERENCE_VERSION, seed, M, N, p, d)
    fp = sol.fingerprint.encode().ljust(32, b"\0")[:32]
    meta = struct.pack("<2q2d", sol.D, len(sol.residuals), sol.clamp, sol.equilibrium_cost)
    L = sol.coef.shape[1]
    means = np.array([s.mean_ for s in sol.standardizers]).reshape(p, d)
    scales = np.array([s.scale_ for s in sol.standardizers]).reshape(p, d)
    arrays = [sol.m_field, sol.h_field, sol.coef.reshape(p, L, d), means, scales, np.asarray(sol.residuals)]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    _atomic_write(Path(path), header + fp + meta + body)


def load_reference(
    path, fingerprint: str, seed: int, M: int, N: int, p: int, d: int, eta: RiccatiTable, bank_fingerprint: str = ""
):
    """Read a cached reference, raising :class:`CacheCorruptionError` on any mismatch."""
    raw = Path(path).read_bytes()
    off = _HEADER.size + 32 + 32
    if len(raw) < off:
        raise CacheCorruptionError(f"{path}: truncated header")
    magic, version, *key = _HEADER.unpack_from(raw)
    if magic != REFERENCE_MAGIC or version != REFERENCE_VERSION or tuple(key) != (seed, M, N, p, d):
        raise CacheCorruptionError(f"{path}: header does not match request")
    fp = raw[_HEADER.size : _HEADER.size + 32].rstrip(b"\0").decode(errors="replace")
    if fp != fingerprint:
        raise CacheCorruptionError(f"{path}: stale fingerprint")
    D, n_res, clamp, cost = struct.unpack_from("<2q2d", raw, _HEADER.size + 32)
    L = MultiIndexSet(d, D).L
    sizes = [N * (p + 1) * d, N * p * d, p * L * d, p * d, p * d, n_res]
    if len(raw) != off + 8 * sum(sizes):
        raise CacheCorruptionError(f"{path}: wrong payload size")
    data = np.frombuffer(raw, dtype="<f8", offset=off).astype(float)
    if not np.all(np.isfinite(data)):
        raise CacheCorruptionError(f"{path}: non-finite entries")
    parts = np.split(data, np.cumsum(sizes)[:-1])
    stds = []
    for k in range(p):
        st = FeatureStandardizer(mode="diag")
        st.mean_, st.scale_ = parts[3].reshape(p, d)[k].copy(), parts[4].reshape(p, d)[k].copy()
        st.n_features_in_, st.fallback_, st.chol_ = d, False, None
        stds.append(st)
    return ReferenceSolution(
        m_field=parts[0].reshape(N, p + 1, d),
        h_field=parts[1].reshape(N, p, d),
        coef=parts[2].reshape(p, L, d),
        standardizers=stds,
        eta=eta,
        clamp=clamp,
        D=D,
        residuals=tuple(parts[5]),
        equilibrium_cost=cost,
        bank_fingerprint=bank_fingerprint,
        fingerprint=fingerprint,
    )


class ReferenceSolver(BaseEstimator):
    """Estimator wrapper: ``fit(bank)`` solves the reference on a noise bank.

    Without a bank, one is sampled from ``seed`` with the configured sizes.
    """

    def __init__(
        self,
        d: int = 1,
        coupling: str = "cos_kappa",
        kappa: float = 1.0,
        epsilon: float = 1.0,
        sigma: float = 0.0,
        T: float = 1.0,
        p: int = 10,
        N: int = 1000,
        D: int = 4,
        picard_iters: int = 10,
        clamp: float = 1.0,
        riccati: str = "continuous",
        seed: int = 0,
    ):
        self.d = d
        self.coupling = coupling
        self.kappa = kappa
        self.epsilon = epsilon
        self.sigma = sigma
        self.T = T
        self.p = p
        self.N = N
        self.D = D
        self.picard_iters = picard_iters
        self.clamp = clamp
        self.riccati = riccati
        self.seed = seed

    def _model(self) -> LQModel:
        g = make_coupling(self.coupling, d=self.d, kappa=self.kappa)
        return LQModel(g=g, d=self.d, sigma=self.sigma, epsilon=self.epsilon, T=self.T)

    def fit(self, X=None, y=None):
        grid = TimeGrid(self.T, self.p)
        bank = X if isinstance(X, NoiseBank) else sample_noise_bank(self.seed, 1, self.N, self.p, self.d)
        self.bank_ = bank
        self.solution_ = solve_reference(
            self._model(), bank, grid, self.D, self.picard_iters, self.clamp, self.riccati
        )
        return self

    def predict(self, X):
        """Intercept of the stored regressions applied to forward paths ``X`` of shape ``(N, p + 1, d)``."""
        return self.solution_.intercept(np.asarray(X, dtype=float))
