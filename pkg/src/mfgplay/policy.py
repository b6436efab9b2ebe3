"""Affine feedback policies: Euler rollout, empirical cost, adjoint gradient,
ADAM, and the exact best response of the discrete linear-quadratic problem."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from mfgplay.hermite import FeatureStandardizer, MultiIndexSet, hermite_features, weighted_least_squares
from mfgplay.model import LQModel
from mfgplay.noise import GirsanovWeights, NoiseBank, TimeGrid, girsanov_weights
from mfgplay.riccati import RiccatiTable

DIVERGENCE_BOUND = 1e6


class OptimizerDivergence(ArithmeticError):
    """The monitored cost left the admissible range."""


def fit_node_standardizers(env: np.ndarray, mode: str = "diag") -> list:
    """One standardizer per node ``k = 0..p-1`` fitted across realizations."""
    N, P1, d = env.shape
    out = []
    for k in range(P1 - 1):
        X = env[:, k]
        if N == 1:
            # a single realization has no spread; standardize around itself
            X = np.concatenate([X, X])
        out.append(FeatureStandardizer(mode=mode).fit(X))
    return out


def node_features(env: np.ndarray, standardizers: list, index_set: MultiIndexSet) -> np.ndarray:
    """Features of ``env`` at nodes ``0..p-1``; shape ``(N, p, L)``."""
    cols = [hermite_features(s.transform(env[:, k]), index_set) for k, s in enumerate(standardizers)]
    return np.stack(cols, axis=1)


@dataclass
class FeedbackPolicy:
    """``alpha_k = a_{k-1} x_{k-1} + C_{k-1}`` with ``C`` a Hermite expansion of the environment.

    ``a`` has shape ``(p,)`` (one gain shared by all coordinates) or
    ``(p, d, d)``; ``c`` has shape ``(p, L, d)``.
    """

    a: np.ndarray
    c: np.ndarray
    standardizers: list
    index_set: MultiIndexSet

    @classmethod
    def zeros(cls, p: int, d: int, index_set: MultiIndexSet, standardizers: list) -> "FeedbackPolicy":
        return cls(np.zeros(p), np.zeros((p, index_set.L, d)), standardizers, index_set)

    @property
    def p(self) -> int:
        return self.c.shape[0]

    def features(self, env) -> np.ndarray:
        return node_features(env, self.standardizers, self.index_set)

    def intercept(self, env, features=None) -> np.ndarray:
        """``C`` of shape ``(N, p, d)``."""
        Phi = self.features(env) if features is None else features
        return np.einsum("jkl,kld->jkd", Phi, self.c)

    def copy(self) -> "FeedbackPolicy":
        return replace(self, a=self.a.copy(), c=self.c.copy(), standardizers=list(self.standardizers))


@dataclass
class ControlProblem:
    """A best-response problem against a frozen environment.

    ``env`` is ``(N, p + 1, d)`` and ``tilt`` is ``(N, p, d)``: the intercept
    that shifts the common noise and defines the Girsanov weights. Policy
    standardizers are fitted from ``env`` once and kept frozen.
    """

    model: LQModel
    grid: TimeGrid
    bank: NoiseBank
    env: np.ndarray
    tilt: Optional[np.ndarray] = None
    D: int = 4
    standardize: str = "diag"
    standardizers: Optional[list] = None
    weights: GirsanovWeights = field(init=False, repr=False)

    def __post_init__(self):
        N, p, d = self.bank.N, self.grid.p, self.model.d
        if self.bank.p != p or self.bank.d != d:
            raise ValueError("bank does not match the grid or the dimension")
        self.env = np.asarray(self.env, dtype=float)
        if self.env.shape != (N, p + 1, d):
            raise ValueError(f"env has shape {self.env.shape}, expected {(N, p + 1, d)}")
        if self.tilt is None or self.model.epsilon == 0:
            self.tilt = np.zeros((N, p, d))
        self.tilt = np.asarray(self.tilt, dtype=float)
        if self.tilt.shape != (N, p, d):
            raise ValueError(f"tilt has shape {self.tilt.shape}, expected {(N, p, d)}")
        if self.model.epsilon > 0:
            self.weights = girsanov_weights(self.tilt, self.bank.common, self.model.epsilon, self.grid)
        else:
            self.weights = GirsanovWeights.ones(N, p)
        self.index_set = MultiIndexSet(d, self.D)
        if self.standardizers is None:
            self.standardizers = fit_node_standardizers(self.env, self.standardize)
        self.features = node_features(self.env, self.standardizers, self.index_set)
        self.terminal = self.model.g(self.env[:, p])
        self.running = self.model.running(self.env)
        self.has_running = bool(np.any(self.model.Q != 0) or self.model.f is not None)

    @property
    def n_particles(self) -> int:
        # with no idiosyncratic noise every particle of a realization coincides
        return self.bank.M if self.model.sigma > 0 else 1

    def policy_features(self, policy: FeedbackPolicy) -> np.ndarray:
        if policy.standardizers is self.standardizers and policy.index_set == self.index_set:
            return self.features
        return policy.features(self.env)

    def zero_policy(self) -> FeedbackPolicy:
        return FeedbackPolicy.zeros(self.grid.p, self.model.d, self.index_set, self.standardizers)


@dataclass
class RolloutBatch:
    """Euler paths: ``x`` is ``(M, N, p + 1, d)``, ``alpha`` is ``(M, N, p, d)``, ``path_cost`` is ``(M, N)``."""

    x: np.ndarray
    alpha: np.ndarray
    path_cost: np.ndarray

    def means(self) -> np.ndarray:
        """Per-realization averages over particles, ``(N, p + 1, d)``."""
        return self.x.mean(axis=0)


def _apply_gain(a_k, x):
    if np.ndim(a_k) == 0:
        return a_k * x
    return np.einsum("de,...e->...d", a_k, x)


def _apply_gain_transpose(a_k, y):
    if np.ndim(a_k) == 0:
        return a_k * y
    return np.einsum("ed,...e->...d", a_k, y)


def rollout(policy: FeedbackPolicy, problem: ControlProblem, intercept=None) -> RolloutBatch:
    """Simulate the feedback through the Euler scheme

    ``alpha_k = a_{k-1} x_{k-1} + C_{k-1} + h_{k-1} + eps sqrt(p/T) dw_k`` and
    ``x_k = x_{k-1} + (T/p) alpha_k + sigma sqrt(T/p) db_k``.

    ``intercept`` of shape ``(N, p, d)`` overrides the Hermite expansion ``C``.
    """
    model, grid, bank = problem.model, problem.grid, problem.bank
    p, tau = grid.p, grid.step
    M, N, d = problem.n_particles, bank.N, model.d
    if policy.p != p or policy.c.shape[2] != d:
        raise ValueError("policy does not match the problem")
    if intercept is None:
        C = policy.intercept(problem.env, problem.policy_features(policy))
    else:
        C = np.asarray(intercept, dtype=float)
    drive = C + problem.tilt
    if model.epsilon > 0:
        drive = drive + (model.epsilon / np.sqrt(tau)) * bank.common
    x = np.empty((M, N, p + 1, d))
    alpha = np.empty((M, N, p, d))
    x[:, :, 0] = model.x0
    for k in range(1, p + 1):
        alpha[:, :, k - 1] = _apply_gain(policy.a[k - 1], x[:, :, k - 1]) + drive[:, k - 1]
        x[:, :, k] = x[:, :, k - 1] + tau * alpha[:, :, k - 1]
        if model.sigma > 0:
            x[:, :, k] += (model.sigma * np.sqrt(tau)) * bank.idio[:M, :, k - 1]
    return RolloutBatch(x=x, alpha=alpha, path_cost=_path_cost(x, alpha, problem))


def _path_cost(x, alpha, problem: ControlProblem) -> np.ndarray:
    model, tau, p = problem.model, problem.grid.step, problem.grid.p
    term = np.einsum("de,mne->mnd", model.R, x[:, :, p]) + problem.terminal
    cost = 0.5 * tau * np.sum(alpha * alpha, axis=(2, 3)) + 0.5 * np.sum(term * term, axis=-1)
    if problem.has_running:
        run = np.einsum("de,mnke->mnkd", model.Q, x[:, :, :p]) + problem.running[:, :p]
        cost = cost + 0.5 * tau * np.sum(run * run, axis=(2, 3))
    return cost


def renormalization(model: LQModel, grid: TimeGrid) -> float:
    """Expected energy of the exploration noise, ``eps^2 d p / 2``."""
    return 0.5 * model.epsilon**2 * model.d * grid.p


def empirical_cost(batch: RolloutBatch, problem: ControlProblem) -> tuple:
    """Weighted average cost ``(raw, renormalized)``.

    ``raw = (1/(M N)) sum_{i,j} w_j cost_{ij}``; the renormalized value
    subtracts the parameter-free exploration energy.
    """
    raw = float(np.mean(problem.weights.full * batch.path_cost.mean(axis=0)))
    return raw, raw - renormalization(problem.model, problem.grid)


def weighted_path_costs(batch: RolloutBatch, problem: ControlProblem) -> np.ndarray:
    """Per-realization contributions ``w_j * mean_i cost_ij``; their mean is the raw cost."""
    return problem.weights.full * batch.path_cost.mean(axis=0)


def cost_gradient(policy: FeedbackPolicy, problem: ControlProblem, batch: RolloutBatch = None):
    """Exact gradient of the raw empirical cost by a backward adjoint sweep.

    Returns
    -------
    grad_a : array shaped like ``policy.a``
    grad_c : array shaped like ``policy.c``
    raw : float
        Raw cost at ``policy``.
    """
    if batch is None:
        batch = rollout(policy, problem)
    model, tau, p = problem.model, problem.grid.step, problem.grid.p
    M, N = batch.x.shape[:2]
    Phi = problem.policy_features(policy)
    W = (problem.weights.full / (M * N))[None, :, None]
    x, alpha = batch.x, batch.alpha
    term = np.einsum("de,mne->mnd", model.R, x[:, :, p]) + problem.terminal
    lam = W * np.einsum("ed,mne->mnd", model.R, term)
    grad_a = np.zeros_like(policy.a)
    grad_c = np.zeros_like(policy.c)
    for k in range(p, 0, -1):
        g_alpha = tau * (W * alpha[:, :, k - 1] + lam)
        x_prev = x[:, :, k - 1]
        if policy.a.ndim == 1:
            grad_a[k - 1] = np.sum(g_alpha * x_prev)
        else:
            grad_a[k - 1] = np.einsum("mnd,mne->de", g_alpha, x_prev)
        grad_c[k - 1] = np.einsum("jl,jd->ld", Phi[:, k - 1], g_alpha.sum(axis=0))
        lam = lam + _apply_gain_transpose(policy.a[k - 1], g_alpha)
        if problem.has_running:
            run = np.einsum("de,mne->mnd", model.Q, x_prev) + problem.running[:, k - 1]
            lam = lam + tau * W * np.einsum("ed,mne->mnd", model.Q, run)
    raw = float(np.mean(problem.weights.full * batch.path_cost.mean(axis=0)))
    return grad_a, grad_c, raw


@dataclass
class AdamState:
    """Moment accumulators for a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, theta: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), **hyper)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_optimize(
    policy0: FeedbackPolicy,
    problem: ControlProblem,
    epochs: int = 15,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    learn_gain: bool = True,
    objective: str = "raw",
    trace: Optional[list] = None,
) -> FeedbackPolicy:
    """Full-batch ADAM on the raw empirical cost.

    Each epoch is one gradient step over the whole bank. When ``trace``
    is a list, the monitored cost (``objective`` = raw or renormalized) of
    every iterate, including the returned one, is appended to it.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if objective not in ("raw", "renormalized"):
        raise ValueError(f"unknown objective {objective!r}")
    offset = renormalization(problem.model, problem.grid) if objective == "renormalized" else 0.0
    policy = policy0.copy()
    na = policy.a.size
    theta = np.concatenate([policy.a.ravel(), policy.c.ravel()])
    state = AdamState.like(theta, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def unpack(th):
        policy.a = th[:na].reshape(policy0.a.shape).copy()
        policy.c = th[na:].reshape(policy0.c.shape).copy()

    def monitor(raw):
        value = raw - offset
        if not np.isfinite(value) or value > DIVERGENCE_BOUND:
            raise OptimizerDivergence(f"cost {value:g} after {state.t} ADAM steps")
        if trace is not None:
            trace.append(value)

    for _ in range(epochs):
        ga, gc, raw = cost_gradient(policy, problem)
        monitor(raw)
        if not learn_gain:
            ga = np.zeros_like(ga)
        theta = state.step(theta, np.concatenate([ga.ravel(), gc.ravel()]))
        unpack(theta)
    if trace is not None:
        batch = rollout(policy, problem)
        monitor(empirical_cost(batch, problem)[0])
    return policy


def riccati_gain(eta: RiccatiTable) -> np.ndarray:
    """Feedback gains ``-eta_k`` for ``k < p``: scalars when possible, matrices otherwise."""
    s = eta.scalar_gain()
    if s is not None:
        return -s[:-1]
    return -eta.eta[:-1].copy()


def analytic_best_response(problem: ControlProblem, eta: RiccatiTable, weighting: str = "tail"):
    """Best response of the discrete problem with regression-based conditional expectations.

    The intercept runs backward from ``R^T g(env_T)`` through
    ``h_l = (I + tau eta_{l+1} + tau^2 Q^T Q 1{l <= p-2})^{-1} E[h_{l+1} + tau Q^T f(env_{l+1}) 1{l <= p-2} | F_l]``
    where each conditional expectation is a weighted Hermite regression on
    the environment at node ``l``, using the problem's standardizers.

    Returns
    -------
    policy : FeedbackPolicy
        Gains ``-eta`` and intercept coefficients ``-(regression) A^T``.
    batch : RolloutBatch
        Rollout of that policy.
    h : array of shape (N, p, d)
        The new intercept, equal to ``-C`` of the returned policy.
    """
    model, grid = problem.model, problem.grid
    if eta.grid.p != grid.p or eta.d != model.d:
        raise ValueError("Riccati table does not match the problem")
    if weighting not in ("tail", "step", "full"):
        raise ValueError(f"unknown weighting {weighting!r}")
    p, tau, d = grid.p, grid.step, model.d
    N = problem.bank.N
    eye = np.eye(d)
    QtQ = model.Q.T @ model.Q
    Phi = problem.features
    W = problem.weights
    if weighting == "step":
        tail_ext = np.concatenate([W.tail, np.ones((N, 1))], axis=1)
        node_w = tail_ext[:, :-1] / tail_ext[:, 1:]
    elif weighting == "full":
        node_w = np.repeat(W.full[:, None], p, axis=1)
    else:
        node_w = W.tail

    c = np.empty((p, problem.index_set.L, d))
    h = np.empty((N, p, d))
    nxt = model.terminal(problem.env[:, p])
    for ell in range(p - 1, -1, -1):
        inner = ell <= p - 2
        y = nxt
        if inner and problem.has_running:
            y = y + tau * np.einsum("ed,je->jd", model.Q, problem.running[:, ell + 1])
        A = eye + tau * eta.eta[ell + 1] + (tau**2 * QtQ if inner else 0.0)
        A_inv = np.linalg.inv(A)
        b = weighted_least_squares(Phi[:, ell], y, node_w[:, ell]).reshape(-1, d)
        c[ell] = -b @ A_inv.T
        h[:, ell] = -np.einsum("jl,ld->jd", Phi[:, ell], c[ell])
        nxt = h[:, ell]
    policy = FeedbackPolicy(riccati_gain(eta), c, problem.standardizers, problem.index_set)
    return policy, rollout(policy, problem), h
