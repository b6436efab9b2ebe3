"""Fictitious play under the common-noise tilt, its averaged-guess variant and
the vanishing-viscosity driver."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from mfgplay.model import LQModel, make_coupling
from mfgplay.noise import NoiseBank, TimeGrid, sample_noise_bank
from mfgplay.policy import (
    ControlProblem,
    FeedbackPolicy,
    adam_optimize,
    analytic_best_response,
    empirical_cost,
    riccati_gain,
    rollout,
)
from mfgplay.riccati import RiccatiTable, discrete_riccati

SCHEMES = ("two_noise", "common_only", "idio_only")


@dataclass
class PlayConfig:
    """Numerical settings of one fictitious-play run."""

    scheme: str = "two_noise"
    n_iters: int = 10
    D: int = 4
    best_response: str = "adam"
    variant: str = "standard"
    riccati: str = "learned"
    lr: float = 0.01
    epochs: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    standardize: str = "diag"
    weighting: str = "tail"
    warm_start: bool = True
    keep_fields: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.best_response not in ("adam", "analytic"):
            raise ValueError(f"unknown best response {self.best_response!r}")
        if self.variant not in ("standard", "averaged_guess"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.riccati not in ("learned", "known"):
            raise ValueError(f"unknown Riccati mode {self.riccati!r}")
        if self.n_iters < 0 or self.D < 0 or self.epochs < 1:
            raise ValueError("n_iters and D must be non-negative, epochs positive")


def check_scheme(config: PlayConfig, model: LQModel, bank: NoiseBank) -> None:
    """Enforce the restrictions that define each scheme."""
    if config.scheme == "common_only":
        if model.sigma != 0:
            raise ValueError("common_only requires sigma = 0")
        if model.epsilon <= 0:
            raise ValueError("common_only requires eps > 0")
    elif config.scheme == "idio_only":
        if model.epsilon != 0 or bank.N != 1 or config.D != 0:
            raise ValueError("idio_only requires eps = 0, N = 1 and D = 0")
    elif model.epsilon <= 0:
        raise ValueError("eps > 0 is required unless the scheme is idio_only")


@dataclass
class IterationRecord:
    n: int
    cost_raw: float
    cost_renormalized: float
    l2_error: float
    wall_time: float
    policy: FeedbackPolicy = field(repr=False)


@dataclass
class PlayState:
    """Proxies of the environment and intercept after ``n`` iterations."""

    n: int
    env_bar: np.ndarray
    intercept: np.ndarray
    baseline: Optional[np.ndarray] = None
    intercept_bar: Optional[np.ndarray] = None
    variant_guess: Optional[np.ndarray] = None
    policy: Optional[FeedbackPolicy] = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)
    m_fields: list = field(default_factory=list, repr=False)
    bank_fingerprint: str = ""

    @classmethod
    def initial(cls, model: LQModel, grid: TimeGrid, bank: NoiseBank) -> "PlayState":
        N, p, d = bank.N, grid.p, model.d
        env = np.broadcast_to(model.x0, (N, p + 1, d)).copy()
        zeros = np.zeros((N, p, d))
        return cls(
            n=0,
            env_bar=env,
            intercept=zeros,
            intercept_bar=zeros.copy(),
            variant_guess=zeros.copy(),
            bank_fingerprint=bank.fingerprint,
        )

    def tilt(self, config: PlayConfig) -> np.ndarray:
        h = self.variant_guess if config.variant == "averaged_guess" else self.intercept
        if self.baseline is not None:
            h = h - self.baseline
        return h


def averaged_guess_update(h_new: np.ndarray, h_bar: np.ndarray, n: int) -> tuple:
    """Extrapolated tilt ``(1 + 1/(n+1)) h^{n+1} - h_bar^n / (n+1)``.

    Returns ``(guess, h_bar^{n+1})`` where ``h_bar`` is the running mean of
    the intercepts.
    """
    w = 1.0 / (n + 1)
    guess = (1 + w) * h_new - w * h_bar
    return guess, h_bar + w * (h_new - h_bar)


def _start_policy(state: PlayState, problem: ControlProblem, config: PlayConfig, gain) -> FeedbackPolicy:
    policy = problem.zero_policy()
    prev = state.policy
    if config.warm_start and prev is not None and prev.c.shape == policy.c.shape:
        policy.a = np.array(prev.a, dtype=float, copy=True)
        policy.c = prev.c.copy()
    if gain is not None:
        policy.a = gain.copy()
    return policy


def play_step(
    state: PlayState,
    model: LQModel,
    grid: TimeGrid,
    bank: NoiseBank,
    eta: RiccatiTable,
    config: PlayConfig,
    reference=None,
) -> PlayState:
    """One iteration: best response against the averaged environment, then update the proxies."""
    t0 = time.perf_counter()
    n = state.n
    problem = ControlProblem(
        model, grid, bank, env=state.env_bar, tilt=state.tilt(config), D=config.D, standardize=config.standardize
    )
    if config.best_response == "analytic":
        policy, batch, _ = analytic_best_response(problem, eta, config.weighting)
    else:
        known = config.riccati == "known"
        gain = riccati_gain(eta) if known else None
        policy = _start_policy(state, problem, config, gain)
        policy = adam_optimize(
            policy,
            problem,
            epochs=config.epochs,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            learn_gain=not known,
        )
        batch = rollout(policy, problem)
    raw, renorm = empirical_cost(batch, problem)
    h_new = -policy.intercept(problem.env, problem.policy_features(policy))
    m_new = batch.means()

    env_bar = m_new / (n + 1) + (n / (n + 1)) * state.env_bar
    guess, h_bar = averaged_guess_update(h_new, state.intercept_bar, n)
    new = replace(
        state,
        n=n + 1,
        env_bar=env_bar,
        intercept=h_new,
        intercept_bar=h_bar,
        variant_guess=guess,
        policy=policy,
        history=list(state.history),
        m_fields=list(state.m_fields) + ([m_new] if config.keep_fields else []),
    )
    err = float("nan")
    if reference is not None:
        from mfgplay.analysis import l2_error

        err = l2_error((env_bar, h_new), reference)
    new.history.append(IterationRecord(n + 1, raw, renorm, err, time.perf_counter() - t0, policy))
    return new


def run(
    model: LQModel,
    grid: TimeGrid,
    bank: NoiseBank,
    config: PlayConfig,
    reference=None,
    state: Optional[PlayState] = None,
    eta: Optional[RiccatiTable] = None,
) -> PlayState:
    """``config.n_iters`` iterations from ``state`` (default: environment ``E[X_0]``, intercept 0)."""
    check_scheme(config, model, bank)
    if eta is None:
        eta = discrete_riccati(model.Q, model.R, grid)
    if state is None:
        state = PlayState.initial(model, grid, bank)
    for _ in range(config.n_iters):
        try:
            state = play_step(state, model, grid, bank, eta, config, reference)
        except ArithmeticError as exc:
            raise type(exc)(f"iteration {state.n + 1}: {exc}") from exc
    return state


@dataclass
class StageResult:
    epsilon: float
    state: PlayState = field(repr=False)

    @property
    def terminal_means(self) -> np.ndarray:
        return self.state.env_bar[:, -1]


def vanishing_viscosity(
    schedule,
    model: LQModel,
    grid: TimeGrid,
    bank: NoiseBank,
    config: PlayConfig,
    warm_start_policy: bool = True,
    stages: Optional[list] = None,
) -> list:
    """Run the play for each noise level of a strictly decreasing schedule.

    Stage ``q + 1`` tilts by ``h^n - h_q`` where ``h_q`` is the final
    intercept of stage ``q``, and starts from the final environment and
    intercept of stage ``q``. The first stage starts from the standard
    initialization with a zero baseline. On failure the completed stages
    are available in ``stages`` if a list is passed.
    """
    schedule = [float(e) for e in schedule]
    if not schedule or any(e <= 0 for e in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be non-empty, positive and strictly decreasing")
    results = [] if stages is None else stages
    eta = discrete_riccati(model.Q, model.R, grid)
    prev = None
    for q, eps in enumerate(schedule):
        stage_model = replace(model, epsilon=eps)
        if prev is None:
            state = PlayState.initial(stage_model, grid, bank)
        else:
            last = prev.state
            state = PlayState(
                n=0,
                env_bar=last.env_bar.copy(),
                intercept=last.intercept.copy(),
                baseline=last.intercept.copy(),
                intercept_bar=np.zeros_like(last.intercept),
                variant_guess=last.intercept.copy(),
                policy=last.policy if warm_start_policy else None,
                bank_fingerprint=bank.fingerprint,
            )
        try:
            state = run(stage_model, grid, bank, config, state=state, eta=eta)
        except ArithmeticError as exc:
            raise type(exc)(f"stage {q + 1} (eps={eps:g}): {exc}") from exc
        prev = StageResult(eps, state)
        results.append(prev)
    return results


def replay(snapshots, model: LQModel, grid: TimeGrid, bank: NoiseBank, config: PlayConfig) -> PlayState:
    """Re-simulate the proxies on another bank from stored policy coefficients.

    ``snapshots`` holds policies or iteration records, one per iteration.

    Standardizers are refitted on the new bank's environment at every
    iteration, exactly as during training.
    """
    check_scheme(config, model, bank)
    state = PlayState.initial(model, grid, bank)
    for n, snap in enumerate(snapshots):
        snap = getattr(snap, "policy", snap)
        problem = ControlProblem(
            model, grid, bank, env=state.env_bar, tilt=state.tilt(config), D=config.D, standardize=config.standardize
        )
        policy = FeedbackPolicy(np.array(snap.a, copy=True), snap.c.copy(), problem.standardizers, problem.index_set)
        batch = rollout(policy, problem)
        raw, renorm = empirical_cost(batch, problem)
        h_new = -policy.intercept(problem.env, problem.features)
        env_bar = batch.means() / (n + 1) + (n / (n + 1)) * state.env_bar
        guess, h_bar = averaged_guess_update(h_new, state.intercept_bar, n)
        state = replace(
            state, n=n + 1, env_bar=env_bar, intercept=h_new, intercept_bar=h_bar, variant_guess=guess, policy=policy
        )
        state.history = state.history + [IterationRecord(n + 1, raw, renorm, float("nan"), 0.0, policy)]
    return state


class TiltedFictitiousPlay(BaseEstimator):
    """Estimator interface to the learning loop.

    ``fit(bank)`` learns on a noise bank (sampled from ``seed`` if omitted);
    ``predict(bank)`` replays the learned coefficients on another bank and
    returns the final ``(env_bar, intercept)``; ``score(bank)`` is minus
    the L2 distance of that replay to a reference solved on the same bank.
    """

    def __init__(
        self,
        d: int = 1,
        coupling: str = "cos_kappa",
        kappa: float = 1.0,
        sigma: float = 0.0,
        epsilon: float = 1.0,
        T: float = 1.0,
        p: int = 10,
        M: int = 1,
        N: int = 1000,
        D: int = 4,
        n_iters: int = 10,
        scheme: str = "common_only",
        best_response: str = "adam",
        variant: str = "standard",
        riccati: str = "learned",
        lr: float = 0.01,
        epochs: int = 15,
        picard_iters: int = 10,
        clamp: float = 1.0,
        track_error: bool = False,
        seed: int = 0,
    ):
        self.d = d
        self.coupling = coupling
        self.kappa = kappa
        self.sigma = sigma
        self.epsilon = epsilon
        self.T = T
        self.p = p
        self.M = M
        self.N = N
        self.D = D
        self.n_iters = n_iters
        self.scheme = scheme
        self.best_response = best_response
        self.variant = variant
        self.riccati = riccati
        self.lr = lr
        self.epochs = epochs
        self.picard_iters = picard_iters
        self.clamp = clamp
        self.track_error = track_error
        self.seed = seed

    def _parts(self):
        g = make_coupling(self.coupling, d=self.d, kappa=self.kappa)
        model = LQModel(g=g, d=self.d, sigma=self.sigma, epsilon=self.epsilon, T=self.T)
        config = PlayConfig(
            scheme=self.scheme,
            n_iters=self.n_iters,
            D=self.D,
            best_response=self.best_response,
            variant=self.variant,
            riccati=self.riccati,
            lr=self.lr,
            epochs=self.epochs,
        )
        return model, TimeGrid(self.T, self.p), config

    def _reference(self, model, grid, bank):
        from mfgplay.reference import solve_reference

        return solve_reference(model, bank, grid, self.D, self.picard_iters, self.clamp)

    def fit(self, X=None, y=None):
        model, grid, config = self._parts()
        bank = X if isinstance(X, NoiseBank) else sample_noise_bank(self.seed, self.M, self.N, self.p, self.d)
        self.reference_ = self._reference(model, grid, bank) if self.track_error else None
        self.state_ = run(model, grid, bank, config, reference=self.reference_)
        self.history_ = self.state_.history
        self.bank_ = bank
        return self

    def predict(self, X):
        model, grid, config = self._parts()
        state = replay(self.history_, model, grid, X, config)
        return state.env_bar, state.intercept

    def score(self, X, y=None):
        from mfgplay.analysis import l2_error

        model, grid, _ = self._parts()
        env, h = self.predict(X)
        return -l2_error((env, h), self._reference(model, grid, X))
