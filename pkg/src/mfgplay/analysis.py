"""Deterministic equilibria, potential curves, error metrics and diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from mfgplay.model import Coupling, LQModel
from mfgplay.noise import NoiseBank, TimeGrid, sample_noise_bank
from mfgplay.policy import ControlProblem, analytic_best_response, rollout, adam_optimize
from mfgplay.riccati import RiccatiTable

ROOT_TOL = 1e-12


@dataclass
class EquilibriumSet:
    """Roots of ``2x + g(x) = 0`` with reconstructed benchmark trajectories.

    ``m_paths[r]`` and ``h_paths[r]`` hold the trajectories of root ``r`` on
    the grid nodes; ``potential[r]`` is ``x^2 + G(x)`` when a primitive exists.
    """

    roots: np.ndarray
    residuals: np.ndarray
    times: np.ndarray
    m_paths: np.ndarray
    h_paths: np.ndarray
    potential: np.ndarray = field(default=None)

    def ode_residual(self, g: Coupling) -> float:
        """Largest violation of ``m' = -(eta m + h)``, ``h' = eta h`` at the nodes, ``eta = 1/(2-t)``."""
        t = self.times
        eta = 1.0 / (2.0 - t)
        worst = 0.0
        for r, root in enumerate(self.roots):
            gr = float(g.scalar(root))
            dm = np.full_like(t, -0.5 * gr)
            dh = gr / (2.0 - t) ** 2
            worst = max(
                worst,
                float(np.max(np.abs(dm + eta * self.m_paths[r] + self.h_paths[r]))),
                float(np.max(np.abs(dh - eta * self.h_paths[r]))),
            )
        return worst


def _bisect(f, lo: float, hi: float, flo: float, tol: float = ROOT_TOL) -> float:
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def deterministic_equilibria(g: Coupling, bracket=(-2.0, 2.0), grid: TimeGrid = None, intervals: int = 10_000):
    """Scan ``2x + g(x)`` for sign changes and refine each by bisection.

    Trajectories use the benchmark reconstruction
    ``m_t = -g(r) t / 2`` (that is ``(2 - t) m~_t``) and ``h_t = g(r) / (2 - t)``.
    """
    grid = TimeGrid(1.0, 10) if grid is None else grid
    lo, hi = map(float, bracket)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError("bracket must be a finite interval")
    f = lambda x: 2.0 * x + float(g.scalar(x))  # noqa: E731
    xs = np.linspace(lo, hi, intervals + 1)
    vals = 2.0 * xs + g.scalar(xs)
    roots = []
    for k in range(intervals):
        a, b = vals[k], vals[k + 1]
        if a == 0:
            roots.append(xs[k])
        elif a * b < 0:
            roots.append(_bisect(f, xs[k], xs[k + 1], a))
    if vals[-1] == 0:
        roots.append(xs[-1])
    roots = np.array(sorted(roots))
    if roots.size == 0:
        warnings.warn(f"no sign change of 2x + g(x) in [{lo}, {hi}]", RuntimeWarning, stacklevel=2)
    t = grid.nodes
    gr = g.scalar(roots) if roots.size else np.zeros(0)
    m_tilde = -gr[:, None] * (1.0 / (2.0 - t) - 0.5)
    m_paths = (2.0 - t) * m_tilde
    h_paths = gr[:, None] / (2.0 - t)
    try:
        potential = roots**2 + g.primitive(roots)
    except NotImplementedError:
        potential = None
    return EquilibriumSet(
        roots=roots,
        residuals=np.abs(2.0 * roots + gr),
        times=t,
        m_paths=m_paths,
        h_paths=h_paths,
        potential=potential,
    )


@dataclass
class PotentialCurve:
    beta: np.ndarray
    value: np.ndarray
    slope: np.ndarray
    stationary: np.ndarray
    minimizers: np.ndarray
    global_minimizer: float


def potential_scan(g: Coupling, interval=(-2.0, 2.0), samples: int = 20_001) -> PotentialCurve:
    """Tabulate ``J(beta) = beta^2 + G(beta)`` and locate its critical points.

    Critical points are found from sign changes of the tabulated difference
    quotient of ``J`` and then polished by Newton steps on ``2 beta + g(beta)``.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    beta = np.linspace(float(interval[0]), float(interval[1]), samples)
    value = beta**2 + g.primitive(beta)
    slope = 2 * beta + g.scalar(beta)
    dq = np.diff(value)
    stationary, minimizers = [], []
    h = 1e-6
    for k in range(1, samples - 1):
        left, right = dq[k - 1], dq[k]
        if left == 0 or left * right < 0:
            x = beta[k]
            for _ in range(100):
                fx = 2 * x + float(g.scalar(x))
                dfx = 2 + (float(g.scalar(x + h)) - float(g.scalar(x - h))) / (2 * h)
                if dfx == 0:
                    break
                step = fx / dfx
                x -= step
                if abs(step) < 1e-15:
                    break
            stationary.append(x)
            if left < 0 < right or (left == 0 and right > 0):
                minimizers.append(x)
    stationary = np.array(stationary)
    minimizers = np.array(minimizers)
    candidates = np.concatenate([minimizers, beta[[0, -1]]])
    vals = candidates**2 + g.primitive(candidates)
    return PotentialCurve(beta, value, slope, stationary, minimizers, float(candidates[np.argmin(vals)]))


def l2_error(learned, reference) -> float:
    """``[(1/(N p)) sum_j sum_{k<p} |m_bar - m_ref|^2 + |h - h_ref|^2]^{1/2}``.

    ``learned`` is a ``PlayState`` or an ``(env_bar, intercept)`` pair;
    ``reference`` is a ``ReferenceSolution`` or a pair of the same shapes.
    """
    if hasattr(learned, "env_bar"):
        env, h = learned.env_bar, learned.intercept
        fp_l = getattr(learned, "bank_fingerprint", "")
    else:
        env, h = learned
        fp_l = ""
    if hasattr(reference, "m_field"):
        m_ref, h_ref = reference.m_field, reference.h_field
        fp_r = reference.bank_fingerprint
    else:
        m_ref, h_ref = reference
        fp_r = ""
    if fp_l and fp_r and fp_l != fp_r:
        raise ValueError("learned fields and reference come from different noise banks")
    env, h, m_ref, h_ref = (np.asarray(a, dtype=float) for a in (env, h, m_ref, h_ref))
    p = h.shape[1]
    if env.shape != m_ref.shape or h.shape != h_ref.shape:
        raise ValueError("field shapes differ")
    dm = env[:, :p] - m_ref[:, :p]
    dh = h - h_ref
    return float(np.sqrt(np.mean(np.sum(dm * dm, axis=-1) + np.sum(dh * dh, axis=-1))))


def exploitability(state, model: LQModel, grid: TimeGrid, bank: NoiseBank, eta: RiccatiTable, config) -> tuple:
    """Cost of the current policy minus the cost of a fresh best response.

    Both are evaluated against the frozen ``state.env_bar`` with the weights
    of the current tilt. Returns ``(value, standard_error)``.
    """
    problem = ControlProblem(
        model, grid, bank, env=state.env_bar, tilt=state.tilt(config), D=config.D, standardize=config.standardize
    )
    current = rollout(state.policy, problem)
    if config.best_response == "analytic":
        _, best, _ = analytic_best_response(problem, eta, config.weighting)
    else:
        start = problem.zero_policy()
        policy = adam_optimize(start, problem, epochs=config.epochs, lr=config.lr)
        best = rollout(policy, problem)
    w = problem.weights.full
    diff = w * (current.path_cost.mean(axis=0) - best.path_cost.mean(axis=0))
    se = float(np.std(diff) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return float(np.mean(diff)), se


def validation_error(snapshots, model: LQModel, grid: TimeGrid, config, fresh_seed: int, M: int, N: int,
                     picard_iters: int = 10, clamp: float = 1.0, train_seed=None) -> float:
    """Replay learned coefficients on a fresh bank and compare with a reference solved there."""
    from mfgplay.play import replay
    from mfgplay.reference import solve_reference

    if train_seed is not None and fresh_seed == train_seed:
        raise ValueError("the validation seed must differ from the training seed")
    bank = sample_noise_bank(fresh_seed, M, N, grid.p, model.d)
    state = replay(snapshots, model, grid, bank, config)
    reference = solve_reference(model, bank, grid, config.D, picard_iters, clamp, with_cost=False)
    return l2_error(state, reference)


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def mode(self) -> float:
        return float(self.centers[np.argmax(self.counts)])


def terminal_histogram(samples, bins=30, range=None) -> Histogram:
    """Histogram of terminal means (one value per realization)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    if isinstance(bins, int) and bins < 1:
        raise ValueError("bins must be at least 1")
    counts, edges = np.histogram(x, bins=bins, range=range)
    return Histogram(counts, edges)
