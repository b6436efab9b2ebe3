import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from mfgplay.analysis import (
    deterministic_equilibria,
    exploitability,
    l2_error,
    potential_scan,
    terminal_histogram,
    validation_error,
)
from mfgplay.model import LQModel, make_coupling
from mfgplay.noise import TimeGrid, sample_noise_bank
from mfgplay.play import PlayConfig, run
from mfgplay.policy import ControlProblem, analytic_best_response
from mfgplay.reference import solve_reference
from mfgplay.riccati import discrete_riccati


def brentq_root(g, lo, hi):
    return optimize.brentq(lambda x: 2 * x + float(g(x)), lo, hi, xtol=1e-14)


class TestEquilibria:
    def test_cos_one(self):
        g = make_coupling("cos_kappa", kappa=1.0)
        eq = deterministic_equilibria(g, bracket=(-1, 1))
        assert eq.roots.size == 1
        assert abs(eq.roots[0] - brentq_root(g, -1, 1)) <= 1e-6
        assert round(float(eq.roots[0]), 6) == -0.450184

    def test_shifted_variant(self):
        g = make_coupling("cos_shifted", kappa=10.0)
        assert g.x0 == pytest.approx(-0.384, abs=1e-3)
        eq = deterministic_equilibria(g)
        assert np.min(np.abs(eq.roots)) <= 1e-10
        near = eq.roots[np.argmin(np.abs(eq.roots + 0.5))]
        assert abs(near + 0.5) < 0.05
        J = lambda x: x**2 + g.primitive(x)  # noqa: E731
        assert J(near) < J(0.0)

    @pytest.mark.parametrize("kappa", [1.0, 7.0, 10.0])
    def test_residuals_and_reconstruction(self, kappa):
        g = make_coupling("cos_kappa", kappa=kappa)
        eq = deterministic_equilibria(g)
        assert np.all(eq.residuals <= 1e-10)
        assert np.all(np.diff(eq.roots) > 0)
        assert eq.ode_residual(g) <= 1e-8
        m_tilde_T = eq.m_paths[:, -1] / (2.0 - eq.times[-1])
        np.testing.assert_array_equal(m_tilde_T, -g(eq.roots) / 2)

    def test_no_root_warns(self):
        g = make_coupling("constant", gamma=1.0)
        with pytest.warns(RuntimeWarning):
            eq = deterministic_equilibria(g, bracket=(0.0, 1.0))
        assert eq.roots.size == 0

    def test_bad_bracket(self):
        with pytest.raises(ValueError):
            deterministic_equilibria(make_coupling("zero"), bracket=(1.0, -1.0))

    @given(st.floats(0.0, 1.99))
    def test_unique_below_lipschitz_two(self, kappa):
        eq = deterministic_equilibria(make_coupling("cos_kappa", kappa=kappa), intervals=2000)
        assert eq.roots.size == 1


class TestPotential:
    def test_zero(self):
        curve = potential_scan(make_coupling("zero"), samples=2001)
        assert curve.global_minimizer == 0.0
        assert np.min(curve.value) == 0.0

    def test_cos_one(self):
        g = make_coupling("cos_kappa", kappa=1.0)
        curve = potential_scan(g)
        assert curve.stationary.size == 1
        assert abs(curve.stationary[0] - brentq_root(g, -1, 1)) <= 1e-9

    @pytest.mark.parametrize("kappa", [7.0, 8.0, 9.0, 10.0])
    def test_several_stationary_one_global(self, kappa):
        g = make_coupling("cos_kappa", kappa=kappa)
        curve = potential_scan(g)
        assert curve.stationary.size > 1
        J = curve.minimizers**2 + g.primitive(curve.minimizers)
        assert np.sum(np.isclose(J, J.min(), rtol=0, atol=1e-12)) == 1

    @pytest.mark.parametrize("kind,kappa", [("cos_kappa", 1.0), ("cos_kappa", 10.0), ("cos_shifted", 10.0)])
    def test_stationary_points_are_roots(self, kind, kappa):
        g = make_coupling(kind, kappa=kappa)
        roots = deterministic_equilibria(g).roots
        stationary = potential_scan(g).stationary
        assert roots.size == stationary.size
        np.testing.assert_allclose(np.sort(stationary), roots, rtol=0, atol=1e-9)


class TestMetric:
    def test_identity(self, rng):
        env, h = rng.standard_normal((5, 4, 2)), rng.standard_normal((5, 3, 2))
        assert l2_error((env, h), (env, h)) == 0.0

    def test_constant_offset(self, rng):
        env, h = rng.standard_normal((5, 4, 2)), rng.standard_normal((5, 3, 2))
        shifted = env.copy()
        shifted[..., 1] += 0.3
        assert l2_error((shifted, h), (env, h)) == pytest.approx(0.3, abs=1e-14)

    @given(st.integers(0, 2**31))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = [(rng.standard_normal((4, 4, 1)), rng.standard_normal((4, 3, 1))) for _ in range(3)]
        dab, dba = l2_error(a, b), l2_error(b, a)
        assert dab > 0 and dab == dba
        assert l2_error(a, c) <= dab + l2_error(b, c) + 1e-12

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_bank_mismatch(self):
        grid = TimeGrid(1.0, 4)
        model = LQModel(g=make_coupling("cos_kappa", kappa=1.0))
        ref = solve_reference(model, sample_noise_bank(1, 1, 50, 4, 1), grid, 2, 2, with_cost=False)
        other = sample_noise_bank(2, 1, 50, 4, 1)
        state = run(model, grid, other, PlayConfig(scheme="common_only", n_iters=1, best_response="analytic"))
        with pytest.raises(ValueError):
            l2_error(state, ref)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            l2_error((np.zeros((2, 4, 1)), np.zeros((2, 3, 1))), (np.zeros((3, 4, 1)), np.zeros((3, 3, 1))))


@pytest.fixture(scope="module")
def played():
    grid = TimeGrid(1.0, 10)
    bank = sample_noise_bank(1, 1, 5000, 10, 1)
    model = LQModel(g=make_coupling("cos_kappa", kappa=1.0), sigma=0.0, epsilon=1.0)
    cfg = PlayConfig(scheme="common_only", n_iters=1, best_response="analytic")
    eta = discrete_riccati(0, 1, grid)
    states, state = [], None
    for _ in range(10):
        state = run(model, grid, bank, cfg, state=state, eta=eta)
        states.append(state)
    return model, grid, bank, cfg, eta, states


class TestExploitability:
    def test_zero_for_the_best_response_itself(self, played):
        model, grid, bank, cfg, eta, states = played
        state = states[4]
        problem = ControlProblem(model, grid, bank, env=state.env_bar, tilt=state.tilt(cfg), D=cfg.D)
        policy, _, _ = analytic_best_response(problem, eta)
        frozen = type(state)(**{**state.__dict__, "policy": policy})
        value, se = exploitability(frozen, model, grid, bank, eta, cfg)
        assert abs(value) <= 1e-8 and se >= 0

    def test_bounded_below(self, played):
        model, grid, bank, cfg, eta, states = played
        for state in states:
            assert exploitability(state, model, grid, bank, eta, cfg)[0] >= -1e-3

    def test_decreases_with_iterations(self, played):
        model, grid, bank, cfg, eta, states = played
        assert exploitability(states[9], model, grid, bank, eta, cfg)[0] < exploitability(states[1], model, grid, bank, eta, cfg)[0]


class TestValidation:
    def test_deterministic_scheme(self):
        grid = TimeGrid(1.0, 8)
        model = LQModel(g=make_coupling("cos_kappa", kappa=1.0), sigma=0.0, epsilon=0.0)
        cfg = PlayConfig(scheme="idio_only", n_iters=3, D=0, best_response="analytic")
        bank = sample_noise_bank(1, 1, 1, 8, 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ref = solve_reference(model, bank, grid, 0, 10, with_cost=False)
            state = run(model, grid, bank, cfg, reference=ref)
            val = validation_error(state.history, model, grid, cfg, 2, 1, 1, picard_iters=10, train_seed=1)
        assert val == pytest.approx(state.history[-1].l2_error, abs=1e-12)

    @pytest.mark.parametrize("train_seed,fresh_seed", [(1, 2), (2, 1)])
    def test_two_noise_within_factor_two(self, train_seed, fresh_seed):
        grid = TimeGrid(1.0, 10)
        model = LQModel(g=make_coupling("cos_kappa", d=2, kappa=10.0), d=2, sigma=1.0, epsilon=1.0)
        cfg = PlayConfig(scheme="two_noise", n_iters=6, best_response="analytic")
        bank = sample_noise_bank(train_seed, 20, 3000, 10, 2)
        ref = solve_reference(model, bank, grid, 4, 10, with_cost=False)
        state = run(model, grid, bank, cfg, reference=ref)
        train = state.history[-1].l2_error
        val = validation_error(state.history, model, grid, cfg, fresh_seed, 20, 3000, train_seed=train_seed)
        assert 0.5 * train <= val <= 2 * train

    def test_same_seed_rejected(self, played):
        model, grid, bank, cfg, eta, states = played
        with pytest.raises(ValueError):
            validation_error(states[0].history, model, grid, cfg, 1, 1, 10, train_seed=1)


class TestHistogram:
    def test_constant_samples(self):
        hist = terminal_histogram(np.full(40, -0.3), bins=7)
        assert np.count_nonzero(hist.counts) == 1
        k = int(np.flatnonzero(hist.counts)[0])
        assert hist.edges[k] <= -0.3 <= hist.edges[k + 1]

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=200), st.integers(1, 40))
    def test_conservation(self, samples, bins):
        assert terminal_histogram(samples, bins=bins).counts.sum() == len(samples)

    def test_errors(self):
        with pytest.raises(ValueError):
            terminal_histogram([], bins=3)
        with pytest.raises(ValueError):
            terminal_histogram([1.0], bins=0)
