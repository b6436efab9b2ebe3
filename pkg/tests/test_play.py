import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgplay.model import LQModel, make_coupling
from mfgplay.noise import TimeGrid, sample_noise_bank
from mfgplay.play import (
    PlayConfig,
    PlayState,
    TiltedFictitiousPlay,
    averaged_guess_update,
    play_step,
    check_scheme,
    replay,
    run,
    vanishing_viscosity,
)
from mfgplay.reference import solve_reference
from mfgplay.riccati import discrete_riccati


def benchmark(N=5000, p=10, seed=1):
    grid = TimeGrid(1.0, p)
    bank = sample_noise_bank(seed, 1, N, p, 1)
    model = LQModel(g=make_coupling("cos_kappa", kappa=1.0), sigma=0.0, epsilon=1.0)
    return model, grid, bank


@pytest.fixture(scope="module")
def bench_ref():
    model, grid, bank = benchmark()
    return model, grid, bank, solve_reference(model, bank, grid, 4, 10, with_cost=False)


class TestFixedPoints:
    def test_all_zero(self):
        grid = TimeGrid(1.0, 5)
        bank = sample_noise_bank(2, 3, 1, 5, 1)
        model = LQModel(g=make_coupling("zero"), sigma=0.0, epsilon=0.0)
        cfg = PlayConfig(scheme="idio_only", n_iters=3, D=0, best_response="analytic")
        state = run(model, grid, bank, cfg)
        assert np.all(state.env_bar == 0) and np.all(state.intercept == 0)

    def test_shifted_coupling_without_noise(self):
        grid = TimeGrid(1.0, 10)
        bank = sample_noise_bank(2, 1, 1, 10, 1)
        model = LQModel(g=make_coupling("cos_shifted", kappa=10.0), sigma=0.0, epsilon=0.0)
        cfg = PlayConfig(scheme="idio_only", n_iters=6, D=0, best_response="analytic")
        state = PlayState.initial(model, grid, bank)
        eta = discrete_riccati(0, 1, grid)
        for _ in range(6):
            state = play_step(state, model, grid, bank, eta, cfg)
            # g(0) is zero up to the rounding of x0
            np.testing.assert_allclose(state.env_bar, 0, atol=1e-14)
            np.testing.assert_allclose(state.intercept, 0, atol=1e-14)

    def test_zero_iterations(self):
        model, grid, bank = benchmark(N=50)
        state = run(model, grid, bank, PlayConfig(scheme="common_only", n_iters=0))
        assert state.n == 0 and np.all(state.env_bar == 0) and np.all(state.intercept == 0)


class TestConvergence:
    def test_error_decreases_first_five(self, bench_ref):
        model, grid, bank, ref = bench_ref
        state = run(model, grid, bank, PlayConfig(scheme="common_only", n_iters=5, riccati="known"), reference=ref)
        errs = [r.l2_error for r in state.history]
        assert errs[4] < errs[0]

    def test_intercept_increments_shrink(self, bench_ref):
        model, grid, bank, _ = bench_ref
        cfg = PlayConfig(scheme="common_only", n_iters=1, best_response="analytic")
        state, hs = None, []
        for _ in range(11):
            state = run(model, grid, bank, cfg, state=state)
            hs.append(state.intercept)
        # hs[n-1] is h^n
        step = lambda n: np.max(np.abs(hs[n] - hs[n - 1]))  # noqa: E731
        assert step(10) < step(2)

    def test_averaged_guess_not_worse_at_eight(self, bench_ref):
        model, grid, bank, ref = bench_ref
        errs = {}
        for variant in ("standard", "averaged_guess"):
            cfg = PlayConfig(scheme="common_only", n_iters=8, best_response="analytic", variant=variant)
            errs[variant] = run(model, grid, bank, cfg, reference=ref).history[-1].l2_error
        assert errs["averaged_guess"] <= errs["standard"]


class TestAveragedGuess:
    def test_hand_example(self):
        h_bar = np.array([2.0])
        guess, new_bar = averaged_guess_update(np.array([4.0]), h_bar, 1)
        assert guess[0] == 5.0 and new_bar[0] == 3.0

    @given(st.integers(1, 20), st.floats(-5, 5))
    def test_constant_history(self, n, v):
        guess, new_bar = averaged_guess_update(np.full(3, v), np.full(3, v), n)
        np.testing.assert_allclose(guess, v, rtol=1e-14, atol=1e-14)
        np.testing.assert_allclose(new_bar, v, rtol=1e-14, atol=1e-14)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=12))
    def test_running_mean(self, values):
        h_bar = np.zeros(1)
        for n, v in enumerate(values):
            _, h_bar = averaged_guess_update(np.array([v]), h_bar, n)
        assert h_bar[0] == pytest.approx(np.mean(values), abs=1e-12)


class TestInvariants:
    def test_averaging_identity(self):
        model, grid, bank = benchmark(N=500)
        cfg = PlayConfig(scheme="common_only", n_iters=6, keep_fields=True, epochs=5)
        state = run(model, grid, bank, cfg)
        np.testing.assert_allclose(state.env_bar, np.mean(state.m_fields, axis=0), rtol=0, atol=1e-12)

    def test_common_only_equals_two_noise_with_one_particle(self):
        model, grid, bank = benchmark(N=300)
        runs = [run(model, grid, bank, PlayConfig(scheme=s, n_iters=4, epochs=5)) for s in ("common_only", "two_noise")]
        for a, b in zip(runs[0].history, runs[1].history):
            assert (a.cost_raw, a.cost_renormalized) == (b.cost_raw, b.cost_renormalized)
        assert np.array_equal(runs[0].env_bar, runs[1].env_bar)
        assert np.array_equal(runs[0].intercept, runs[1].intercept)

    def test_idio_only_intercept_is_a_node_vector(self):
        grid = TimeGrid(1.0, 6)
        bank = sample_noise_bank(4, 200, 1, 6, 2)
        model = LQModel(g=make_coupling("cos_kappa", d=2, kappa=10.0), d=2, sigma=1.0, epsilon=0.0)
        state = run(model, grid, bank, PlayConfig(scheme="idio_only", n_iters=3, D=0, epochs=5))
        assert state.intercept.shape == (1, 6, 2)
        np.testing.assert_array_equal(state.intercept[0], -state.policy.c[:, 0, :])

    @pytest.mark.parametrize(
        "scheme,sigma,eps,N,D",
        [("common_only", 1.0, 1.0, 4, 2), ("common_only", 0.0, 0.0, 4, 2), ("idio_only", 1.0, 0.5, 1, 0),
         ("idio_only", 1.0, 0.0, 4, 0), ("idio_only", 1.0, 0.0, 1, 2), ("two_noise", 1.0, 0.0, 4, 2)],
    )
    def test_scheme_restrictions(self, scheme, sigma, eps, N, D):
        grid = TimeGrid(1.0, 3)
        bank = sample_noise_bank(0, 2, N, 3, 1)
        model = LQModel(g=make_coupling("zero"), sigma=sigma, epsilon=eps)
        with pytest.raises(ValueError):
            check_scheme(PlayConfig(scheme=scheme, D=D), model, bank)

    def test_replay_reproduces_training(self):
        model, grid, bank = benchmark(N=400)
        state = run(model, grid, bank, PlayConfig(scheme="common_only", n_iters=4, epochs=5))
        again = replay(state.history, model, grid, bank, PlayConfig(scheme="common_only"))
        np.testing.assert_allclose(again.env_bar, state.env_bar, rtol=0, atol=1e-12)
        np.testing.assert_allclose(again.intercept, state.intercept, rtol=0, atol=1e-12)


class TestAnnealing:
    def test_single_stage_matches_run(self):
        model, grid, bank = benchmark(N=300)
        cfg = PlayConfig(scheme="common_only", n_iters=3, epochs=5)
        (stage,) = vanishing_viscosity([1.0], model, grid, bank, cfg)
        direct = run(model, grid, bank, cfg)
        assert np.array_equal(stage.state.env_bar, direct.env_bar)
        assert np.array_equal(stage.state.intercept, direct.intercept)
        assert np.array_equal(stage.terminal_means, direct.env_bar[:, -1])

    @pytest.mark.parametrize("schedule", [[0.5, 1.0], [], [1.0, 1.0], [1.0, 0.0]])
    def test_bad_schedule(self, schedule):
        model, grid, bank = benchmark(N=10)
        with pytest.raises(ValueError):
            vanishing_viscosity(schedule, model, grid, bank, PlayConfig(scheme="common_only"))

    def test_baseline_is_previous_intercept(self):
        model, grid, bank = benchmark(N=300)
        cfg = PlayConfig(scheme="common_only", n_iters=2, best_response="analytic")
        s1, s2 = vanishing_viscosity([1.0, 0.5], model, grid, bank, cfg)
        assert s1.state.baseline is None
        assert np.array_equal(s2.state.baseline, s1.state.intercept)
        assert s2.epsilon == 0.5

    def test_partial_results_on_divergence(self):
        model, grid, bank = benchmark(N=200)
        cfg = PlayConfig(scheme="common_only", n_iters=2, epochs=200, lr=1e5)
        stages = []
        with pytest.raises(ArithmeticError, match="stage 1"):
            vanishing_viscosity([1.0, 0.5], model, grid, bank, cfg, stages=stages)
        assert stages == []


def test_estimator_wrapper():
    est = TiltedFictitiousPlay(N=300, p=5, n_iters=2, epochs=3, scheme="common_only")
    est.fit()
    assert est.state_.n == 2
