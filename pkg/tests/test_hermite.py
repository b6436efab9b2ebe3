import math

import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from mfgplay.hermite import (
    SCALE_FLOOR,
    FeatureStandardizer,
    HermiteFeatures,
    HermiteRegressor,
    MultiIndexSet,
    fit_standardizer,
    hermite_1d,
    hermite_features,
    hermite_tensor,
    weighted_least_squares,
)


def rodrigues(n):
    x = sympy.symbols("x")
    expr = (-1) ** n * sympy.exp(x**2) * sympy.diff(sympy.exp(-(x**2)), x, n) / sympy.sqrt(2**n * sympy.factorial(n))
    return sympy.lambdify(x, sympy.simplify(expr), "math")


class TestPolynomials:
    def test_examples(self):
        assert np.all(hermite_1d(0, np.linspace(-3, 3, 7)) == 1.0)
        assert hermite_1d(1, 1.0) == pytest.approx(math.sqrt(2), abs=1e-15)
        assert hermite_1d(2, 0.0) == pytest.approx(-1 / math.sqrt(2), abs=1e-15)
        with pytest.raises(ValueError):
            hermite_1d(-1, 0.0)

    @pytest.mark.parametrize("n", range(9))
    def test_recurrence_matches_rodrigues(self, n):
        f = rodrigues(n)
        for x in (-2.0, -1.0, 0.0, 1.0, 2.0):
            assert abs(float(hermite_1d(n, x)) - f(x)) <= 1e-10

    def test_orthonormal_under_half_variance(self):
        x = np.random.default_rng(4).normal(0.0, math.sqrt(0.5), 100_000)
        for m in range(5):
            for n in range(m, 5):
                prod = hermite_1d(m, x) * hermite_1d(n, x)
                se = prod.std() / math.sqrt(x.size)
                assert abs(prod.mean() - (m == n)) <= 3 * se + 1e-12, (m, n)

    def test_tensor_examples(self):
        assert hermite_tensor((0, 0, 0), [0.3, -2.0, 5.0]) == 1.0
        assert hermite_tensor((1, 1), [1.0, 1.0]) == pytest.approx(2.0, abs=1e-14)
        assert hermite_tensor((2, 0), [0.0, 5.0]) == pytest.approx(-1 / math.sqrt(2), abs=1e-15)
        with pytest.raises(ValueError):
            hermite_tensor((1, 1), [1.0, 1.0, 1.0])


class TestIndexSet:
    @given(st.integers(1, 4), st.integers(0, 6))
    def test_cardinality_and_order(self, d, D):
        s = MultiIndexSet(d, D)
        assert s.L == math.comb(D + d, d)
        assert list(s.indices) == sorted(s.indices)
        assert all(sum(ell) <= D for ell in s.indices)

    def test_features_match_tensor(self, rng):
        s = MultiIndexSet(2, 3)
        z = rng.standard_normal((5, 2))
        X = hermite_features(z, s)
        for j, ell in enumerate(s.indices):
            np.testing.assert_allclose(X[:, j], hermite_tensor(ell, z), rtol=1e-14)


class TestStandardizer:
    def test_degenerate(self):
        st_ = fit_standardizer(np.full((10, 2), 3.0))
        np.testing.assert_array_equal(st_.mean_, [3.0, 3.0])
        np.testing.assert_array_equal(st_.scale_, [SCALE_FLOOR, SCALE_FLOOR])

    def test_population_convention(self):
        st_ = fit_standardizer([-1.0, 1.0])
        assert st_.mean_[0] == 0.0 and st_.scale_[0] == 1.0

    def test_gaussian_scale(self):
        st_ = fit_standardizer(np.random.default_rng(1).standard_normal((100_000, 2)))
        np.testing.assert_allclose(st_.scale_, [1, 1], rtol=0.02)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fit_standardizer(np.zeros((1, 2)))

    def test_cholesky_whitens(self, rng):
        C = np.array([[2.0, 0.8], [0.8, 1.0]])
        X = rng.multivariate_normal([1.0, -1.0], C, size=5000)
        st_ = FeatureStandardizer("cholesky").fit(X)
        U = st_.chol_
        assert np.all(np.diag(U) > 0) and np.allclose(U, np.triu(U))
        z = st_.transform(X)
        np.testing.assert_allclose(z.T @ z / len(z), np.eye(2), atol=1e-10)

    def test_cholesky_fallback(self):
        X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
        st_ = FeatureStandardizer("cholesky").fit(X)
        assert st_.fallback_ and st_.chol_ is None
        np.testing.assert_allclose(st_.transform(X)[:, 0], st_.transform(X)[:, 1])


class TestLeastSquares:
    def test_constant_feature_mean(self, rng):
        y = rng.standard_normal(50)
        c = weighted_least_squares(np.ones((50, 1)), y, np.ones(50))
        assert c[0] == pytest.approx(y.mean(), abs=1e-12)

    def test_interpolation(self, rng):
        X = rng.standard_normal((6, 6))
        y = rng.standard_normal(6)
        c = weighted_least_squares(X, y, np.ones(6))
        assert np.max(np.abs(X @ c - y)) <= 1e-8

    @given(st.integers(1, 6), st.integers(0, 2**31))
    def test_noiseless_recovery(self, L, seed):
        rng = np.random.default_rng(seed)
        X = hermite_features(rng.standard_normal((200, 1)), MultiIndexSet(1, L - 1))
        c_true = rng.standard_normal((L, 2))
        w = rng.uniform(0.1, 5.0, 200)
        np.testing.assert_allclose(weighted_least_squares(X, X @ c_true, w), c_true, atol=1e-6)

    def test_zero_weights(self):
        with pytest.raises(ValueError):
            weighted_least_squares(np.ones((3, 1)), np.ones(3), np.zeros(3))

    def test_collinear_features_stay_finite(self, rng):
        x = rng.standard_normal(100)
        X = np.column_stack([x, x, np.ones(100)])
        c = weighted_least_squares(X, 3 * x + 1, np.ones(100))
        assert np.all(np.isfinite(c))
        np.testing.assert_allclose(X @ c, 3 * x + 1, atol=1e-6)

    @given(st.integers(0, 2**31))
    def test_residual_nested_bases(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((300, 1))
        y = np.sin(2 * z[:, 0]) + 0.1 * rng.standard_normal(300)
        w = rng.uniform(0.5, 2.0, 300)
        prev = np.inf
        for D in range(7):
            X = hermite_features(z, MultiIndexSet(1, D))
            r = y - X @ weighted_least_squares(X, y, w)
            res = float(np.sum(w * r * r))
            assert res <= prev * (1 + 1e-9)
            prev = res


class TestEstimators:
    def test_regressor_recovers_polynomial(self, rng):
        X = rng.normal(2.0, 3.0, (2000, 2))
        y = X[:, 0] ** 2 - X[:, 1]
        model = HermiteRegressor(degree=2).fit(X, y)
        np.testing.assert_allclose(model.predict(X[:10]), y[:10], atol=1e-8)
        assert model.score(X, y) > 1 - 1e-12

    def test_features_transformer(self, rng):
        X = rng.standard_normal((4, 3))
        F = HermiteFeatures(2).fit_transform(X)
        assert F.shape == (4, math.comb(5, 3))
