import numpy as np
import pytest
from scipy.special import expit

from dtrkit import FitError, fit_logistic, fit_multinomial, fit_ols


def newton_logistic_oracle(x, y, iters=60):
    """Plain Newton-Raphson, independent of the IRLS implementation."""
    beta = np.zeros(x.shape[1])
    for _ in range(iters):
        p = expit(x @ beta)
        h = x.T @ (x * (p * (1 - p))[:, None])
        beta = beta + np.linalg.solve(h, x.T @ (y - p))
    return beta


class TestOls:
    def test_exact_interpolation(self):
        fit = fit_ols(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([1.0, 3.0]))
        np.testing.assert_allclose(fit.coef, [1.0, 2.0], atol=1e-12)

    def test_duplicated_column_aliased(self):
        x = np.array([[1.0, 2.0, 2.0], [1.0, 3.0, 3.0], [1.0, 5.0, 5.0]])
        y = np.array([1.0, 2.0, 3.0])
        fit = fit_ols(x, y)
        assert fit.aliased.tolist() == [False, False, True]
        assert fit.coef[2] == 0.0
        base = fit_ols(x[:, :2], y)
        np.testing.assert_allclose(fit.predict(x), base.predict(x[:, :2]), atol=1e-12)

    def test_normal_equation_residual(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        fit = fit_ols(x, y)
        assert np.abs(x.T @ (y - fit.predict(x))).max() < 1e-8

    def test_column_reordering_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 5))
        y = rng.normal(size=40)
        perm = rng.permutation(5)
        a = fit_ols(x, y).predict(x)
        b = fit_ols(x[:, perm], y).predict(x[:, perm])
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_weights(self):
        x = np.ones((4, 1))
        y = np.array([0.0, 0.0, 1.0, 1.0])
        w = np.array([3.0, 1.0, 1.0, 3.0])
        fit = fit_ols(x, y, weights=w)
        np.testing.assert_allclose(fit.coef, [0.5], atol=1e-12)

    def test_zero_rows(self):
        with pytest.raises(FitError):
            fit_ols(np.empty((0, 2)), np.empty(0))


class TestLogistic:
    def test_intercept_closed_form(self):
        y = np.array([1.0] + [0.0] * 3)
        fit = fit_logistic(np.ones((4, 1)), y)
        np.testing.assert_allclose(fit.coef[0], np.log(0.25 / 0.75), atol=1e-8)

    def test_all_zero_outcomes(self):
        fit = fit_logistic(np.ones((20, 1)), np.zeros(20))
        assert fit.separation
        assert fit.predict_prob(np.ones((1, 1)))[0] <= 1e-8

    def test_matches_newton_oracle(self):
        rng = np.random.default_rng(11)
        x = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
        y = (rng.random(200) < expit(x @ np.array([0.3, -0.8, 0.5]))).astype(float)
        fit = fit_logistic(x, y)
        oracle = newton_logistic_oracle(x, y)
        assert np.abs(fit.coef - oracle).max() < 1e-6

    def test_score_residual_below_tolerance(self):
        rng = np.random.default_rng(5)
        x = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
        y = (rng.random(300) < 0.4).astype(float)
        fit = fit_logistic(x, y)
        assert fit.converged
        p = fit.predict_prob(x)
        assert np.abs(x.T @ (y - p)).max() < 1e-8

    def test_nonbinary_rejected(self):
        with pytest.raises(FitError):
            fit_logistic(np.ones((3, 1)), np.array([0.0, 0.5, 1.0]))


class TestMultinomial:
    def test_binary_reduction_matches_logistic(self):
        rng = np.random.default_rng(2)
        x = np.column_stack([np.ones(150), rng.normal(size=150)])
        y = (rng.random(150) < expit(0.5 * x[:, 1])).astype(int)
        ml = fit_multinomial(x, y, 2)
        lg = fit_logistic(x, y.astype(float))
        p_ml = ml.predict_prob(x)[:, 1]
        np.testing.assert_allclose(p_ml, lg.predict_prob(x), atol=1e-10)

    def test_intercept_only_empirical_mle(self):
        y = np.array([0] * 10 + [1] * 20 + [2] * 70)
        fit = fit_multinomial(np.ones((100, 1)), y, 3)
        np.testing.assert_allclose(fit.predict_prob(np.ones((1, 1))), [[0.1, 0.2, 0.7]], atol=1e-9)

    def test_score_residual(self):
        rng = np.random.default_rng(8)
        x = np.column_stack([np.ones(300), rng.normal(size=300)])
        y = rng.integers(0, 3, 300)
        fit = fit_multinomial(x, y, 3)
        probs = fit.predict_prob(x)
        for j in (1, 2):
            score = x.T @ ((y == j).astype(float) - probs[:, j])
            assert np.abs(score).max() < 1e-6

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        x = np.column_stack([np.ones(100), rng.normal(size=100)])
        fit = fit_multinomial(x, rng.integers(0, 3, 100), 3)
        probs = fit.predict_prob(x)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-12
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    def test_absent_level_is_fit_error(self):
        with pytest.raises(FitError):
            fit_multinomial(np.ones((10, 1)), np.zeros(10, dtype=int), 3)
