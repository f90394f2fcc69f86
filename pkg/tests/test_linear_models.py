import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebench.linear_models import (
    L1, LinearFit, fit_lasso, fit_ols, fit_ridge, lambda_max, lasso_objective, min_norm_lstsq, soft_threshold,
)


def normal_equations(X, y):
    A = np.column_stack([np.ones(len(y)), X])
    coef = np.linalg.inv(A.T @ A) @ A.T @ y
    return coef[1:], coef[0]


def test_exact_line():
    fit = fit_ols([[1], [2], [3]], [2, 4, 6])
    np.testing.assert_allclose(fit.coefficients, [2], atol=1e-14)
    assert abs(fit.intercept) < 1e-14
    np.testing.assert_allclose(fit.predict([[1], [2], [3]]), [2, 4, 6], atol=1e-14)


def test_constant_target():
    X = np.random.default_rng(0).standard_normal((10, 3))
    fit = fit_ols(X, np.full(10, 4.5))
    np.testing.assert_allclose(fit.coefficients, 0, atol=1e-14)
    assert fit.intercept == pytest.approx(4.5, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_ols_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, 5))
    y = X @ rng.standard_normal(5) + 0.3 * rng.standard_normal(50) + 2
    beta, b0 = normal_equations(X, y)
    fit = fit_ols(X, y)
    np.testing.assert_allclose(fit.coefficients, beta, atol=1e-8)
    assert fit.intercept == pytest.approx(b0, abs=1e-8)


def test_min_norm_underdetermined():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 12))
    b = rng.standard_normal(5)
    np.testing.assert_allclose(min_norm_lstsq(A, b), np.linalg.pinv(A) @ b, atol=1e-10)


def test_min_norm_rank_deficient():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((20, 3))
    A = np.column_stack([A, A[:, 0] + A[:, 1]])
    b = rng.standard_normal(20)
    np.testing.assert_allclose(min_norm_lstsq(A, b), np.linalg.pinv(A) @ b, atol=1e-10)


def test_ridge_lambda_zero_is_ols():
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((30, 4)), rng.standard_normal(30)
    np.testing.assert_allclose(fit_ridge(X, y, 0).coefficients, fit_ols(X, y).coefficients, atol=1e-8)


def test_ridge_infinite_shrinkage():
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((30, 4)), rng.standard_normal(30)
    fit = fit_ridge(X, y, 1e12)
    assert np.linalg.norm(fit.coefficients) < 1e-6
    assert fit.intercept == pytest.approx(y.mean(), abs=1e-6)


@pytest.mark.parametrize("shape", [(20, 3), (8, 15)])
def test_ridge_closed_form(shape):
    rng = np.random.default_rng(5)
    X, y = rng.standard_normal(shape), rng.standard_normal(shape[0])
    Xc, yc = X - X.mean(0), y - y.mean()
    beta = np.linalg.inv(Xc.T @ Xc + np.eye(shape[1])) @ Xc.T @ yc
    fit = fit_ridge(X, y, 1.0)
    np.testing.assert_allclose(fit.coefficients, beta, atol=1e-8)
    assert fit.intercept == pytest.approx(y.mean() - X.mean(0) @ beta, abs=1e-10)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        fit_ridge([[1], [2]], [1, 2], -1)
    with pytest.raises(ValueError):
        fit_lasso([[1], [2]], [1, 2], -1)


def test_lasso_lambda_max_kills_all():
    rng = np.random.default_rng(6)
    X, y = rng.standard_normal((40, 6)), rng.standard_normal(40)
    lmax = lambda_max(X, y)
    assert lmax == pytest.approx(np.max(np.abs(X.T @ (y - y.mean()))) / 40)
    for lam in (lmax, 2 * lmax):
        fit = fit_lasso(X, y, lam)
        assert np.all(fit.coefficients == 0.0)
        assert fit.intercept == pytest.approx(y.mean())
    assert np.any(fit_lasso(X, y, 0.9 * lmax).coefficients != 0)


def test_lasso_zero_matches_ols():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((60, 5))
    y = X @ rng.standard_normal(5) + rng.standard_normal(60)
    np.testing.assert_allclose(fit_lasso(X, y, 0.0, tol=1e-10).coefficients, fit_ols(X, y).coefficients, atol=1e-4)


def test_lasso_scalar_soft_threshold():
    X, y = np.array([[1.0], [-1.0]]), np.array([1.0, -1.0])
    # x'y/n = 1 and x'x/n = 1, so lam = 0.5 halves the OLS slope
    fit = fit_lasso(X, y, 0.5)
    assert fit.coefficients[0] == soft_threshold(1.0, 0.5) == 0.5
    assert fit_ols(X, y).coefficients[0] == pytest.approx(1.0)


def test_soft_threshold():
    assert soft_threshold(3, 1) == 2
    assert soft_threshold(-3, 1) == -2
    assert soft_threshold(0.5, 1) == 0


def test_lasso_objective_non_increasing():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((50, 10))
    y = X[:, :3] @ [1.0, -2.0, 0.5] + rng.standard_normal(50)
    fit = fit_lasso(X, y, 0.1, track_objective=True)
    h = np.array(fit.objective_history)
    assert np.all(np.diff(h) <= 1e-12)
    Xc, yc = X - X.mean(0), y - y.mean()
    assert h[-1] == pytest.approx(lasso_objective(Xc, yc, fit.coefficients, 0.1))


def test_lasso_shrinks_monotonically():
    rng = np.random.default_rng(9)
    X, y = rng.standard_normal((50, 8)), rng.standard_normal(50)
    norms = [np.abs(fit_lasso(X, y, lam).coefficients).sum() for lam in (0.01, 0.05, 0.1, 0.2)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_lasso_max_iter_reports_not_converged():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((30, 10))
    fit = fit_lasso(X, rng.standard_normal(30), 0.01, tol=1e-15, max_iter=2)
    assert not fit.converged and fit.iterations == 2
    assert fit.penalty == L1


def test_predict_column_check():
    fit = fit_ols([[1, 2], [2, 1], [3, 3]], [1, 2, 3])
    with pytest.raises(ValueError):
        fit.predict([[1, 2, 3]])


def test_json_round_trip():
    rng = np.random.default_rng(11)
    X, y = rng.standard_normal((20, 3)), rng.standard_normal(20)
    fit = fit_ridge(X, y, 0.7)
    back = LinearFit.from_json(fit.to_json())
    np.testing.assert_array_equal(back.coefficients, fit.coefficients)
    assert (back.intercept, back.lam, back.penalty) == (fit.intercept, fit.lam, fit.penalty)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(6, 30), p=st.integers(1, 5))
def test_ols_residual_orthogonal(seed, n, p):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((n, p)), rng.standard_normal(n)
    fit = fit_ols(X, y)
    r = y - fit.predict(X)
    assert abs(r.sum()) < 1e-8
    np.testing.assert_allclose(X.T @ r, 0, atol=1e-8)
