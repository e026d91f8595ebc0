"""Weighted component-model fitters against generic-optimizer oracles."""

import numpy as np
import pytest
from scipy.optimize import minimize

from mnar_mediation import glm


def _random_logistic_data(seed, n=200, p=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    coef = rng.normal(0, 0.8, p)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ coef)))).astype(float)
    return X, y


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_logistic_matches_generic_optimizer(seed):
    X, y = _random_logistic_data(seed)
    w = np.random.default_rng(seed + 10).uniform(0.2, 2.0, X.shape[0])
    coef = glm.fit_logistic(X, y, w=w)
    res = minimize(lambda b: -glm.logistic_loglik(b, X, y, w),
                   np.zeros(X.shape[1]), method="BFGS")
    assert np.max(np.abs(coef - res.x)) < 1e-5


def test_logistic_weight_two_equals_duplicated_row():
    X, y = _random_logistic_data(5, n=80)
    w = np.ones(80)
    w[:10] = 2.0
    X2 = np.vstack([X, X[:10]])
    y2 = np.concatenate([y, y[:10]])
    a = glm.fit_logistic(X, y, w=w)
    b = glm.fit_logistic(X2, y2)
    assert np.max(np.abs(a - b)) < 1e-8


def test_logistic_offset_equals_fixed_column():
    X, y = _random_logistic_data(6, n=150)
    extra = np.random.default_rng(1).standard_normal(150)
    with_col = glm.fit_logistic(np.column_stack([X, extra]),
                                y, start=np.zeros(X.shape[1] + 1))
    # pin the extra coefficient at its fitted value via an offset
    offset = with_col[-1] * extra
    free = glm.fit_logistic(X, y, offset=offset)
    assert np.max(np.abs(free - with_col[:-1])) < 1e-6


def test_logistic_separation_raises():
    X = np.column_stack([np.ones(20), np.arange(20, dtype=float)])
    y = (np.arange(20) >= 10).astype(float)
    with pytest.raises(glm.SeparationError) as exc:
        glm.fit_logistic(X, y, model_name="mediator-missingness")
    assert "mediator-missingness" in str(exc.value)


@pytest.mark.parametrize("seed", [0, 1])
def test_multinomial_matches_generic_optimizer(seed):
    rng = np.random.default_rng(seed)
    n, p, J = 300, 3, 3
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    coef = rng.normal(0, 0.7, (J - 1, p))
    eta = X @ coef.T
    probs = np.column_stack([np.ones(n), np.exp(eta)])
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(n)
    y = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    w = rng.uniform(0.5, 1.5, n)
    fit = glm.fit_multinomial(X, y, J, w=w)
    res = minimize(
        lambda v: -glm.multinomial_loglik(v.reshape(J - 1, p), X, y, w, J),
        np.zeros((J - 1) * p), method="BFGS")
    assert np.max(np.abs(fit.ravel() - res.x)) < 1e-4


def test_wls_matches_closed_form():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(100), rng.standard_normal((100, 2))])
    y = X @ np.array([1.0, -0.5, 2.0]) + rng.standard_normal(100)
    w = rng.uniform(0.1, 3.0, 100)
    coef, sigma = glm.fit_wls(X, y, w)
    sw = np.sqrt(w)
    expect = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    assert np.allclose(coef, expect)
    resid = y - X @ coef
    assert np.isclose(sigma, np.sqrt(np.sum(w * resid ** 2) / np.sum(w)))


def test_gamma_fit_is_stationary_and_consistent():
    rng = np.random.default_rng(11)
    n = 30_000
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    coef_true = np.array([0.5, 0.8])
    nu_true = 2.5
    mu = np.exp(X @ coef_true)
    y = rng.gamma(shape=nu_true, scale=mu / nu_true)
    coef, nu = glm.fit_gamma_loglink(X, y)
    assert np.max(np.abs(coef - coef_true)) < 0.05
    assert abs(nu - nu_true) < 0.1
    # stationarity of the profile likelihood via central differences
    base = glm.gamma_loglik(coef, nu, X, y, np.ones(n))
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        grad = (glm.gamma_loglik(coef + e, nu, X, y, np.ones(n))
                - glm.gamma_loglik(coef - e, nu, X, y, np.ones(n))) / (2 * h)
        assert abs(grad) < 1e-2 * n ** 0.5
    grad_nu = (glm.gamma_loglik(coef, nu + h, X, y, np.ones(n))
               - glm.gamma_loglik(coef, nu - h, X, y, np.ones(n))) / (2 * h)
    assert abs(grad_nu) < 1e-2 * n ** 0.5
    assert base > glm.gamma_loglik(coef_true * 1.1, nu, X, y, np.ones(n))


def test_gamma_rejects_nonpositive_response():
    X = np.ones((5, 1))
    with pytest.raises(glm.FitError):
        glm.fit_gamma_loglink(X, np.array([1.0, 2.0, 0.0, 1.0, 1.0]))
