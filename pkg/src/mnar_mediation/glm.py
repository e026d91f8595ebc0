"""Weighted maximum-likelihood fitters for the component regression models.

All fitters accept fractional (non-negative, possibly non-integer) weights so
they can serve as the M-step of the EM engine, and converge to tight
tolerances so that the EM fixed point is a stationary point of the observed
likelihood.  Offsets support pinned sensitivity coefficients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma


class FitError(RuntimeError):
    pass


class SeparationError(FitError):
    """Weighted logistic likelihood is maximized at infinity."""

    def __init__(self, model: str = "logistic"):
        self.model = model
        super().__init__(f"separation detected in the {model} model")


_COEF_BOUND = 40.0  # |linear-predictor coefficient| beyond this flags separation


def _solve_psd(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def logistic_loglik(coef, X, y, w, offset=None):
    eta = X @ coef
    if offset is not None:
        eta = eta + offset
    # log(1+e^eta) computed stably
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(X, y, w=None, start=None, offset=None, tol=1e-11,
                 max_iter=200, model_name="logistic"):
    """Weighted logistic MLE by Newton's method with step halving."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    coef = np.zeros(p) if start is None else np.asarray(start, dtype=float).copy()
    ll = logistic_loglik(coef, X, y, w, offset)
    for _ in range(max_iter):
        eta = X @ coef
        if offset is not None:
            eta = eta + offset
        mu = expit(eta)
        grad = X.T @ (w * (y - mu))
        wt = w * mu * (1.0 - mu)
        H = X.T @ (X * wt[:, None])
        H[np.diag_indices_from(H)] += 1e-12
        step = _solve_psd(H, grad)
        scale = 1.0
        for _ in range(30):
            new = coef + scale * step
            ll_new = logistic_loglik(new, X, y, w, offset)
            if ll_new >= ll - 1e-13:
                break
            scale *= 0.5
        else:
            break
        delta = scale * np.max(np.abs(step))
        coef, ll = new, ll_new
        if np.max(np.abs(coef)) > _COEF_BOUND:
            raise SeparationError(model_name)
        if delta < tol:
            break
    return coef


def multinomial_loglik(coef, X, y, w, J):
    """coef: (J-1, p); category 0 is the reference."""
    eta = X @ coef.T  # (n, J-1)
    zmax = np.maximum(eta.max(axis=1), 0.0)
    logz = zmax + np.log(np.exp(-zmax) + np.exp(eta - zmax[:, None]).sum(axis=1))
    pick = np.where(y[:, None] - 1 == np.arange(J - 1)[None, :], eta, 0.0).sum(axis=1)
    return float(np.sum(w * (pick - logz)))


def fit_multinomial(X, y, J, w=None, start=None, tol=1e-11, max_iter=200,
                    model_name="multinomial"):
    """Weighted multinomial-logit MLE (reference category 0), full Newton."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    coef = (np.zeros((J - 1, p)) if start is None
            else np.asarray(start, dtype=float).copy())
    ll = multinomial_loglik(coef, X, y, w, J)
    for _ in range(max_iter):
        eta = X @ coef.T
        emax = np.maximum(eta.max(axis=1, keepdims=True), 0.0)
        num = np.exp(eta - emax)
        den = np.exp(-emax[:, 0]) + num.sum(axis=1)
        probs = num / den[:, None]  # (n, J-1)
        ind = (y[:, None] == np.arange(1, J)[None, :]).astype(float)
        grad = ((w[:, None] * (ind - probs)).T @ X).ravel()
        q = p * (J - 1)
        H = np.empty((q, q))
        for a in range(J - 1):
            for b in range(J - 1):
                wab = w * (probs[:, a] * ((a == b) - probs[:, b]))
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = X.T @ (X * wab[:, None])
        H[np.diag_indices_from(H)] += 1e-12
        step = _solve_psd(H, grad).reshape(J - 1, p)
        scale = 1.0
        for _ in range(30):
            new = coef + scale * step
            ll_new = multinomial_loglik(new, X, y, w, J)
            if ll_new >= ll - 1e-13:
                break
            scale *= 0.5
        else:
            break
        delta = scale * np.max(np.abs(step))
        coef, ll = new, ll_new
        if np.max(np.abs(coef)) > _COEF_BOUND:
            raise SeparationError(model_name)
        if delta < tol:
            break
    return coef


def fit_wls(X, y, w=None):
    """Weighted least squares; returns (coef, ML residual scale)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    sigma2 = float(np.sum(w * resid * resid) / np.sum(w))
    return coef, float(np.sqrt(max(sigma2, 1e-300)))


def gaussian_loglik(coef, sigma, X, y, w):
    resid = y - X @ coef
    return float(np.sum(w * (-0.5 * np.log(2.0 * np.pi) - np.log(sigma)
                             - 0.5 * (resid / sigma) ** 2)))


def gamma_loglik(coef, nu, X, ypos, w):
    """Gamma with log link: shape nu, mean exp(X coef)."""
    logmu = X @ coef
    return float(np.sum(w * (nu * (np.log(nu) - logmu) + (nu - 1.0) * np.log(ypos)
                             - nu * ypos / np.exp(logmu) - gammaln(nu))))


def fit_gamma_loglink(X, ypos, w=None, start=None, start_nu=1.0, tol=1e-11,
                      max_iter=200):
    """Weighted Gamma GLM (log link) with shape estimated by profile Newton.

    The location score does not involve the shape, so the fit alternates an
    IRLS pass for the coefficients with a Newton update of log(shape).
    """
    X = np.asarray(X, dtype=float)
    ypos = np.asarray(ypos, dtype=float)
    if np.any(ypos <= 0):
        raise FitError("Gamma model requires strictly positive responses")
    n = X.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if start is None:
        coef, _ = fit_wls(X, np.log(ypos), w)
    else:
        coef = np.asarray(start, dtype=float).copy()
    lognu = float(np.log(start_nu))
    for _ in range(max_iter):
        # IRLS for the location coefficients: working response eta + (y-mu)/mu
        eta = X @ coef
        mu = np.exp(np.clip(eta, -500, 500))
        z = eta + (ypos - mu) / mu
        new_coef, _ = fit_wls(X, z, w)
        # Newton on log(shape), score in nu: sum w [log nu + 1 - psi(nu) + log y - log mu - y/mu]
        eta = X @ new_coef
        mu = np.exp(np.clip(eta, -500, 500))
        nu = np.exp(lognu)
        score = float(np.sum(w * (np.log(nu) + 1.0 - digamma(nu)
                                  + np.log(ypos) - eta - ypos / mu)))
        info = float(np.sum(w) * (1.0 / nu - polygamma(1, nu)))
        step = -score / (info * nu) if info != 0 else 0.0
        step = float(np.clip(step, -2.0, 2.0))
        new_lognu = lognu + step
        delta = max(np.max(np.abs(new_coef - coef)), abs(new_lognu - lognu))
        coef, lognu = new_coef, new_lognu
        if delta < tol:
            break
    return coef, float(np.exp(lognu))
