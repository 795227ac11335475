"""Built-in regression fits: Gaussian OLS and binomial/multinomial logistic.

All fits share the same rank policy: columns are scanned left to right and a
column that is (numerically) in the span of the columns kept so far is
aliased, i.e. dropped from the solve and recorded with a zero coefficient.
This makes coefficient vectors reproducible regardless of BLAS backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import FitError

__all__ = ["LinearFit", "LogisticFit", "MultinomialFit", "fit_ols", "fit_logistic", "fit_multinomial"]

_RANK_TOL = 1e-10
_IRLS_TOL = 1e-8
_IRLS_MAX_ITER = 100


def independent_columns(x: np.ndarray, tol: float = _RANK_TOL) -> np.ndarray:
    """Boolean mask of columns kept by the left-to-right rank scan."""
    n, p = x.shape
    keep = np.zeros(p, dtype=bool)
    basis: list[np.ndarray] = []
    for j in range(p):
        v = x[:, j].astype(float)
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            continue
        w = v.copy()
        for _ in range(2):  # two Gram-Schmidt passes for stability
            for q in basis:
                w = w - (q @ w) * q
        if np.linalg.norm(w) > tol * norm0:
            keep[j] = True
            basis.append(w / np.linalg.norm(w))
    return keep


@dataclass
class LinearFit:
    coef: np.ndarray
    aliased: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.coef


@dataclass
class LogisticFit:
    coef: np.ndarray
    aliased: np.ndarray
    converged: bool
    separation: bool = False
    n_iter: int = 0

    def predict_prob(self, x: np.ndarray) -> np.ndarray:
        return expit(x @ self.coef)


@dataclass
class MultinomialFit:
    """Baseline-category logistic model; ``coef[:, j]`` belongs to level j+1."""

    coef: np.ndarray  # (p, m-1)
    aliased: np.ndarray
    m: int
    converged: bool
    separation: bool = False
    n_iter: int = 0

    def predict_prob(self, x: np.ndarray) -> np.ndarray:
        eta = np.column_stack([np.zeros(x.shape[0]), x @ self.coef])
        eta -= eta.max(axis=1, keepdims=True)
        num = np.exp(eta)
        return num / num.sum(axis=1, keepdims=True)


def _check_xyw(x, y, weights):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2:
        raise FitError("design matrix must be 2-dimensional")
    if x.shape[0] == 0:
        raise FitError("cannot fit on zero rows")
    if x.shape[0] != y.shape[0]:
        raise FitError(f"design has {x.shape[0]} rows but response has {y.shape[0]}")
    if weights is None:
        w = np.ones(x.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise FitError("weights must be nonnegative")
    return x, y, w


def fit_ols(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> LinearFit:
    """Weighted least squares with left-to-right aliasing of dependent columns."""
    x, y, w = _check_xyw(x, y, weights)
    sw = np.sqrt(w)
    keep = independent_columns(x * sw[:, None])
    coef = np.zeros(x.shape[1])
    if keep.any():
        xk = x[:, keep] * sw[:, None]
        beta, *_ = np.linalg.lstsq(xk, y * sw, rcond=None)
        coef[keep] = beta
    return LinearFit(coef=coef, aliased=~keep)


def _binom_deviance(eta: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # -2 sum w * [y log p + (1-y) log(1-p)], computed stably from eta
    log_p = -np.logaddexp(0.0, -eta)
    log_1mp = -np.logaddexp(0.0, eta)
    return -2.0 * float(np.sum(w * (y * log_p + (1.0 - y) * log_1mp)))


def fit_logistic(
    x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None
) -> LogisticFit:
    """Binomial logistic regression by iteratively reweighted least squares.

    Newton steps with step-halving on deviance increase; converged when the
    largest score-equation entry falls below 1e-8.  Quasi-separation (every
    member of one class beyond |linear predictor| > 30) sets a flag but is not
    an error.
    """
    x, y, w = _check_xyw(x, y, weights)
    if not np.all((y == 0) | (y == 1)):
        raise FitError("logistic response must be binary 0/1")
    keep = independent_columns(x * np.sqrt(w)[:, None])
    xk = x[:, keep]
    beta = np.zeros(xk.shape[1])
    eta = xk @ beta
    dev = _binom_deviance(eta, y, w)
    converged = False
    it = 0
    for it in range(1, _IRLS_MAX_ITER + 1):
        p = expit(eta)
        score = xk.T @ (w * (y - p))
        if np.max(np.abs(score), initial=0.0) < _IRLS_TOL:
            converged = True
            break
        wt = w * p * (1.0 - p)
        h = xk.T @ (xk * wt[:, None])
        try:
            step = np.linalg.solve(h, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, score, rcond=None)[0]
        # step halving on deviance increase
        scale = 1.0
        for _ in range(30):
            eta_new = xk @ (beta + scale * step)
            dev_new = _binom_deviance(eta_new, y, w)
            if dev_new <= dev + 1e-10:
                break
            scale *= 0.5
        beta = beta + scale * step
        eta = xk @ beta
        dev = _binom_deviance(eta, y, w)

    coef = np.zeros(x.shape[1])
    coef[keep] = beta
    separation = False
    for cls in (0.0, 1.0):
        rows = (y == cls) & (w > 0)
        if not rows.any():  # one-class data is perfectly separated
            separation = True
        elif np.all(np.abs(eta[rows]) > 30.0):
            separation = True
    return LogisticFit(coef=coef, aliased=~keep, converged=converged, separation=separation, n_iter=it)


def fit_multinomial(
    x: np.ndarray,
    y: np.ndarray,
    m: int,
    weights: np.ndarray | None = None,
) -> MultinomialFit:
    """Baseline-category multinomial logistic regression by Newton iteration.

    ``y`` holds level codes 0..m-1 with level 0 the baseline.  Every level must
    be present in the training data.  Reduces to :func:`fit_logistic` when
    m == 2.
    """
    x, y, w = _check_xyw(x, y, weights)
    y = y.astype(int)
    if m < 2:
        raise FitError("multinomial fit needs at least two levels")
    present = np.unique(y[w > 0])
    missing = sorted(set(range(m)) - set(present.tolist()))
    if missing:
        raise FitError(f"level code(s) {missing} absent from training data")

    keep = independent_columns(x * np.sqrt(w)[:, None])
    xk = x[:, keep]
    n, p = xk.shape
    q = m - 1
    beta = np.zeros((p, q))
    ind = np.column_stack([(y == j + 1).astype(float) for j in range(q)])

    def probs(b):
        eta = np.column_stack([np.zeros(n), xk @ b])
        eta -= eta.max(axis=1, keepdims=True)
        e = np.exp(eta)
        return e / e.sum(axis=1, keepdims=True)

    def deviance(b):
        pr = probs(b)
        pi = np.clip(pr[np.arange(n), y], 1e-300, None)
        return -2.0 * float(np.sum(w * np.log(pi)))

    dev = deviance(beta)
    converged = False
    it = 0
    for it in range(1, _IRLS_MAX_ITER + 1):
        pr = probs(beta)[:, 1:]  # (n, q)
        score = (xk.T @ (w[:, None] * (ind - pr))).T.ravel()  # level-major
        if np.max(np.abs(score), initial=0.0) < _IRLS_TOL:
            converged = True
            break
        h = np.zeros((q * p, q * p))
        for j in range(q):
            for l in range(j, q):
                wt = w * pr[:, j] * ((1.0 if j == l else 0.0) - pr[:, l])
                block = xk.T @ (xk * wt[:, None])
                h[j * p:(j + 1) * p, l * p:(l + 1) * p] = block
                if l != j:
                    h[l * p:(l + 1) * p, j * p:(j + 1) * p] = block
        try:
            step = np.linalg.solve(h, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, score, rcond=None)[0]
        step = step.reshape(q, p).T
        scale = 1.0
        for _ in range(30):
            dev_new = deviance(beta + scale * step)
            if dev_new <= dev + 1e-10:
                break
            scale *= 0.5
        beta = beta + scale * step
        dev = deviance(beta)

    coef = np.zeros((x.shape[1], q))
    coef[keep, :] = beta
    eta_all = xk @ beta
    separation = False
    for j in range(m):
        rows = (y == j) & (w > 0)
        if rows.any() and eta_all.size and np.all(np.abs(eta_all[rows]) > 30.0):
            separation = True
    return MultinomialFit(coef=coef, aliased=~keep, m=m, converged=converged, separation=separation, n_iter=it)
