"""L1-penalized logistic regression by coordinate descent.

Minimizes, for each ``lam`` on a decreasing path,

    -(1/W) sum_i w_i [y_i eta_i - log(1 + exp(eta_i))] + lam * sum_j |beta_j|

with ``eta = offset + b0 + x @ beta`` and ``W = sum_i w_i``.  The intercept is
never penalized.  Each outer iteration refreshes a quadratic approximation
(IRLS working response) and runs cyclic coordinate descent on it, first over
the active set and then over every column; the outer loop stops when no
coefficient moves by more than ``tol``.
"""

from __future__ import annotations

import logging
import math

import numba
import numpy as np

from .glm import GlmFit, bernoulli_deviance, fit_logistic

__all__ = ["lasso_path", "fit_logistic_l1", "lambda_max", "default_lambda_grid"]

logger = logging.getLogger(__name__)

MIN_VAR = 1e-5


@numba.njit(cache=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _sweep(X, v, r, beta, b0, cols, lam, xv2, intercept, eta):
    """One coordinate-descent pass over ``cols``; returns (b0, max change)."""
    n = X.shape[0]
    max_change = 0.0
    for c in range(cols.size):
        j = cols[c]
        d2 = xv2[j]
        if d2 <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += v[i] * X[i, j] * r[i]
        z = g + d2 * beta[j]
        if z > lam:
            new = (z - lam) / d2
        elif z < -lam:
            new = (z + lam) / d2
        else:
            new = 0.0
        delta = new - beta[j]
        if delta != 0.0:
            for i in range(n):
                r[i] -= delta * X[i, j]
                eta[i] += delta * X[i, j]
            beta[j] = new
            ch = abs(delta)
            if ch > max_change:
                max_change = ch
    if intercept:
        sv = 0.0
        sr = 0.0
        for i in range(n):
            sv += v[i]
            sr += v[i] * r[i]
        if sv > 0.0:
            d0 = sr / sv
            for i in range(n):
                r[i] -= d0
                eta[i] += d0
            b0 += d0
            if abs(d0) > max_change:
                max_change = abs(d0)
    return b0, max_change


@numba.njit(cache=True)
def _solve_one(X, y, w, eta, beta, b0, lam, intercept, usable, tol, max_outer, max_inner):
    """Fit at a single ``lam`` from a warm start.  Returns (b0, outer iterations, converged)."""
    n, p = X.shape
    v = np.empty(n)
    r = np.empty(n)
    xv2 = np.zeros(p)
    all_cols = np.flatnonzero(usable)
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        beta_old = beta.copy()
        b0_old = b0
        for i in range(n):
            mu = _expit(eta[i])
            var = mu * (1.0 - mu)
            if var < MIN_VAR:
                var = MIN_VAR
            v[i] = w[i] * var
            r[i] = (y[i] - mu) / var
        for c in range(all_cols.size):
            j = all_cols[c]
            s = 0.0
            for i in range(n):
                s += v[i] * X[i, j] * X[i, j]
            xv2[j] = s
        for _ in range(max_inner):
            active = np.flatnonzero(beta != 0.0)
            inner_tol = tol
            for _k in range(max_inner):
                b0, ch = _sweep(X, v, r, beta, b0, active, lam, xv2, intercept, eta)
                if ch < inner_tol:
                    break
            b0, ch = _sweep(X, v, r, beta, b0, all_cols, lam, xv2, intercept, eta)
            if ch < inner_tol:
                break
        change = abs(b0 - b0_old)
        for j in range(p):
            d = abs(beta[j] - beta_old[j])
            if d > change:
                change = d
        if change < tol:
            converged = True
            break
    return b0, outer, converged


def _expit_vec(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _standardize(x, w, intercept):
    wn = w / w.sum()
    if intercept:
        center = wn @ x
    else:
        center = np.zeros(x.shape[1])
    xc = x - center
    scale = np.sqrt(wn @ (xc * xc))
    usable = scale > 1e-12 * (1.0 + np.abs(center))
    scale = np.where(usable, scale, 1.0)
    return xc / scale, center, scale, usable


def _null_intercept(y, w, offset, intercept):
    if not intercept:
        return 0.0
    fit = fit_logistic(y, None, offset=offset, intercept=True, weights=w)
    return float(fit.coefficients[0])


def lambda_max(y, x, offset=None, weights=None, intercept=True, standardize=True):
    """Smallest penalty at which every penalized coefficient is zero."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(y.size) if offset is None else np.asarray(offset, dtype=float)
    if standardize:
        xs, _, _, usable = _standardize(x, w, intercept)
    else:
        xs, usable = x, np.ones(x.shape[1], dtype=bool)
    b0 = _null_intercept(y, w, off, intercept)
    mu = 1.0 / (1.0 + np.exp(-(off + b0)))
    grad = np.abs(xs.T @ (w * (y - mu))) / w.sum()
    grad[~usable] = 0.0
    return float(grad.max()) if grad.size else 0.0


def default_lambda_grid(lam_max, n_lambda=50, ratio=1e-4):
    """Geometric grid from ``lam_max`` down to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.array([0.0])
    return np.geomspace(lam_max, ratio * lam_max, n_lambda)


class _Path:
    """Warm-started solver state for one dataset."""

    def __init__(self, y, x, offset, weights, intercept, standardize, tol, max_outer, max_inner):
        n = y.size
        self.y = np.ascontiguousarray(y, dtype=float)
        self.w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        self.off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
        self.wn = np.ascontiguousarray(self.w / self.w.sum())
        x = np.asarray(x, dtype=float).reshape(n, -1)
        if standardize:
            xs, self.center, self.scale, self.usable = _standardize(x, self.w, intercept)
        else:
            xs, self.center, self.scale = x, np.zeros(x.shape[1]), np.ones(x.shape[1])
            self.usable = np.any(x != 0, axis=0)
        self.xs = np.asfortranarray(xs)
        self.intercept = intercept
        self.lam_prev = None
        self.tol, self.max_outer, self.max_inner = tol, max_outer, max_inner
        self.beta = np.zeros(self.xs.shape[1])
        self.b0 = _null_intercept(self.y, self.w, self.off, intercept)
        self.dev_null = bernoulli_deviance(self.y, self.off + self.b0, self.wn)

    def step(self, lam):
        """Solve at ``lam``; returns (slope, intercept, converged, deviance) on the original scale.

        Columns failing the sequential strong rule are left out of the
        coordinate sweeps and readmitted if they violate the KKT conditions.
        """
        eta = self.off + self.b0 + self.xs @ self.beta
        grad = np.abs(self.xs.T @ (self.wn * (self.y - _expit_vec(eta))))
        lam_prev = self.lam_prev if self.lam_prev is not None else lam
        strong = self.usable & ((grad >= 2.0 * lam - lam_prev) | (self.beta != 0.0))
        while True:
            eta = np.ascontiguousarray(self.off + self.b0 + self.xs @ self.beta)
            self.b0, _, ok = _solve_one(
                self.xs, self.y, self.wn, eta, self.beta, self.b0, float(lam), self.intercept,
                strong, self.tol, self.max_outer, self.max_inner,
            )
            grad = np.abs(self.xs.T @ (self.wn * (self.y - _expit_vec(eta))))
            violators = self.usable & ~strong & (grad > lam * (1.0 + 1e-9) + 1e-12)
            if not violators.any():
                break
            strong |= violators
        self.lam_prev = lam
        slope = self.beta / self.scale
        return slope, self.b0 - float(self.center @ slope), ok, bernoulli_deviance(self.y, eta, self.wn)


def lasso_path(
    y,
    x,
    lambdas,
    offset=None,
    weights=None,
    intercept=True,
    standardize=True,
    tol=1e-7,
    max_outer=100,
    max_inner=1000,
    early_stop=True,
):
    """Solve the penalized problem along ``lambdas`` (decreasing) with warm starts.

    Returns
    -------
    dict
        ``coef`` (L, p) and ``intercept`` (L,) on the original column scale,
        ``lambdas`` actually fitted (with ``early_stop`` the path ends once
        the deviance stops improving, as glmnet does), ``converged`` (L,) and
        ``usable`` (columns with nonzero variance).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    state = _Path(y, x, offset, weights, intercept, standardize, tol, max_outer, max_inner)
    if np.any(~state.usable):
        logger.warning("%d degenerate column(s) fixed at zero", int(np.sum(~state.usable)))
    coefs, b0s, conv, fitted = [], [], [], []
    prev_dev = state.dev_null
    for k, lam in enumerate(np.asarray(lambdas, dtype=float)):
        slope, b0, ok, dev = state.step(lam)
        coefs.append(slope)
        b0s.append(b0)
        conv.append(ok)
        fitted.append(lam)
        if early_stop and k >= 5 and state.dev_null > 0:
            if 1.0 - dev / state.dev_null > 0.999 or (prev_dev - dev) < 1e-5 * state.dev_null:
                break
        prev_dev = dev
    return {
        "coef": np.array(coefs).reshape(len(coefs), state.xs.shape[1]),
        "intercept": np.array(b0s),
        "lambdas": np.array(fitted),
        "converged": np.array(conv, dtype=bool),
        "usable": state.usable,
    }


def fit_logistic_l1(
    y,
    x,
    lambda_grid=None,
    folds=5,
    offset=None,
    weights=None,
    intercept=True,
    standardize=True,
    seed=0,
    tol=1e-7,
    patience=5,
):
    """L1-penalized logistic regression with the penalty chosen by K-fold CV.

    The fold paths advance in lockstep down the grid and stop once the
    summed held-out deviance has failed to improve on its minimum for
    ``patience`` consecutive penalties; the small-penalty end of the grid,
    where fits are slowest and most overfit, is then never computed.

    Parameters
    ----------
    lambda_grid : array_like, optional
        Candidate penalties; defaults to 50 geometric points from
        :func:`lambda_max` down to ``1e-4`` times it.
    folds : int
        Number of CV folds (>= 2).  Ignored when the grid has one value.
    seed : int
        Seed for the fold assignment.
    patience : int or None
        ``None`` evaluates the whole grid.

    Returns
    -------
    GlmFit
        With ``regularization = ("l1", lam)`` and CV details in ``info``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.size
    x = np.asarray(x, dtype=float).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if lambda_grid is None:
        grid = default_lambda_grid(lambda_max(y, x, off, w, intercept, standardize))
    else:
        grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
        if grid.size == 0 or np.any(grid < 0):
            raise ValueError("lambda_grid must be a nonempty set of nonnegative values")
    cv_dev = None
    if grid.size == 1:
        best = 0
    else:
        fold_id = np.random.default_rng(seed).permutation(n) % folds
        states, tests = [], []
        for k in range(folds):
            test = fold_id == k
            if test.any() and (~test).any():
                states.append(_Path(y[~test], x[~test], off[~test], w[~test], intercept, standardize, tol, 100, 1000))
                tests.append(test)
        cv = []
        for lam in grid:
            total = 0.0
            for state, test in zip(states, tests):
                slope, b0, _, _ = state.step(lam)
                total += bernoulli_deviance(y[test], off[test] + b0 + x[test] @ slope, w[test])
            cv.append(total)
            if patience is not None and len(cv) - 1 - int(np.argmin(cv)) >= patience:
                break
        cv_dev = np.array(cv)
        best = int(np.argmin(cv_dev))
    state = _Path(y, x, off, w, intercept, standardize, tol, 100, 1000)
    if np.any(~state.usable):
        logger.warning("%d degenerate column(s) fixed at zero", int(np.sum(~state.usable)))
    for lam in grid[: best + 1]:
        slope, b0, ok, _ = state.step(lam)
    coefficients = np.concatenate([[b0], slope]) if intercept else slope
    return GlmFit(
        coefficients,
        intercept,
        bool(ok),
        best + 1,
        regularization=("l1", float(grid[best])),
        info={"lambdas": grid, "cv_deviance": cv_dev},
    )
