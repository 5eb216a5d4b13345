"""Logistic regression by iteratively reweighted least squares."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

__all__ = ["GlmFit", "fit_logistic", "bernoulli_deviance"]

logger = logging.getLogger(__name__)

SEPARATION_ETA = 30.0


@dataclass(frozen=True)
class GlmFit:
    """Fitted logistic model.

    ``coefficients`` holds the intercept first when ``intercept`` is true,
    followed by one entry per design column.  ``regularization`` is ``None``
    or ``("l1", lambda)``.
    """

    coefficients: np.ndarray
    intercept: bool
    converged: bool
    iterations: int
    regularization: tuple | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).copy()
        if not np.all(np.isfinite(coef)):
            raise ValueError("non-finite coefficients")
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)

    @property
    def slope(self):
        return self.coefficients[1:] if self.intercept else self.coefficients

    @property
    def intercept_value(self):
        return float(self.coefficients[0]) if self.intercept else 0.0

    def linear_predictor(self, x, offset=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            x = x.reshape(-1, self.slope.size)
        eta = self.intercept_value + x @ self.slope
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, x, offset=None):
        return expit(self.linear_predictor(x, offset))

    def to_dict(self):
        reg = None if self.regularization is None else [self.regularization[0], float(self.regularization[1])]
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "intercept": bool(self.intercept),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "regularization": reg,
        }

    @classmethod
    def from_dict(cls, data):
        reg = data.get("regularization")
        return cls(
            np.asarray(data["coefficients"], dtype=float),
            bool(data["intercept"]),
            bool(data["converged"]),
            int(data["iterations"]),
            None if reg is None else (reg[0], float(reg[1])),
        )


def bernoulli_deviance(y, eta, weights=None):
    """Weighted Bernoulli deviance ``-2 sum w [y log p + (1-y) log(1-p)]``."""
    ll = y * log_expit(eta) + (1.0 - y) * log_expit(-eta)
    if weights is None:
        return -2.0 * float(np.sum(ll))
    return -2.0 * float(np.sum(weights * ll))


def _design(x, intercept, n):
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    if intercept:
        x = np.column_stack([np.ones(n), x])
    return x


def _separated(eta, y):
    pos, neg = y > 0.5, y < 0.5
    return (pos.any() and np.all(eta[pos] > SEPARATION_ETA)) or (
        neg.any() and np.all(eta[neg] < -SEPARATION_ETA)
    )


def fit_logistic(y, x=None, offset=None, intercept=True, weights=None, max_iter=100, tol=1e-8):
    """Maximum likelihood logistic regression with an optional offset.

    Maximizes ``sum_i w_i [y_i eta_i - log(1 + exp(eta_i))]`` with
    ``eta = offset + b0 + x @ beta`` by Newton-Raphson (IRLS) with step
    halving.

    Parameters
    ----------
    y : array_like, shape (n,)
        Binary (or fractional) responses.
    x : array_like, shape (n, p) or None
        Design columns; may have zero columns.
    offset : array_like, shape (n,), optional
        Known part of the linear predictor.
    intercept : bool
        Include a free intercept.
    weights : array_like, shape (n,), optional
        Nonnegative case weights.

    Returns
    -------
    GlmFit
        ``converged`` is false when the iteration limit is hit or separation
        is detected (all of one class pushed beyond ``|eta| > 30``); the
        coefficients are then the last stable iterate.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.size
    if n == 0:
        raise ValueError("fit_logistic needs at least one row")
    X = _design(x, intercept, n)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    p = X.shape[1]
    beta = np.zeros(p)
    if p == 0:
        return GlmFit(beta, intercept, True, 0)
    if intercept:
        ybar = np.clip(np.average(y, weights=w) if w.sum() > 0 else 0.5, 1e-6, 1 - 1e-6)
        if offset is None:
            beta[0] = np.log(ybar / (1 - ybar))
    eta = off + X @ beta
    dev = bernoulli_deviance(y, eta, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        v = w * mu * (1 - mu)
        grad = X.T @ (w * (y - mu))
        info = (X * v[:, None]).T @ X
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            eta_c = off + X @ cand
            dev_c = bernoulli_deviance(y, eta_c, w)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12 * (1 + abs(dev)):
                break
            scale *= 0.5
        else:
            converged = bool(np.max(np.abs(step)) < tol)
            break
        if _separated(eta_c, y):
            logger.debug("separation detected after %d iterations", it)
            break
        change = np.max(np.abs(cand - beta))
        beta, eta, dev = cand, eta_c, dev_c
        if change < tol:
            converged = True
            break
    return GlmFit(beta, intercept, converged, it, info={"deviance": dev})
