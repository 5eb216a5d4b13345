"""Survival products, the efficient influence function, AIPW and Kaplan-Meier."""

from __future__ import annotations

import math

import numpy as np

from ..survdata import indicators
from .report import EstimateReport, wald_interval

__all__ = [
    "survival_products",
    "telescoping_terms",
    "eif_evaluate",
    "eif_weights",
    "aipw",
    "kaplan_meier",
]


def survival_products(nf):
    """Return ``(S, G)``, each of shape (n, tau + 1).

    ``S[:, t] = prod_{m=1}^t (1 - h(m))`` and
    ``G[:, t] = prod_{m=0}^{t-1} (1 - g_R(m))``, with ``S[:, 0] = G[:, 0] = 1``.
    """
    return nf.survival(), nf.censoring()


def telescoping_terms(a, b):
    """Summands of ``prod(1 - a) - prod(1 - b)`` written as a telescoping sum.

    Term ``t`` is ``prod_{k<t}(1 - a_k) (b_t - a_t) prod_{k>t}(1 - b_k)``;
    the terms add up to the difference of the two products.  Works along the
    last axis.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ones = np.ones(a.shape[:-1] + (1,))
    head = np.concatenate([ones, np.cumprod(1.0 - a, axis=-1)[..., :-1]], axis=-1)
    tail = np.concatenate([np.cumprod((1.0 - b)[..., ::-1], axis=-1)[..., ::-1][..., 1:], ones], axis=-1)
    return head * (b - a) * tail


def eif_weights(nf):
    """Clever covariate ``Z(t) = [S(tau)/S(t)] / (g_A G(t))`` for ``t = 1..tau``.

    Column ``t - 1`` holds time ``t``.  ``S(tau)/S(t)`` is a partial product.
    """
    ratio = nf.survival_ratio()[:, 1:]
    G = nf.censoring()[:, 1:]
    return ratio / (nf.g_a[:, None] * G)


def eif_evaluate(ds, nf, theta, ind=None):
    """Efficient influence function of ``E[S(tau, W)]`` for each subject.

    ``D = -sum_{t=1}^tau A I_t Z(t) (L_t - h(t)) + S(tau) - theta`` with ``A``
    the target-arm indicator.
    """
    ind = indicators(ds) if ind is None else ind
    tau = nf.tau
    at_risk = (ds.a == 1)[:, None] * ind.i[:, 1 : tau + 1]
    resid = ind.l[:, 1 : tau + 1] - nf.h
    s_tau = nf.survival_ratio()[:, 0]
    return -np.sum(at_risk * eif_weights(nf) * resid, axis=1) + s_tau - theta


def aipw(ds, nf, alpha=0.05, ind=None):
    """Augmented IPW estimator: the root of the empirical EIF equation.

    ``D`` is affine in ``theta`` with slope -1, so the root is the mean of
    ``D`` evaluated at ``theta = 0``.  Not constrained to ``[0, 1]``.
    """
    d0 = eif_evaluate(ds, nf, 0.0, ind)
    theta = float(np.mean(d0))
    return EstimateReport.from_influence("aipw", theta, d0 - theta, alpha, iterations=0, converged=True)


def kaplan_meier(ds, arm=1, alpha=0.05):
    """Product-limit survival at ``tau`` within ``arm`` with Greenwood SE.

    The risk set at ``t`` is ``{T~ >= t}``; censoring at ``t`` happens after
    the event draw at ``t``.  If the risk set empties before ``tau`` the
    last value is carried forward and ``diagnostics["empty_risk_set"]`` is
    set.
    """
    keep = ds.a == arm
    if not keep.any():
        raise ValueError(f"no subjects in arm {arm}")
    tt = ds.t_tilde[keep]
    ev = ds.delta[keep] == 1
    surv = 1.0
    gw = 0.0
    empty = False
    table = []
    for t in range(1, ds.tau + 1):
        n_t = int(np.sum(tt >= t))
        d_t = int(np.sum((tt == t) & ev))
        table.append([t, n_t, d_t])
        if n_t == 0:
            empty = True
            continue
        surv *= 1.0 - d_t / n_t
        if d_t < n_t:
            gw += d_t / (n_t * (n_t - d_t))
    se = 0.0 if surv == 0.0 else surv * math.sqrt(gw)
    n = int(keep.sum())
    return EstimateReport(
        "km",
        float(surv),
        float(se),
        wald_interval(float(surv), float(se), alpha),
        alpha,
        float(n * se * se),
        n,
        diagnostics={"arm": int(arm), "empty_risk_set": empty, "risk_table": table},
    )
