"""Targeted estimators: drift-corrected TMLE, classic TMLE and targeted IPW.

The auxiliary regressions are smoothed on the initial nuisance fit, and
the clever covariates ``H_A``, ``H_R(k)``, ``H_L(t)`` and ``Z(t)`` define
logistic submodels along which the nuisance fit is tilted until the tilts
vanish.  By default ``H_A``, ``H_R`` and ``H_L`` are evaluated once, at the
initial fit, and ``Z`` at every tilted fit.  The tilts solve the empirical
score equations of the drift representation (``D_A``, ``D_R``, ``D_L``)
together with the efficient influence function equation, which is what
makes the Wald interval built from ``D - D_L - D_R - D_A`` valid when only
one of ``g`` and ``h`` is consistent.

Ratios of like products that are at most one (``S(tau)/S(t)``,
``U_t(t)/U_t(k)``, ...) are evaluated as partial products.  Denominators
that can push a ratio above one are floored at ``FLOOR``, once per ratio
(for instance the whole ``g_A G(t)``) so that products of small fitted
probabilities cannot compound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from ..nuisance.glm import fit_logistic
from ..smoothing import SmoothingConfig, build_auxiliary
from ..survdata import indicators
from .basic import eif_evaluate, eif_weights
from .report import EstimateReport

__all__ = [
    "FLOOR",
    "HCovariates",
    "TiltCoefficients",
    "stopping_tolerance",
    "h_covariates",
    "score_components",
    "drift_plugin",
    "tilt_step",
    "dtmle",
    "tmle_classic",
    "ipw",
    "run_targeting",
]

logger = logging.getLogger(__name__)

FLOOR = 1e-3
GUARD = 1e-9
NEGLIGIBLE = 1e-10
DEFAULT_MAX_ITER = 50


def stopping_tolerance(n):
    """Iteration stops once every tilting coefficient is below ``1e-4 n^{-3/5}``."""
    return 1e-4 * n ** (-0.6)


@dataclass(frozen=True, eq=False)
class HCovariates:
    """Clever covariates per subject; ``None`` marks a submodel left out.

    ``h_r[:, k]`` is ``H_R(k)`` for ``k = 0..tau-1``; ``h_l[:, t-1]`` and
    ``z[:, t-1]`` are ``H_L(t)`` and ``Z(t)`` for ``t = 1..tau``.
    """

    h_a: np.ndarray | None
    h_r: np.ndarray | None
    h_l: np.ndarray | None
    z: np.ndarray | None


@dataclass(frozen=True)
class TiltCoefficients:
    eps_a: float = 0.0
    eps_r: float = 0.0
    eps_l1: float = 0.0
    eps_l2: float = 0.0

    def max_abs(self):
        return max(abs(self.eps_a), abs(self.eps_r), abs(self.eps_l1), abs(self.eps_l2))

    def as_list(self):
        return [self.eps_a, self.eps_r, self.eps_l1, self.eps_l2]


def _span(one_minus, a, b):
    """``prod_{m=a}^{b} one_minus[:, m]``; 1 when ``a > b``."""
    if a > b:
        return np.ones(one_minus.shape[0])
    return np.prod(one_minus[:, a : b + 1], axis=1)


def _reclip(p, bounds):
    """Clip tilted probabilities to ``bounds``, kept ``GUARD`` off 0 and 1."""
    lo, hi = bounds
    return np.clip(p, max(lo, GUARD), min(hi, 1.0 - GUARD))


def _floor(x):
    return np.maximum(x, FLOOR)


def h_covariates(nf, aux, parts=("a", "r", "l")):
    """Evaluate ``H_A``, ``H_R``, ``H_L`` and ``Z`` from a nuisance and auxiliary fit.

    Parameters
    ----------
    nf : NuisanceFit
    aux : AuxiliaryFit or None
        Smoothed auxiliary quantities for the same subjects; may be ``None``
        when ``parts`` is empty.
    parts : iterable of {"a", "r", "l"}
        Covariates to compute; ``Z`` is always computed.
    """
    n, tau = nf.n, nf.tau
    z = eif_weights(nf)
    parts = set(parts)
    if not parts:
        return HCovariates(None, None, None, z)
    G = nf.censoring()
    one_h = np.ones((n, tau + 1))
    one_h[:, 1:] = 1.0 - nf.h
    one_r = np.ones((n, tau + 1))
    one_r[:, :tau] = 1.0 - nf.g_r
    e_l = aux.e_l

    h_a = h_r = h_l = None
    if "a" in parts:
        h_a = np.zeros(n)
        for t in range(1, tau + 1):
            h_a += aux.U[:, t, t] * aux.V[:, t, t - 1] / _floor(nf.g_a * G[:, t]) * e_l[:, t]
    if "r" in parts:
        h_r = np.zeros((n, tau))
        for k in range(tau):
            acc = np.zeros(n)
            for t in range(k + 1, tau + 1):
                v_ratio = _span(1.0 - aux.v[:, t, :], k + 1, t - 1)
                u_ratio = _span(1.0 - aux.u[:, t, :], k, t - 1)
                # G(k) / (G(k+1) G(t)) = 1 / ((1 - g_R(k)) G(t))
                den = nf.g_a * one_r[:, k] * G[:, t]
                acc += v_ratio * u_ratio / _floor(den) * e_l[:, t]
            h_r[:, k] = acc
    if "l" in parts:
        S = nf.survival()
        h_l = np.zeros((n, tau))
        for t in range(1, tau + 1):
            acc = np.zeros(n)
            for k in range(t):
                den = _span(1.0 - aux.b[:, k, :], k + 1, t - 1) * _span(1.0 - aux.d[:, k, :], k, t - 1)
                acc += _span(one_h, k + 1, t - 1) / _floor(den) * aux.e_r[:, k]
            den = aux.q * aux.D[:, t, t] * aux.B[:, t, t - 1]
            acc += aux.e_a * S[:, t - 1] / _floor(den)
            h_l[:, t - 1] = _span(one_h, t + 1, tau) * acc
    return HCovariates(h_a, h_r, h_l, z)


def score_components(ds, nf, H, ind=None):
    """Per-subject ``(D_A, D_R, D_L)``; a missing covariate gives zeros."""
    ind = indicators(ds) if ind is None else ind
    tau = nf.tau
    treated = (ds.a == 1).astype(float)
    n = ds.n
    d_a = np.zeros(n) if H.h_a is None else -H.h_a * (ds.a - nf.g_a)
    if H.h_r is None:
        d_r = np.zeros(n)
    else:
        rows = treated[:, None] * ind.j[:, :tau]
        d_r = -np.sum(rows * H.h_r * (ind.r[:, :tau] - nf.g_r), axis=1)
    if H.h_l is None:
        d_l = np.zeros(n)
    else:
        rows = treated[:, None] * ind.i[:, 1 : tau + 1]
        d_l = -np.sum(rows * H.h_l * (ind.l[:, 1 : tau + 1] - nf.h), axis=1)
    return d_a, d_r, d_l


def drift_plugin(ds, nf, H, ind=None):
    """Plug-in drift estimate ``P_n (D_A + D_R + D_L)``.

    A diagnostic only: subtracting it from an estimate does not by itself
    give a doubly robust estimator.
    """
    d_a, d_r, d_l = score_components(ds, nf, H, ind)
    return float(np.mean(d_a + d_r + d_l))


def _fit_tilt(y, x, p_offset):
    """No-intercept offset logistic fit of ``y`` on the columns of ``x``.

    Returns ``(eps, status)`` with status ``"ok"``, ``"degenerate"`` (no
    usable covariate or a constant outcome, so ``eps = 0``; a column whose
    largest magnitude is below ``NEGLIGIBLE`` counts as zero) or ``"failed"``
    (no convergence, ``eps = 0``).  Rows whose offset probability is exactly
    0 or 1 carry no information about ``eps`` and are dropped.
    """
    k = x.shape[1]
    eps = np.zeros(k)
    keep = (p_offset > 0.0) & (p_offset < 1.0)
    y, x, p_offset = y[keep], x[keep], p_offset[keep]
    scale = np.max(np.abs(x), axis=0) if y.size else np.zeros(k)
    cols = np.flatnonzero(scale > NEGLIGIBLE)
    if cols.size == 0 or y.size == 0 or np.all(y == y[0]):
        return eps, "degenerate"
    # unit-scale columns keep the Newton system well conditioned
    fit = fit_logistic(y, x[:, cols] / scale[cols], offset=logit(p_offset), intercept=False)
    if not fit.converged:
        return eps, "failed"
    eps[cols] = fit.coefficients / scale[cols]
    return eps, "ok"


def tilt_step(ds, nf, H, ind=None):
    """Fit the logistic tilting submodels and return the updated fit.

    ``A`` is regressed on ``H_A`` over all subjects, ``R_t`` on ``H_R(t)``
    over rows with ``J_t = A = 1``, and ``L_t`` on ``(H_L(t), Z(t))`` over
    rows with ``I_t = A = 1``, each with offset ``logit`` of the current
    probability and no intercept.  Missing covariates drop out of their
    submodel.  Updated probabilities are re-clipped to the bounds of ``nf``
    (and kept ``GUARD`` off 0 and 1), so a large covariate cannot drive one
    subject's ``G`` or ``S`` to zero and its ``Z`` to overflow.  The next
    iteration fits at the clipped values, so a vanishing tilt still means
    the score equations hold at the returned fit.

    Returns
    -------
    (TiltCoefficients, NuisanceFit, dict)
        The dict maps submodel name to its fit status.
    """
    ind = indicators(ds) if ind is None else ind
    tau = nf.tau
    treated = ds.a == 1
    status = {}
    g_a, g_r, h = nf.g_a, nf.g_r, nf.h
    eps_a = eps_r = eps_l1 = eps_l2 = 0.0

    if H.h_a is not None:
        (eps_a,), status["a"] = _fit_tilt(ds.a.astype(float), H.h_a[:, None], nf.g_a)
        if eps_a != 0.0:
            g_a = _reclip(expit(logit(nf.g_a) + eps_a * H.h_a), nf.clip_bounds)

    if H.h_r is not None:
        subj, tt = np.nonzero(treated[:, None] & (ind.j[:, :tau] == 1))
        (eps_r,), status["r"] = _fit_tilt(
            ind.r[subj, tt].astype(float), H.h_r[subj, tt][:, None], nf.g_r[subj, tt]
        )
        if eps_r != 0.0:
            g_r = _reclip(expit(logit(nf.g_r) + eps_r * H.h_r), nf.clip_bounds)

    cov = [c for c in (H.h_l, H.z) if c is not None]
    if cov:
        subj, tt = np.nonzero(treated[:, None] & (ind.i[:, 1 : tau + 1] == 1))
        x = np.column_stack([c[subj, tt] for c in cov])
        eps, status["l"] = _fit_tilt(ind.l[subj, tt + 1].astype(float), x, nf.h[subj, tt])
        if H.h_l is not None:
            eps_l1 = float(eps[0])
        if H.z is not None:
            eps_l2 = float(eps[-1])
        lin = logit(nf.h)
        if H.h_l is not None:
            lin = lin + eps_l1 * H.h_l
        if H.z is not None:
            lin = lin + eps_l2 * H.z
        if eps_l1 != 0.0 or eps_l2 != 0.0:
            h = _reclip(expit(lin), nf.hazard_bounds)

    coef = TiltCoefficients(float(eps_a), float(eps_r), eps_l1, eps_l2)
    return coef, nf.replace(g_a, g_r, h), status


REFRESH_MODES = ("freeze", "refit", "refit-bandwidth")


def _default_builder(ds, smoothing, refresh):
    cfg = SmoothingConfig() if smoothing is None else smoothing

    def build(iteration, nf, previous):
        keep = previous.bandwidths if (refresh == "refit-bandwidth" and previous is not None) else None
        return build_auxiliary(ds, nf, cfg, bandwidths=keep)

    return build


def run_targeting(
    ds,
    nf_initial,
    parts=("a", "r", "l"),
    use_z=True,
    aux_builder=None,
    smoothing=None,
    max_iter=DEFAULT_MAX_ITER,
    tol=None,
    ind=None,
    refresh="freeze",
):
    """Iterate covariate evaluation and tilting until the tilts vanish.

    Parameters
    ----------
    parts : iterable of {"a", "r", "l"}
        Which ``H`` covariates enter their submodels.
    use_z : bool
        Include ``Z`` in the event-hazard submodel.
    aux_builder : callable, optional
        ``aux_builder(iteration, nf, previous_aux) -> AuxiliaryFit``
        (1-based iteration); defaults to :func:`build_auxiliary` on the full
        sample.
    tol : float, optional
        Stopping threshold; defaults to :func:`stopping_tolerance`.  With
        ``tol=0`` exactly ``max_iter`` iterations run.
    refresh : {"freeze", "refit", "refit-bandwidth"}
        ``"freeze"`` smooths the auxiliary regressions once and evaluates
        ``H_A``, ``H_R`` and ``H_L`` once, all on the initial fit; only
        ``Z`` is re-evaluated at each tilted fit.  ``H_A`` and ``H_R`` scale
        like ``1 / (g_A G)`` and ``H_L`` depends on ``h`` through partial
        survival products, so re-evaluating them at the tilted fit feeds
        each tilt back into its own covariate and can leave the iteration
        cycling.  ``"refit"`` redoes the smoothing (with bandwidth
        selection) and the covariates every iteration, and
        ``"refit-bandwidth"`` does the same with the first iteration's
        bandwidths.

    Returns
    -------
    dict
        ``nf`` (final fit), ``H`` (last covariates), ``iterations``,
        ``converged``, ``trace`` (per-iteration records), ``tol``.
    """
    if refresh not in REFRESH_MODES:
        raise ValueError(f"refresh must be one of {REFRESH_MODES}")
    ind = indicators(ds) if ind is None else ind
    tol = stopping_tolerance(ds.n) if tol is None else tol
    parts = tuple(parts)
    builder = aux_builder if aux_builder is not None else _default_builder(ds, smoothing, refresh)
    nf = nf_initial
    trace = []
    converged = False
    H = None
    aux = None
    it = 0
    for it in range(1, max_iter + 1):
        if parts and (aux is None or refresh != "freeze"):
            aux = builder(it, nf, aux)
        if refresh == "freeze" and H is not None:
            H = HCovariates(H.h_a, H.h_r, H.h_l, eif_weights(nf))
        else:
            H = h_covariates(nf, aux, parts)
        if not use_z:
            H = HCovariates(H.h_a, H.h_r, H.h_l, None)
        drift = drift_plugin(ds, nf, H, ind)
        eps, nf, status = tilt_step(ds, nf, H, ind)
        last_ok = all(s != "failed" for s in status.values())
        trace.append(
            {
                "iteration": it,
                "eps": eps.as_list(),
                "drift": drift,
                "status": status,
                "aux_warnings": list(aux.warnings) if (aux is not None and it == 1) else [],
            }
        )
        if eps.max_abs() < tol:
            converged = last_ok
            break
    return {"nf": nf, "H": H, "iterations": it, "converged": converged, "trace": trace, "tol": tol}


def _finish(method, ds, state, alpha, ind, subtract_scores):
    nf = state["nf"]
    theta = float(np.mean(nf.survival_ratio()[:, 0]))
    d = eif_evaluate(ds, nf, theta, ind)
    d_a, d_r, d_l = score_components(ds, nf, state["H"], ind)
    infl = d - d_a - d_r - d_l if subtract_scores else d
    diagnostics = {
        "tol": state["tol"],
        "trace": state["trace"],
        "mean_eif": float(np.mean(d)),
        "mean_scores": [float(np.mean(d_a)), float(np.mean(d_r)), float(np.mean(d_l))],
    }
    if not state["converged"]:
        logger.warning("%s did not converge in %d iterations", method, state["iterations"])
    return EstimateReport.from_influence(
        method,
        theta,
        infl,
        alpha,
        iterations=state["iterations"],
        converged=state["converged"],
        diagnostics=diagnostics,
    )


def dtmle(
    ds,
    nf_initial,
    smoothing=None,
    max_iter=DEFAULT_MAX_ITER,
    alpha=0.05,
    tol=None,
    aux_builder=None,
    refresh="freeze",
):
    """Drift-corrected TMLE of ``E[S(tau, W)]`` for the arm coded ``a = 1``.

    The estimate is the plug-in mean of ``prod_{m<=tau}(1 - h~(m))`` at the
    final tilted hazard; the variance is the empirical variance of
    ``D - D_L - D_R - D_A`` at the final fit.  See :func:`run_targeting`
    for ``refresh``.
    """
    ind = indicators(ds)
    state = run_targeting(
        ds, nf_initial, ("a", "r", "l"), True, aux_builder, smoothing, max_iter, tol, ind, refresh
    )
    return _finish("dtmle", ds, state, alpha, ind, True)


def tmle_classic(ds, nf_initial, max_iter=DEFAULT_MAX_ITER, alpha=0.05, tol=None):
    """TMLE tilting only the hazard along ``Z``; SE from the variance of ``D`` alone."""
    ind = indicators(ds)
    state = run_targeting(ds, nf_initial, (), True, None, None, max_iter, tol, ind)
    return _finish("tmle", ds, state, alpha, ind, False)


def ipw(
    ds,
    nf,
    smoothing=None,
    max_iter=DEFAULT_MAX_ITER,
    alpha=0.05,
    tol=None,
    aux_builder=None,
    refresh="freeze",
):
    """Targeted inverse probability weighting.

    Runs the drift-corrected loop with the hazard replaced by 1 and without
    the event-hazard submodel, so only ``g_A`` and ``g_R`` are tilted.  With
    ``h = 1`` the influence function equation has the root
    ``mean(A J_tau / (g_A G(tau)))``, the weighting estimator computed here
    from the final tilted ``g``.  The variance uses ``D - D_R - D_A``.
    """
    ind = indicators(ds)
    surrogate = type(nf)(nf.g_a, nf.g_r, np.ones_like(nf.h), nf.clip_bounds, (0.0, 1.0))
    state = run_targeting(ds, surrogate, ("a", "r"), False, aux_builder, smoothing, max_iter, tol, ind, refresh)
    final = state["nf"]
    d0 = eif_evaluate(ds, final, 0.0, ind)
    theta = float(np.mean(d0))
    d_a, d_r, _ = score_components(ds, final, state["H"], ind)
    infl = d0 - theta - d_a - d_r
    diagnostics = {
        "tol": state["tol"],
        "trace": state["trace"],
        "mean_scores": [float(np.mean(d_a)), float(np.mean(d_r)), 0.0],
        "max_weight": float(np.max(1.0 / (final.g_a * final.censoring()[:, -1]))),
    }
    return EstimateReport.from_influence(
        "ipw", theta, infl, alpha, iterations=state["iterations"], converged=state["converged"],
        diagnostics=diagnostics,
    )
