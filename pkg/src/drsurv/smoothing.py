"""Univariate kernel regression and the auxiliary fits built from it.

:func:`kernel_fit` is a Nadaraya-Watson smoother with the Epanechnikov
kernel ``K(u) = 0.75 (1 - u^2)`` on ``|u| <= 1``.  Because the kernel is a
quadratic in ``x_i`` inside its window, the weighted sums

    sum_i w_i K((x_i - x0) / l) y_i,   sum_i w_i K((x_i - x0) / l)

follow from prefix sums of ``w, wx, wx^2, wy, wxy, wx^2y`` over the sorted
training points, so a bandwidth search costs a binary search per held-out
point.  Final predictions sum the kernel over the window explicitly, which
avoids the cancellation the prefix differences can suffer.

:func:`build_auxiliary` regresses the weighted error functions and the
conditional censoring/event probabilities on one-dimensional summaries of
a nuisance fit and assembles their product processes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .survdata import indicators

__all__ = [
    "KernelRegressor",
    "SmoothingConfig",
    "AuxiliaryFit",
    "epanechnikov",
    "bandwidth_grid",
    "kernel_fit",
    "kernel_predict",
    "build_auxiliary",
    "write_auxiliary_csv",
]

logger = logging.getLogger(__name__)

MIN_POINTS = 5
PROB_CLIP = (0.001, 0.999)


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


@numba.njit(cache=True)
def _prefix_window(xs, cum, x0, h):
    lo = np.searchsorted(xs, x0 - h, side="right")
    hi = np.searchsorted(xs, x0 + h, side="left")
    inv = 1.0 / (h * h)
    s0 = cum[hi, 0] - cum[lo, 0]
    s1 = cum[hi, 1] - cum[lo, 1]
    s2 = cum[hi, 2] - cum[lo, 2]
    s3 = cum[hi, 3] - cum[lo, 3]
    s4 = cum[hi, 4] - cum[lo, 4]
    s5 = cum[hi, 5] - cum[lo, 5]
    den = s0 - (s2 - 2.0 * x0 * s1 + x0 * x0 * s0) * inv
    num = s3 - (s5 - 2.0 * x0 * s4 + x0 * x0 * s3) * inv
    return lo, hi, num, den, s0


@numba.njit(cache=True)
def _direct_window(xs, ys, ws, x0, h):
    lo = np.searchsorted(xs, x0 - h, side="right")
    hi = np.searchsorted(xs, x0 + h, side="left")
    num = 0.0
    den = 0.0
    mass = 0.0
    for i in range(lo, hi):
        u = (xs[i] - x0) / h
        k = ws[i] * (1.0 - u * u)
        num += k * ys[i]
        den += k
        mass += ws[i]
    return lo, hi, num, den, mass


@numba.njit(cache=True)
def _predict_sorted(xs, ys, ws, cum, q, l, min_points, direct):
    """Nadaraya-Watson predictions at ``q`` from sorted training points.

    ``direct`` sums the kernel over the window explicitly; otherwise the
    window sums come from the prefix table ``cum``.  When the window around
    ``q`` holds fewer than ``min_points`` points, or no kernel mass, the
    bandwidth doubles until it does (or covers every point), so sparse
    regions never reproduce a single label.  The 0.75 kernel constant
    cancels and is omitted.
    """
    n = xs.size
    out = np.empty(q.size)
    for k in range(q.size):
        x0 = q[k]
        h = l
        while True:
            if direct:
                lo, hi, num, den, mass = _direct_window(xs, ys, ws, x0, h)
            else:
                lo, hi, num, den, mass = _prefix_window(xs, cum, x0, h)
            ok = mass > 0.0 and den > 1e-9 * mass
            if ok and hi - lo >= min_points:
                out[k] = num / den
                break
            if lo == 0 and hi == n:
                if ok:
                    out[k] = num / den
                else:
                    out[k] = cum[n, 3] / cum[n, 0] if cum[n, 0] > 0.0 else 0.0
                break
            h *= 2.0
    return out


@numba.njit(cache=True)
def _cv_risk(xs, ys, ws, cum, q, yq, wq, grid, min_points, lo_y, hi_y):
    """Weighted squared prediction error of held-out points for each bandwidth.

    ``q`` must be sorted, so the window edges only move forward; queries
    whose window carries no kernel mass go through :func:`_predict_sorted`.
    """
    n = xs.size
    risk = np.zeros(grid.size)
    one = np.empty(1)
    for b in range(grid.size):
        h = grid[b]
        inv = 1.0 / (h * h)
        lo = 0
        hi = 0
        for k in range(q.size):
            x0 = q[k]
            while lo < n and xs[lo] <= x0 - h:
                lo += 1
            if hi < lo:
                hi = lo
            while hi < n and xs[hi] < x0 + h:
                hi += 1
            s0 = cum[hi, 0] - cum[lo, 0]
            s1 = cum[hi, 1] - cum[lo, 1]
            s2 = cum[hi, 2] - cum[lo, 2]
            s3 = cum[hi, 3] - cum[lo, 3]
            s4 = cum[hi, 4] - cum[lo, 4]
            s5 = cum[hi, 5] - cum[lo, 5]
            den = s0 - (s2 - 2.0 * x0 * s1 + x0 * x0 * s0) * inv
            if s0 > 0.0 and den > 1e-9 * s0:
                pred = (s3 - (s5 - 2.0 * x0 * s4 + x0 * x0 * s3) * inv) / den
            else:
                one[0] = x0
                pred = _predict_sorted(xs, ys, ws, cum, one, h, min_points, False)[0]
            pred = min(max(pred, lo_y), hi_y)
            risk[b] += wq[k] * (yq[k] - pred) ** 2
    return risk


def _prefix(x, y, w):
    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    cols = np.column_stack([ws, ws * xs, ws * xs * xs, ws * ys, ws * xs * ys, ws * xs * xs * ys])
    cum = np.zeros((xs.size + 1, 6))
    np.cumsum(cols, axis=0, out=cum[1:])
    return np.ascontiguousarray(xs), np.ascontiguousarray(ys), np.ascontiguousarray(ws), cum


@dataclass(frozen=True, eq=False)
class KernelRegressor:
    """Fitted Nadaraya-Watson smoother.

    Training inputs are stored sorted and centered at the weighted mean of
    ``x``.  A regressor with ``constant`` set ignores the query and returns
    that value.  Queries whose kernel window holds fewer than
    ``min_points`` training points are answered with a locally doubled
    bandwidth; ``min_points=1`` gives the plain Nadaraya-Watson ratio
    wherever the kernel mass is positive.
    """

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    bandwidth: float
    kernel: str = "epanechnikov"
    constant: float | None = None
    cv_risk: np.ndarray | None = field(default=None, repr=False)
    grid: np.ndarray | None = field(default=None, repr=False)
    min_points: int = MIN_POINTS

    def __post_init__(self):
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.x.size == 0:
            raise ValueError("kernel regressor needs at least one training point")
        if self.kernel != "epanechnikov":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        shift = float(np.average(self.x, weights=self.weights)) if self.weights.sum() > 0 else 0.0
        object.__setattr__(self, "_shift", shift)
        object.__setattr__(self, "_state", _prefix(self.x - shift, self.y, self.weights))
        object.__setattr__(self, "_range", (float(self.y.min()), float(self.y.max())))

    def predict(self, x0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.constant is not None:
            return np.full(x0.shape, self.constant)
        xs, ys, ws, cum = self._state
        q = np.ascontiguousarray(x0.reshape(-1) - self._shift)
        pred = _predict_sorted(xs, ys, ws, cum, q, float(self.bandwidth), min(self.min_points, xs.size), True)
        return np.clip(pred, *self._range).reshape(x0.shape)


def bandwidth_grid(x, size=20, lo=0.05, hi=2.0):
    """Geometric grid on ``[lo, hi] * sd(x) * n^{-1/5}``; empty if ``x`` is constant."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x))
    if x.size < 2 or not sd > 0:
        return np.empty(0)
    base = sd * x.size ** (-0.2)
    return np.geomspace(lo * base, hi * base, size)


def kernel_fit(x, y, weights=None, bandwidths=None, folds=5, seed=0, min_points=MIN_POINTS):
    """Nadaraya-Watson regression with bandwidth chosen by K-fold CV.

    Parameters
    ----------
    x, y : array_like, shape (n,)
    weights : array_like, optional
        Nonnegative case weights (default 1).
    bandwidths : array_like or float, optional
        Candidate bandwidths; defaults to :func:`bandwidth_grid`.  A single
        value skips cross-validation.
    folds : int
        Number of CV folds; when ``n < folds`` the largest candidate is used.
    seed : int
        Seed for the fold assignment.
    min_points : int
        Minimum number of training points in a kernel window, see
        :class:`KernelRegressor`.

    Returns
    -------
    KernelRegressor
        Constant (weighted mean of ``y``) when all ``x`` coincide.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != y.size:
        raise ValueError("x and y differ in length")
    if x.size == 0:
        raise ValueError("kernel_fit needs at least one point")
    w = np.ones(x.size) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    grid = bandwidth_grid(x) if bandwidths is None else np.atleast_1d(np.asarray(bandwidths, dtype=float))
    if np.all(x == x[0]) or grid.size == 0:
        return KernelRegressor(x, y, w, 1.0, constant=float(np.average(y, weights=w)), min_points=min_points)
    if np.any(grid <= 0):
        raise ValueError("bandwidths must be positive")
    if grid.size == 1 or x.size < folds:
        return KernelRegressor(
            x, y, w, float(grid.max() if x.size < folds else grid[0]), grid=grid, min_points=min_points
        )
    fold_id = np.random.default_rng(seed).permutation(x.size) % folds
    risk = np.zeros(grid.size)
    shift = float(np.average(x, weights=w))
    xc = x - shift
    for k in range(folds):
        test = fold_id == k
        train = ~test
        if w[train].sum() <= 0:
            continue
        xs, ys, ws, cum = _prefix(xc[train], y[train], w[train])
        order = np.argsort(xc[test], kind="stable")
        risk += _cv_risk(
            xs, ys, ws, cum,
            np.ascontiguousarray(xc[test][order]),
            np.ascontiguousarray(y[test][order]),
            np.ascontiguousarray(w[test][order]),
            grid, min(min_points, xs.size), y[train].min(), y[train].max(),
        )
    best = int(np.argmin(risk))
    return KernelRegressor(x, y, w, float(grid[best]), cv_risk=risk, grid=grid, min_points=min_points)


def kernel_predict(kr, x0):
    """Evaluate a fitted regressor at ``x0`` (scalar or array)."""
    out = kr.predict(x0)
    return float(out[0]) if np.ndim(x0) == 0 else out


@dataclass(frozen=True)
class SmoothingConfig:
    """Settings for the auxiliary regressions.

    ``bandwidth`` fixes a single bandwidth for every regression (no CV);
    otherwise each regression searches ``n_bandwidths`` geometric values on
    ``[lo, hi] * sd * n^{-1/5}``.
    """

    folds: int = 5
    n_bandwidths: int = 20
    lo: float = 0.05
    hi: float = 2.0
    seed: int = 0
    bandwidth: float | None = None

    def grid(self, x):
        if self.bandwidth is not None:
            return np.array([float(self.bandwidth)])
        return bandwidth_grid(x, self.n_bandwidths, self.lo, self.hi)


def _smooth(x, y, cfg, x_eval, key, chosen, fixed):
    """Smooth ``y`` on ``x`` and predict at ``x_eval``; records the bandwidth under ``key``."""
    if x.size == 0:
        return None
    if fixed is not None and key in fixed:
        grid = np.array([fixed[key]])
    else:
        grid = cfg.grid(x)
    kr = kernel_fit(x, y, bandwidths=grid if grid.size else None, folds=cfg.folds, seed=cfg.seed)
    chosen[key] = kr.bandwidth
    return kr.predict(x_eval)


@dataclass(frozen=True, eq=False)
class AuxiliaryFit:
    """Smoothed auxiliary quantities for ``n`` evaluation subjects.

    Time-indexed arrays put time ``t`` in column ``t``, so unused leading
    columns are present but meaningless (``e_l[:, 0]``, ``b[:, :, 0]``).

    Attributes
    ----------
    e_a, q, m : ndarray, shape (n,)
        ``e_A``, ``q`` and the regressor ``M = sum_{t=1}^tau S(t)``.
    e_r : ndarray, shape (n, tau)
        ``e_R(k)`` for ``k = 0..tau-1``.
    e_l : ndarray, shape (n, tau + 1)
        ``e_L(t)`` for ``t = 1..tau``.
    c_h, g_g : ndarray, shape (n, tau + 1)
        ``C_h(k) = S(tau)/S(k)`` and ``G_g(t) = g_A G(t)`` for ``0..tau``.
    d, b, u, v : ndarray, shape (n, tau + 1, tau + 1)
        Conditional probabilities ``[:, k, m]``; entries never needed are 0.
    D, B, U, V : ndarray, shape (n, tau + 1, tau + 1)
        Product processes ``[:, k, t]`` with ``D_k(t) = prod_{m<t}(1-d_k(m))``,
        ``B_k(t) = prod_{1<=m<=t}(1-b_k(m))`` and ``U``, ``V`` likewise.
    """

    e_a: np.ndarray
    q: np.ndarray
    m: np.ndarray
    e_r: np.ndarray
    e_l: np.ndarray
    c_h: np.ndarray
    g_g: np.ndarray
    d: np.ndarray
    b: np.ndarray
    u: np.ndarray
    v: np.ndarray
    D: np.ndarray
    B: np.ndarray
    U: np.ndarray
    V: np.ndarray
    warnings: tuple = ()
    bandwidths: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("e_a", "q", "m", "e_r", "e_l", "c_h", "g_g", "d", "b", "u", "v", "D", "B", "U", "V"):
            getattr(self, name).flags.writeable = False

    @property
    def tau(self):
        return self.e_r.shape[1]

    @property
    def n(self):
        return self.e_a.shape[0]


def _needed_pairs(tau):
    """Index pairs ``(k, m)`` of each conditional probability that the H covariates use."""
    d = [(k, m) for k in range(tau + 1) for m in range(tau)]
    b = [(k, m) for k in range(tau + 1) for m in range(1, tau) if m != k]
    u = [(k, m) for k in range(1, tau + 1) for m in range(k)]
    v = [(k, m) for k in range(1, tau + 1) for m in range(1, k)]
    return d, b, u, v


def _cumulative(p, start):
    """Products ``prod_{start <= m < t} (1 - p[..., m])`` for ``t = 0..T`` (1 when empty)."""
    n, kk, T = p.shape
    out = np.ones((n, kk, T))
    running = np.ones((n, kk))
    for t in range(1, T):
        m = t - 1 if start == 0 else t
        if m >= start and m < T:
            running = running * (1.0 - p[:, :, m])
        out[:, :, t] = running
    return out


def build_auxiliary(ds, nf, config=None, eval_nf=None, bandwidths=None):
    """Fit the auxiliary regressions on ``(ds, nf)`` and evaluate them.

    Parameters
    ----------
    ds : SurvivalDataset
        Training data (target arm coded ``a = 1``).
    nf : NuisanceFit
        Nuisance fit evaluated on the subjects of ``ds``.
    config : SmoothingConfig, optional
    eval_nf : NuisanceFit, optional
        Nuisance values of the subjects at which to evaluate the smoothers
        (defaults to ``nf``).  Only the one-dimensional regressors of the
        evaluation subjects are needed.
    bandwidths : dict, optional
        Bandwidths keyed as in :attr:`AuxiliaryFit.bandwidths` of an earlier
        fit; listed regressions reuse them instead of cross-validating.

    Returns
    -------
    AuxiliaryFit
    """
    cfg = SmoothingConfig() if config is None else config
    eval_nf = nf if eval_nf is None else eval_nf
    tau = ds.tau
    if nf.tau != tau or nf.n != ds.n:
        raise ValueError("nuisance fit does not match dataset")
    ind = indicators(ds)
    treated = ds.a == 1
    warnings = []
    chosen = {}

    def covariates(fit):
        S = fit.survival()
        G = fit.censoring()
        c_h = fit.survival_ratio()
        g_g = fit.g_a[:, None] * G
        m = S[:, 1:].sum(axis=1)
        return S, G, c_h, g_g, m

    S, G, c_h, g_g, m_tr = covariates(nf)
    S_ev, _, c_h_ev, g_g_ev, m_ev = covariates(eval_nf)
    n_ev = eval_nf.n

    # weighted error functions
    e_r = np.zeros((n_ev, tau))
    for k in range(tau):
        rows = (ind.j[:, k] == 1) & treated
        y = (ind.r[rows, k] - nf.g_r[rows, k]) / g_g[rows, k + 1]
        pred = _smooth(c_h[rows, k], y, cfg, c_h_ev[:, k], ("e_r", k), chosen, bandwidths)
        if pred is None:
            warnings.append(f"e_R({k}): empty fitting set, set to 0")
        else:
            e_r[:, k] = pred
    e_l = np.zeros((n_ev, tau + 1))
    for t in range(1, tau + 1):
        rows = (ind.i[:, t] == 1) & treated
        y = c_h[rows, t] * (ind.l[rows, t] - nf.h[rows, t - 1])
        pred = _smooth(g_g[rows, t], y, cfg, g_g_ev[:, t], ("e_l", t), chosen, bandwidths)
        if pred is None:
            warnings.append(f"e_L({t}): empty fitting set, set to 0")
        else:
            e_l[:, t] = pred
    e_a = _smooth(m_tr, (ds.a - nf.g_a) / nf.g_a, cfg, m_ev, ("e_a",), chosen, bandwidths)
    q = _smooth(S[:, tau], ds.a.astype(float), cfg, S_ev[:, tau], ("q",), chosen, bandwidths)

    # conditional censoring/event probabilities
    pairs_d, pairs_b, pairs_u, pairs_v = _needed_pairs(tau)
    shape = (n_ev, tau + 1, tau + 1)
    probs = {}
    for name, pairs, outcome, at_risk, x_tr, x_ev in (
        ("d", pairs_d, ind.r, ind.j, c_h, c_h_ev),
        ("b", pairs_b, ind.l, ind.i, c_h, c_h_ev),
        ("u", pairs_u, ind.r, ind.j, g_g, g_g_ev),
        ("v", pairs_v, ind.l, ind.i, g_g, g_g_ev),
    ):
        arr = np.zeros(shape)
        empty = []
        for k, mm in pairs:
            rows = (at_risk[:, mm] == 1) & treated
            pred = _smooth(
                x_tr[rows, k], outcome[rows, mm].astype(float), cfg, x_ev[:, k], (name, k, mm), chosen, bandwidths
            )
            if pred is None:
                empty.append((k, mm))
            else:
                arr[:, k, mm] = np.clip(pred, *PROB_CLIP)
        for k, mm in empty:
            arr[:, k, mm] = _nearest_rate(outcome, at_risk, treated, mm, tau)
            warnings.append(f"{name}_{k}({mm}): empty fitting set, marginal rate of nearest time used")
        probs[name] = arr
    D = _cumulative(probs["d"], 0)
    B = _cumulative(probs["b"], 1)
    U = _cumulative(probs["u"], 0)
    V = _cumulative(probs["v"], 1)
    for msg in warnings:
        logger.warning(msg)
    return AuxiliaryFit(
        e_a=e_a,
        q=np.clip(q, *PROB_CLIP),
        m=m_ev,
        e_r=e_r,
        e_l=e_l,
        c_h=c_h_ev,
        g_g=g_g_ev,
        d=probs["d"],
        b=probs["b"],
        u=probs["u"],
        v=probs["v"],
        D=D,
        B=B,
        U=U,
        V=V,
        warnings=tuple(warnings),
        bandwidths=chosen,
    )


def _nearest_rate(outcome, at_risk, treated, m, tau):
    order = sorted(range(tau + 1), key=lambda s: (abs(s - m), s))
    for s in order:
        rows = (at_risk[:, s] == 1) & treated
        if rows.any():
            return float(np.clip(outcome[rows, s].mean(), *PROB_CLIP))
    return PROB_CLIP[0]


def write_auxiliary_csv(aux, path):
    """Dump ``aux`` with one row per (subject, k, t, quantity).

    Subject-level quantities use empty ``k`` and ``t`` fields; ``e_R`` and
    ``C_h`` use ``k``; ``e_L`` and ``G_g`` use ``t``.
    """
    tau = aux.tau
    pairs = dict(zip("dbuv", _needed_pairs(tau)))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["subject", "quantity", "k", "t", "value"])
        for i in range(aux.n):
            for name in ("e_a", "q", "m"):
                out.writerow([i, name, "", "", repr(float(getattr(aux, name)[i]))])
            for k in range(tau):
                out.writerow([i, "e_r", k, "", repr(float(aux.e_r[i, k]))])
            for k in range(tau + 1):
                out.writerow([i, "c_h", k, "", repr(float(aux.c_h[i, k]))])
            for t in range(1, tau + 1):
                out.writerow([i, "e_l", "", t, repr(float(aux.e_l[i, t]))])
            for t in range(tau + 1):
                out.writerow([i, "g_g", "", t, repr(float(aux.g_g[i, t]))])
            for name, prs in pairs.items():
                arr = getattr(aux, name)
                for k, m in prs:
                    out.writerow([i, name, k, m, repr(float(arr[i, k, m]))])
            for name in "DBUV":
                arr = getattr(aux, name)
                for k in range(tau + 1):
                    for t in range(tau + 1):
                        out.writerow([i, name, k, t, repr(float(arr[i, k, t]))])
