"""Nuisance learners for ``g_A``, ``g_R`` and ``h`` and their evaluation.

A :class:`LearnerSpec` says how one nuisance regression is fitted: which
design, plain maximum likelihood or L1 with cross-validated penalty, and
whether separate models are fitted per time point or on treated rows only.
:func:`fit_nuisance` fits all three on the appropriate long-form subsets,
and :func:`predict_nuisance` evaluates them for the target arm ``a = 1``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..survdata import indicators
from .design import DesignSpec
from .glm import GlmFit, fit_logistic
from .lasso import fit_logistic_l1

__all__ = [
    "DEFAULT_CLIP",
    "LearnerSpec",
    "FittedLearner",
    "NuisanceModels",
    "NuisanceFit",
    "fit_learner",
    "fit_nuisance",
    "predict_nuisance",
    "constant_nuisance",
]

logger = logging.getLogger(__name__)

DEFAULT_CLIP = (0.01, 0.99)
METHODS = ("glm", "lasso")


@dataclass(frozen=True)
class LearnerSpec:
    """Recipe for one logistic nuisance regression.

    Parameters
    ----------
    design : DesignSpec
        Columns built from ``(t, a, w)``.
    method : {"glm", "lasso"}
        Unpenalized IRLS or L1 with the penalty picked by CV deviance.
    by_time : bool
        Fit one model per time point instead of a pooled model.
    treated_only : bool
        Fit on rows with ``a = 1`` only (arm-specific model).
    folds : int
        CV folds for ``method="lasso"``.
    """

    design: DesignSpec
    method: str = "glm"
    by_time: bool = False
    treated_only: bool = False
    folds: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown learner method {self.method!r}")

    def to_dict(self):
        return {
            "design": self.design.to_dict(),
            "method": self.method,
            "by_time": self.by_time,
            "treated_only": self.treated_only,
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            DesignSpec.from_dict(data["design"]),
            data.get("method", "glm"),
            bool(data.get("by_time", False)),
            bool(data.get("treated_only", False)),
            int(data.get("folds", 5)),
        )


@dataclass(frozen=True)
class FittedLearner:
    """A :class:`LearnerSpec` with its fitted coefficients.

    ``fits`` maps a time point to its model when ``spec.by_time`` is set and
    has the single key ``None`` otherwise.  Time points without their own
    model (no training rows) borrow the nearest fitted time.
    """

    spec: LearnerSpec
    fits: dict

    def _fit_for(self, t):
        if None in self.fits:
            return self.fits[None]
        if t in self.fits:
            return self.fits[t]
        keys = np.array(sorted(self.fits))
        return self.fits[int(keys[np.argmin(np.abs(keys - t))])]

    def linear_predictor(self, w, t, a=None):
        """Linear predictor at time ``t`` (scalar) for covariate rows ``w``."""
        x = self.spec.design.matrix(w, t=t, a=a)
        return self._fit_for(int(t)).linear_predictor(x)

    def predict(self, w, t, a=None):
        return expit(self.linear_predictor(w, t, a))

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "fits": {("pooled" if k is None else str(k)): f.to_dict() for k, f in self.fits.items()},
        }

    @classmethod
    def from_dict(cls, data):
        fits = {
            (None if k == "pooled" else int(k)): GlmFit.from_dict(v) for k, v in data["fits"].items()
        }
        return cls(LearnerSpec.from_dict(data["spec"]), fits)


def fit_learner(spec, y, w, t, a, seed=0):
    """Fit ``spec`` to responses ``y`` on rows ``(t, a, w)``."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t)
    a = np.asarray(a)
    keep = a == 1 if spec.treated_only else np.ones(y.size, dtype=bool)
    if not keep.any():
        raise ValueError("no training rows for learner")
    strata = np.unique(t[keep]) if spec.by_time else [None]
    fits = {}
    for s in strata:
        rows = keep if s is None else keep & (t == s)
        x = spec.design.matrix(w[rows], t=t[rows], a=a[rows])
        if spec.method == "glm":
            fit = fit_logistic(y[rows], x, intercept=spec.design.intercept)
        elif y[rows].min() == y[rows].max() or rows.sum() < 2 * spec.folds:
            # nothing to select on; intercept-only with a tiny floor against +-inf
            ybar = np.clip(y[rows].mean(), 0.5 / rows.sum(), 1 - 0.5 / rows.sum())
            coef = np.zeros(x.shape[1] + int(spec.design.intercept))
            if spec.design.intercept:
                coef[0] = np.log(ybar / (1 - ybar))
            fit = GlmFit(coef, spec.design.intercept, True, 0, regularization=("l1", np.inf))
        else:
            fit = fit_logistic_l1(
                y[rows], x, folds=spec.folds, intercept=spec.design.intercept, seed=seed
            )
        fits[None if s is None else int(s)] = fit
    return FittedLearner(spec, fits)


@dataclass(frozen=True)
class NuisanceModels:
    """Fitted learners for the treatment, censoring and event regressions."""

    g_a: FittedLearner
    g_r: FittedLearner
    h: FittedLearner

    def to_json(self):
        return json.dumps(
            {"g_a": self.g_a.to_dict(), "g_r": self.g_r.to_dict(), "h": self.h.to_dict()},
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(*(FittedLearner.from_dict(data[k]) for k in ("g_a", "g_r", "h")))


def fit_nuisance(ds, g_a, g_r, h, seed=0):
    """Fit the three nuisance regressions on ``ds``.

    ``g_a`` is fitted to ``A`` over all subjects, ``g_r`` to ``R_t`` over
    rows with ``J_t = 1``, ``t = 0..tau-1``, and ``h`` to ``L_t`` over rows
    with ``I_t = 1``, ``t = 1..tau``.  Seeds only drive CV fold assignment.
    """
    ind = indicators(ds)
    tau = ds.tau
    fa = fit_learner(g_a, ds.a, ds.w, np.zeros(ds.n, dtype=int), ds.a, seed=seed)
    subj, tt = np.nonzero(ind.j[:, :tau])
    fr = fit_learner(g_r, ind.r[subj, tt], ds.w[subj], tt, ds.a[subj], seed=seed)
    subj, tt = np.nonzero(ind.i[:, 1 : tau + 1])
    tt = tt + 1
    fh = fit_learner(h, ind.l[subj, tt], ds.w[subj], tt, ds.a[subj], seed=seed)
    return NuisanceModels(fa, fr, fh)


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Nuisance probabilities for the target arm, evaluated per subject.

    Attributes
    ----------
    g_a : ndarray, shape (n,)
        ``g_A(w_i)``.
    g_r : ndarray, shape (n, tau)
        ``g_R(t, w_i)`` for ``t = 0..tau-1``.
    h : ndarray, shape (n, tau)
        ``h(t, w_i)`` for ``t = 1..tau`` (column ``t - 1``).
    clip_bounds : tuple
        ``(lo, hi)`` bounds of ``g_a`` and ``g_r``.
    hazard_bounds : tuple, optional
        Bounds of ``h``; defaults to ``clip_bounds``.
    """

    g_a: np.ndarray
    g_r: np.ndarray
    h: np.ndarray
    clip_bounds: tuple = DEFAULT_CLIP
    hazard_bounds: tuple | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.hazard_bounds is None:
            object.__setattr__(self, "hazard_bounds", tuple(self.clip_bounds))
        for lo, hi in (self.clip_bounds, self.hazard_bounds):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"invalid clip bounds {(lo, hi)}")
        for name in ("g_a", "g_r", "h"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.g_r.shape != self.h.shape or self.g_r.shape[0] != self.g_a.shape[0]:
            raise ValueError("inconsistent nuisance shapes")

    @property
    def n(self):
        return self.g_a.shape[0]

    @property
    def tau(self):
        return self.h.shape[1]

    def replace(self, g_a=None, g_r=None, h=None):
        return NuisanceFit(
            self.g_a if g_a is None else g_a,
            self.g_r if g_r is None else g_r,
            self.h if h is None else h,
            self.clip_bounds,
            self.hazard_bounds,
        )

    def subset(self, idx):
        return NuisanceFit(
            self.g_a[idx], self.g_r[idx], self.h[idx], self.clip_bounds, self.hazard_bounds
        )

    def clipped(self):
        """Copy with every probability forced into its bounds."""
        return self.replace(
            np.clip(self.g_a, *self.clip_bounds),
            np.clip(self.g_r, *self.clip_bounds),
            np.clip(self.h, *self.hazard_bounds),
        )

    def survival(self):
        """``S(t) = prod_{m=1}^t (1 - h(m))`` for ``t = 0..tau``; shape (n, tau + 1)."""
        out = np.ones((self.n, self.tau + 1))
        out[:, 1:] = np.cumprod(1.0 - self.h, axis=1)
        return out

    def survival_ratio(self):
        """``S(tau) / S(k) = prod_{m=k+1}^tau (1 - h(m))`` for ``k = 0..tau``.

        Computed as a partial product, so it stays defined when some
        ``h = 1``.
        """
        out = np.ones((self.n, self.tau + 1))
        out[:, :-1] = np.cumprod((1.0 - self.h)[:, ::-1], axis=1)[:, ::-1]
        return out

    def censoring(self):
        """``G(t) = prod_{m=0}^{t-1} (1 - g_R(m))`` for ``t = 0..tau``; shape (n, tau + 1)."""
        out = np.ones((self.n, self.tau + 1))
        out[:, 1:] = np.cumprod(1.0 - self.g_r, axis=1)
        return out


def clip_probabilities(p, clip):
    lo, hi = clip
    return np.clip(p, lo, hi)


def predict_nuisance(ds, models, clip=DEFAULT_CLIP, hazard_clip=None):
    """Evaluate fitted models at ``a = 1`` for every subject of ``ds``.

    Parameters
    ----------
    models : NuisanceModels
    clip : tuple
        Bounds applied to ``g_A`` and ``g_R`` (and to ``h`` unless
        ``hazard_clip`` is given).
    hazard_clip : tuple, optional
        Separate bounds for ``h``.  ``h`` never appears in a denominator, so
        it can be clipped less aggressively than the weights.
    """
    tau = ds.tau
    hclip = clip if hazard_clip is None else hazard_clip
    g_a = clip_probabilities(models.g_a.predict(ds.w, 0, 1), clip)
    g_r = np.column_stack([models.g_r.predict(ds.w, t, 1) for t in range(tau)])
    h = np.column_stack([models.h.predict(ds.w, t, 1) for t in range(1, tau + 1)])
    return NuisanceFit(
        g_a, clip_probabilities(g_r, clip), clip_probabilities(h, hclip), tuple(clip), tuple(hclip)
    )


def constant_nuisance(n, tau, g_a=0.5, g_r=0.5, h=0.5, clip=DEFAULT_CLIP):
    """NuisanceFit with constant probabilities, handy for tests and examples."""
    return NuisanceFit(
        np.full(n, float(g_a)), np.full((n, tau), float(g_r)), np.full((n, tau), float(h)), clip
    )
