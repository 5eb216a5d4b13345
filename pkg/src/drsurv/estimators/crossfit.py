"""Cross-fitted drift-corrected TMLE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..nuisance.learners import DEFAULT_CLIP, NuisanceFit, fit_nuisance, predict_nuisance
from ..smoothing import AuxiliaryFit, SmoothingConfig, build_auxiliary
from ..survdata import indicators
from .targeting import DEFAULT_MAX_ITER, _finish, run_targeting

__all__ = ["FoldPlan", "cf_dtmle", "crossfit_nuisance"]

logger = logging.getLogger(__name__)

MIN_TRAIN = 10


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Partition of ``{0..n-1}`` into ``J`` validation folds.

    Use :meth:`random` for a seeded balanced partition or
    :meth:`from_folds` for an explicit one.
    """

    folds: tuple
    n: int
    seed: int | None = None

    def __post_init__(self):
        folds = tuple(np.sort(np.asarray(f, dtype=np.int64)) for f in self.folds)
        if len(folds) < 2:
            raise ValueError("a fold plan needs at least 2 folds")
        allidx = np.concatenate(folds)
        if allidx.size != self.n or not np.array_equal(np.sort(allidx), np.arange(self.n)):
            raise ValueError("folds must be disjoint and cover 0..n-1")
        for f in folds:
            f.flags.writeable = False
        object.__setattr__(self, "folds", folds)

    @property
    def J(self):
        return len(self.folds)

    @classmethod
    def random(cls, n, J, seed=0):
        """Random partition with fold sizes differing by at most one."""
        if J < 2 or J > n:
            raise ValueError(f"need 2 <= J <= n, got J={J}, n={n}")
        perm = np.random.default_rng(seed).permutation(n)
        return cls(tuple(np.array_split(perm, J)), n, seed)

    @classmethod
    def from_folds(cls, folds):
        folds = [np.asarray(f, dtype=np.int64) for f in folds]
        return cls(tuple(folds), int(sum(f.size for f in folds)), None)

    def training(self, j):
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[j]] = False
        return np.flatnonzero(mask)


def crossfit_nuisance(ds, learners, plan, clip=DEFAULT_CLIP, hazard_clip=None, seed=0):
    """Fit the learners on each training sample and predict on its fold.

    Returns
    -------
    (NuisanceFit, list)
        The cross-fitted nuisance values for all subjects and, per fold,
        ``(train_idx, NuisanceFit on the training subjects)``.
    """
    n, tau = ds.n, ds.tau
    g_a = np.empty(n)
    g_r = np.empty((n, tau))
    h = np.empty((n, tau))
    per_fold = []
    for j, val in enumerate(plan.folds):
        train = plan.training(j)
        if train.size < MIN_TRAIN:
            raise ValueError(f"fold {j}: training sample of {train.size} subjects is too small")
        ds_tr = ds.subset(train)
        try:
            models = fit_nuisance(ds_tr, *learners, seed=seed)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ValueError(f"fold {j}: nuisance fit failed: {exc}") from exc
        nf_val = predict_nuisance(ds.subset(val), models, clip, hazard_clip)
        g_a[val], g_r[val], h[val] = nf_val.g_a, nf_val.g_r, nf_val.h
        per_fold.append((train, predict_nuisance(ds_tr, models, clip, hazard_clip)))
    bounds = tuple(clip)
    hbounds = bounds if hazard_clip is None else tuple(hazard_clip)
    return NuisanceFit(g_a, g_r, h, bounds, hbounds), per_fold


def _stitch(parts, folds, n):
    fields = ("e_a", "q", "m", "e_r", "e_l", "c_h", "g_g", "d", "b", "u", "v", "D", "B", "U", "V")
    out = {}
    for name in fields:
        first = getattr(parts[0], name)
        arr = np.empty((n,) + first.shape[1:])
        for part, idx in zip(parts, folds):
            arr[idx] = getattr(part, name)
        out[name] = arr
    warnings = tuple(w for p in parts for w in p.warnings)
    return AuxiliaryFit(warnings=warnings, **out)


def cf_dtmle(
    ds,
    learners,
    plan,
    clip=DEFAULT_CLIP,
    smoothing=None,
    max_iter=DEFAULT_MAX_ITER,
    alpha=0.05,
    tol=None,
    every_iteration=False,
    hazard_clip=None,
    seed=0,
    refresh="freeze",
):
    """Cross-fitted drift-corrected TMLE.

    Nuisance learners and, in the first iteration, the auxiliary smoothers
    are trained on each training sample ``T_j`` and evaluated on the
    held-out fold, so each subject's initial probabilities, auxiliary
    quantities and clever covariates come from models that never saw it.
    The tilting fits pool all subjects.  With the default
    ``refresh="freeze"`` the cross-fitted auxiliary values are kept for all
    iterations.  With a refitting mode (see
    :func:`~drsurv.estimators.targeting.run_targeting`) later iterations
    smooth on the full sample, or per fold again if ``every_iteration`` is
    set.

    Parameters
    ----------
    learners : tuple
        ``(g_a, g_r, h)`` :class:`~drsurv.nuisance.learners.LearnerSpec`.
    plan : FoldPlan
    """
    if plan.n != ds.n:
        raise ValueError("fold plan does not match the dataset size")
    cfg = SmoothingConfig() if smoothing is None else smoothing
    nf0, per_fold = crossfit_nuisance(ds, learners, plan, clip, hazard_clip, seed)

    def builder(iteration, nf, previous):
        keep = previous.bandwidths if (refresh == "refit-bandwidth" and previous is not None) else None
        if iteration == 1 or every_iteration:
            parts = []
            for j, val in enumerate(plan.folds):
                train, nf_tr = per_fold[j]
                if iteration > 1:
                    nf_tr = nf.subset(train)
                parts.append(build_auxiliary(ds.subset(train), nf_tr, cfg, eval_nf=nf.subset(val)))
            return _stitch(parts, plan.folds, ds.n)
        return build_auxiliary(ds, nf, cfg, bandwidths=keep)

    ind = indicators(ds)
    state = run_targeting(ds, nf0, ("a", "r", "l"), True, builder, cfg, max_iter, tol, ind, refresh)
    report = _finish("cf-dtmle", ds, state, alpha, ind, True)
    report.diagnostics["folds"] = plan.J
    return report
