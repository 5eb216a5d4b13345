"""Simulation study: data-generating process, scenarios and Monte Carlo runner.

Covariates are ten correlated truncated normals; treatment, censoring and
event hazards depend on them through two nonlinear summaries ``u1`` (used
by ``g_A`` and ``h``) and ``u2`` (used by ``g_R``).  The target is the
treated-arm survival probability at ``tau``.

Seeding: a run seed feeds :class:`numpy.random.SeedSequence`; replication
``r`` uses child ``r`` of that sequence, which is split again into a
covariate stream, an outcome stream and a learner stream (CV folds).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import expit, ndtri

from .nuisance.design import DesignSpec, main_terms, rich_terms
from .nuisance.learners import DEFAULT_CLIP, LearnerSpec, NuisanceFit, fit_nuisance, predict_nuisance
from .survdata import SurvivalDataset

__all__ = [
    "TRUNCATION",
    "covariance",
    "draw_covariates",
    "latent",
    "g_a0",
    "g_r0",
    "h0",
    "draw_outcomes",
    "draw_dataset",
    "true_nuisance",
    "true_theta",
    "scenario_learners",
    "THETA_ORACLE",
    "oracle_theta",
    "ESTIMATORS",
    "SimConfig",
    "McReport",
    "run_monte_carlo",
    "run_replication",
    "read_raw_csv",
]

logger = logging.getLogger(__name__)

TRUNCATION = 1.5
SCENARIOS = ("a", "b", "c", "both-wrong")


def covariance(d=10):
    """Toeplitz covariance with first row ``(d, d-1, ..., 1) / d``."""
    return toeplitz(np.arange(d, 0, -1) / d)


def draw_covariates(n, seed, d=10):
    """Draw ``n`` vectors from ``N(0, Sigma)`` conditioned on every coordinate in (-1.5, 1.5).

    Whole vectors are redrawn until all coordinates are inside the box, so
    the result follows the exact conditional law.
    """
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(covariance(d))
    out = np.empty((n, d))
    filled = 0
    while filled < n:
        batch = max(2 * (n - filled), 64)
        z = rng.standard_normal((batch, d)) @ chol.T
        z = z[np.all(np.abs(z) < TRUNCATION, axis=1)]
        take = min(z.shape[0], n - filled)
        out[filled : filled + take] = z[:take]
        filled += take
    return out


def latent(w):
    """Return ``(u1, u2)`` for covariate rows ``w`` (1-based names w1..w10)."""
    w = np.asarray(w, dtype=float)
    c5 = np.cos(w[:, 4])
    u1 = np.sqrt(np.abs(w[:, 0] * w[:, 1])) - np.sqrt(np.abs(w[:, 9])) + c5 - np.cos(w[:, 5]) * c5
    u2 = (
        np.sqrt(np.abs(w[:, 0] * w[:, 9]))
        - np.sqrt(np.abs(w[:, 8]))
        + c5
        - np.cos(w[:, 6]) * np.cos(w[:, 5])
    )
    return u1, u2


def g_a0(u):
    return expit(-2.0 * np.asarray(u, dtype=float))


def g_r0(t, a, u):
    return expit(-4.0 + a + a * np.cos(t) - a * u * np.sqrt(t))


def h0(t, a, u):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        log_t = np.where(t > 0, np.log(np.maximum(t, 1e-300)), 0.0)
    return expit(-3.0 + a - 2.0 * u * log_t + 0.5 * a * u - 0.6 * (a + 1) * u * np.sin(t))


def draw_outcomes(w, seed, k_max=10, tau=6):
    """Simulate treatment and the censoring/event process given covariates.

    Uniforms are consumed in a fixed order regardless of who is at risk: one
    vector for ``A``, then for ``t = 0..K-1`` a censoring vector for ``R_t``
    followed by an event vector for ``L_{t+1}``.
    """
    rng = np.random.default_rng(seed)
    n = w.shape[0]
    u1, u2 = latent(w)
    a = (rng.random(n) < g_a0(u1)).astype(np.int64)
    t_tilde = np.full(n, k_max, dtype=np.int64)
    delta = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(k_max):
        cens = rng.random(n) < g_r0(t, a, u2)
        hit = alive & cens
        t_tilde[hit] = t
        alive &= ~hit
        event = rng.random(n) < h0(t + 1, a, u1)
        hit = alive & event
        t_tilde[hit] = t + 1
        delta[hit] = 1
        alive &= ~hit
    return SurvivalDataset(w, a, delta, t_tilde, k_max, tau)


def _seq(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def draw_dataset(n, seed, k_max=10, tau=6, d=10):
    """Covariates and outcomes from independent child streams of ``seed``.

    ``seed`` is an integer or a :class:`numpy.random.SeedSequence`.
    """
    s_w, s_o = _seq(seed).spawn(2)
    w = draw_covariates(n, s_w, d)
    return draw_outcomes(w, s_o, k_max, tau)


def true_nuisance(ds, clip=None, arm=1):
    """Exact ``(g_A, g_R, h)`` of the data-generating process for ``arm``.

    Returns a :class:`~drsurv.nuisance.learners.NuisanceFit`; with
    ``clip=None`` nothing is clipped (bounds ``(0, 1)``).
    """
    u1, u2 = latent(ds.w)
    tau = ds.tau
    g_a = g_a0(u1) if arm == 1 else 1.0 - g_a0(u1)
    g_r = np.column_stack([g_r0(t, arm, u2) for t in range(tau)])
    h = np.column_stack([h0(t, arm, u1) for t in range(1, tau + 1)])
    bounds = (0.0, 1.0) if clip is None else tuple(clip)
    return NuisanceFit(np.clip(g_a, *bounds), np.clip(g_r, *bounds), np.clip(h, *bounds), bounds)


def true_theta(tau=6, mc_size=10**6, seed=0, hazard=None, chunk=10**6):
    """Monte Carlo value of ``E[prod_{m=1}^tau (1 - h(m, 1, u1(W)))]``.

    Parameters
    ----------
    hazard : callable, optional
        ``hazard(t, a, u)``; defaults to the simulation hazard.

    Returns
    -------
    (float, float)
        Estimate and its Monte Carlo standard error.
    """
    hazard = h0 if hazard is None else hazard
    seeds = np.random.SeedSequence(seed).spawn(math.ceil(mc_size / chunk))
    total = 0.0
    total_sq = 0.0
    done = 0
    for s in seeds:
        m = min(chunk, mc_size - done)
        u1, _ = latent(draw_covariates(m, s))
        surv = np.ones(m)
        for t in range(1, tau + 1):
            surv *= 1.0 - np.broadcast_to(hazard(t, 1, u1), (m,))
        total += surv.sum()
        total_sq += (surv * surv).sum()
        done += m
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var / done))


def scenario_learners(scenario, d=10, tau=6, folds=5):
    """Learner specs ``(g_a, g_r, h)`` for a simulation scenario.

    Rich learners use the L1 fit on raw, square-root and cosine transforms
    plus all their pairwise products; the censoring and event regressions
    are fitted separately per time point on treated rows, which equals the
    full interaction with categorical time and treatment for the treated
    arm.  Main-terms learners are unpenalized logistic regressions on
    ``w1..wd`` (plus treatment and categorical time for ``g_R`` and ``h``).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rich = DesignSpec(rich_terms(d))
    rich_a = LearnerSpec(rich, "lasso", folds=folds)
    rich_t = LearnerSpec(rich, "lasso", by_time=True, treated_only=True, folds=folds)
    base = main_terms(d)
    main_a = LearnerSpec(DesignSpec(base), "glm")
    main_r = LearnerSpec(DesignSpec(base + ("a",) + tuple(f"t={t}" for t in range(1, tau))), "glm")
    main_h = LearnerSpec(DesignSpec(base + ("a",) + tuple(f"t={t}" for t in range(2, tau + 1))), "glm")
    good_g = scenario in ("a", "c")
    good_h = scenario in ("a", "b")
    return (
        rich_a if good_g else main_a,
        rich_t if good_g else main_r,
        rich_t if good_h else main_h,
    )


# 10^7-draw Monte Carlo value (seed 20240607) of the target for d = 10
THETA_ORACLE = {6: (0.4205423979976598, 6.890783459532672e-05)}

ESTIMATORS = ("km", "ipw", "aipw", "tmle", "dtmle", "cf-dtmle")
LEVELS = (0.90, 0.95, 0.99)


def oracle_theta(tau=6, d=10):
    """Reference ``(theta_0, mc_se)``: the stored oracle when available."""
    if d == 10 and THETA_ORACLE.get(tau, (None, None))[0] is not None:
        return THETA_ORACLE[tau]
    if d != 10:
        raise ValueError("the target is only defined for d = 10")
    return true_theta(tau, 10**6, seed=tau)


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo experiment.

    ``folds`` is the number of cross-fitting folds for ``cf-dtmle``;
    ``learner_folds`` the CV folds inside the lasso learners.
    """

    n: int
    reps: int = 1
    seed: int = 0
    scenario: str = "a"
    estimators: tuple = ("tmle", "dtmle")
    d: int = 10
    tau: int = 6
    k_max: int = 10
    folds: int = 10
    learner_folds: int = 5
    clip: tuple = DEFAULT_CLIP
    alpha: float = 0.05
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "clip", tuple(float(c) for c in self.clip))
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ValueError(f"unknown estimators {bad}; expected a subset of {ESTIMATORS}")
        if not 1 <= self.tau <= self.k_max:
            raise ValueError("need 1 <= tau <= k_max")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


def _one_rep(cfg, rep, child):
    """Run every requested estimator on replication ``rep``; return raw rows."""
    from .estimators import FoldPlan, aipw, cf_dtmle, dtmle, ipw, kaplan_meier, tmle_classic

    s_data, s_learn, s_fold = child.spawn(3)
    learn_seed = int(s_learn.generate_state(1)[0])
    fold_seed = int(s_fold.generate_state(1)[0])
    ds = draw_dataset(cfg.n, s_data, cfg.k_max, cfg.tau, cfg.d)
    learners = scenario_learners(cfg.scenario, cfg.d, cfg.tau, cfg.learner_folds)
    nf = None
    nf_error = None
    if any(e in ("ipw", "aipw", "tmle", "dtmle") for e in cfg.estimators):
        try:
            nf = predict_nuisance(ds, fit_nuisance(ds, *learners, seed=learn_seed), cfg.clip)
        except (ValueError, np.linalg.LinAlgError) as exc:
            nf_error = f"nuisance: {exc}"
    rows = []
    for est in cfg.estimators:
        row = {"rep": rep, "estimator": est}
        try:
            if est == "km":
                r = kaplan_meier(ds, 1, cfg.alpha)
            elif est == "cf-dtmle":
                plan = FoldPlan.random(ds.n, cfg.folds, fold_seed)
                r = cf_dtmle(ds, learners, plan, cfg.clip, alpha=cfg.alpha, seed=learn_seed)
            elif nf is None:
                raise ValueError(nf_error)
            else:
                fn = {"ipw": ipw, "aipw": aipw, "tmle": tmle_classic, "dtmle": dtmle}[est]
                r = fn(ds, nf, alpha=cfg.alpha)
            row.update(theta=r.theta, se=r.se, iterations=r.iterations, converged=r.converged, error="")
        except (ValueError, FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError) as exc:
            logger.warning("rep %d %s failed: %s", rep, est, exc)
            row.update(theta=math.nan, se=math.nan, iterations=0, converged=False, error=str(exc))
        rows.append(row)
    return rows


def _run_rep(args):
    return _one_rep(*args)


def run_replication(cfg, rep):
    """Raw rows of replication ``rep`` alone, identical to its rows in a full run."""
    if not 0 <= rep < cfg.reps:
        raise ValueError(f"rep must lie in [0, {cfg.reps})")
    child = np.random.SeedSequence(cfg.seed).spawn(rep + 1)[rep]
    return _one_rep(cfg, rep, child)


def read_raw_csv(text):
    """Parse :meth:`McReport.raw_csv` output back into row dicts."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "rep": int(rec["rep"]),
                "estimator": rec["estimator"],
                "theta": float(rec["theta"]),
                "se": float(rec["se"]),
                "iterations": int(rec["iterations"]),
                "converged": rec["converged"] == "true",
                "error": rec["error"],
            }
        )
    return rows


@dataclass
class McReport:
    """Aggregated Monte Carlo metrics and the per-replication records.

    ``metrics[estimator]`` holds ``bias``, ``sqrt_n_bias``, ``sd`` (empirical
    standard deviation of the estimates), ``bias_mc_se`` (``sd`` over the
    square root of the number of successful replications), ``mean_se``,
    ``mse``, ``coverage_90/95/99``, ``n_ok``, ``failures`` and
    ``nonconverged``.  Failed replications are excluded from the metrics;
    non-converged ones are kept.
    """

    config: SimConfig
    theta_true: float
    theta_true_se: float
    rows: list
    metrics: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, config, theta_true, theta_true_se, rows):
        metrics = {}
        for est in config.estimators:
            mine = [r for r in rows if r["estimator"] == est]
            ok = [r for r in mine if not r["error"]]
            th = np.array([r["theta"] for r in ok], dtype=float)
            se = np.array([r["se"] for r in ok], dtype=float)
            m = th.size
            out = {"n_ok": m, "failures": len(mine) - m, "nonconverged": sum(not r["converged"] for r in ok)}
            if m:
                err = th - theta_true
                sd = float(np.std(th, ddof=1)) if m > 1 else 0.0
                out.update(
                    bias=float(err.mean()),
                    sqrt_n_bias=float(math.sqrt(config.n) * err.mean()),
                    sd=sd,
                    bias_mc_se=sd / math.sqrt(m),
                    mean_se=float(se.mean()),
                    mse=float(np.mean(err * err)),
                )
                for level in LEVELS:
                    z = float(ndtri(0.5 + level / 2.0))
                    cover = np.abs(err) <= z * se
                    out[f"coverage_{round(level * 100)}"] = float(cover.mean())
            metrics[est] = out
        return cls(config, float(theta_true), float(theta_true_se), rows, metrics)

    def metrics_csv(self):
        """One row per estimator and metric."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["estimator", "metric", "value"])
        for est in self.config.estimators:
            for key in sorted(self.metrics[est]):
                wr.writerow([est, key, _fmt(self.metrics[est][key])])
        return buf.getvalue()

    def raw_csv(self):
        """One row per replication and estimator."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        cols = ["rep", "estimator", "theta", "se", "iterations", "converged", "error"]
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def to_text(self):
        """Flat ``key=value`` listing of configuration, truth and metrics."""
        cfg = asdict(self.config)
        lines = [f"config.{k}={_fmt(cfg[k])}" for k in sorted(cfg) if k != "workers"]
        lines.append(f"theta_true={_fmt(self.theta_true)}")
        lines.append(f"theta_true_se={_fmt(self.theta_true_se)}")
        for est in self.config.estimators:
            for key in sorted(self.metrics[est]):
                lines.append(f"{est}.{key}={_fmt(self.metrics[est][key])}")
        return "\n".join(lines) + "\n"

    def table(self):
        """Human-readable metric table."""
        head = f"{'estimator':<10}{'bias':>10}{'sd':>9}{'mean_se':>9}{'mse':>11}{'cov90':>7}{'cov95':>7}{'cov99':>7}{'fail':>6}"
        lines = [f"theta_true={self.theta_true:.6f} n={self.config.n} reps={self.config.reps} scenario={self.config.scenario}", head]
        for est in self.config.estimators:
            m = self.metrics[est]
            if not m["n_ok"]:
                lines.append(f"{est:<10}{'all replications failed':>40}{m['failures']:>6}")
                continue
            lines.append(
                f"{est:<10}{m['bias']:>10.5f}{m['sd']:>9.5f}{m['mean_se']:>9.5f}{m['mse']:>11.3e}"
                f"{m['coverage_90']:>7.3f}{m['coverage_95']:>7.3f}{m['coverage_99']:>7.3f}{m['failures']:>6}"
            )
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def run_monte_carlo(cfg, theta_true=None, progress=None):
    """Run ``cfg.reps`` replications and aggregate the metrics.

    Replication ``r`` draws from child ``r`` of ``SeedSequence(cfg.seed)``,
    so results do not depend on ``cfg.workers`` or on execution order.

    Parameters
    ----------
    theta_true : (float, float), optional
        Target value and its Monte Carlo error; defaults to
        :func:`oracle_theta`.
    progress : callable, optional
        Called with each replication's rows as they finish.
    """
    if theta_true is None:
        theta_true = oracle_theta(cfg.tau, cfg.d)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.reps)
    jobs = [(cfg, r, c) for r, c in enumerate(children)]
    results = []
    if cfg.workers == 1:
        for job in jobs:
            res = _run_rep(job)
            results.append(res)
            if progress is not None:
                progress(res)
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for res in pool.map(_run_rep, jobs):
                results.append(res)
                if progress is not None:
                    progress(res)
    rows = [row for res in results for row in res]
    return McReport.aggregate(cfg, theta_true[0], theta_true[1], rows)
