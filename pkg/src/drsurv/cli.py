"""Command-line front end.

``drsurv estimate`` reads short-form CSV data and writes an estimate report;
``drsurv simulate`` runs a Monte Carlo study and writes its metrics.

Settings are resolved in the order built-in default, ``--config`` file
(flat ``key=value`` lines, ``#`` comments, keys spelled like the long flags
without the leading dashes), then command-line flags.

Seeding: the single ``--seed`` feeds :class:`numpy.random.SeedSequence`.
For ``estimate`` its two children seed the learners' CV folds and the
cross-fitting partition.  For ``simulate`` replication ``r`` uses child
``r`` (see :mod:`drsurv.simlab`).

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .estimators import FoldPlan, aipw, cf_dtmle, dtmle, ipw, kaplan_meier, tmle_classic, wald_interval
from .estimators.report import _plain
from .nuisance.design import DesignSpec, main_terms, rich_terms
from .nuisance.learners import LearnerSpec, fit_nuisance, predict_nuisance
from .simlab import ESTIMATORS, SCENARIOS, SimConfig, run_monte_carlo
from .survdata import ValidationError, read_csv

__all__ = ["main", "build_parser", "load_config", "default_learners"]

logger = logging.getLogger("drsurv")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULTS = {
    "estimate": {
        "method": "dtmle",
        "tau": None,
        "alpha": 0.05,
        "folds": 10,
        "clip_lo": 0.01,
        "clip_hi": 0.99,
        "seed": 0,
        "arm": 1,
        "contrast": False,
        "learner": "lasso",
    },
    "simulate": {
        "method": "tmle,dtmle",
        "tau": 6,
        "alpha": 0.05,
        "folds": 10,
        "clip_lo": 0.01,
        "clip_hi": 0.99,
        "seed": 0,
        "scenario": "a",
        "n": 400,
        "reps": 1,
        "threads": 1,
    },
}


class UsageError(Exception):
    """Invalid settings; reported with exit code 2."""


def build_parser():
    parser = argparse.ArgumentParser(prog="drsurv", description="Doubly robust survival estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--output", help="output path (estimate) or prefix (simulate)")
        p.add_argument("--tau", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--folds", type=int, help="cross-fitting folds J")
        p.add_argument("--clip-lo", dest="clip_lo", type=float)
        p.add_argument("--clip-hi", dest="clip_hi", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")

    est = sub.add_parser("estimate", help="estimate survival at tau from a CSV file")
    common(est)
    est.add_argument("--input", help="short-form CSV with w1..wd, A, time, event")
    est.add_argument("--method", choices=ESTIMATORS)
    est.add_argument("--arm", type=int, choices=(0, 1))
    est.add_argument("--contrast", action="store_const", const=True, help="estimate both arms and their difference")
    est.add_argument("--learner", choices=("lasso", "glm"), help="nuisance learners")

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    common(sim)
    sim.add_argument("--method", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    sim.add_argument("--scenario", choices=SCENARIOS)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--threads", type=int)
    return parser


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config(path, command):
    """Parse a ``key=value`` settings file into typed values for ``command``."""
    known = DEFAULTS[command]
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in ("input", "output"):
            out[key] = value
            continue
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        default = known[key]
        try:
            if isinstance(default, bool):
                out[key] = _BOOL[value.lower()]
            elif isinstance(default, int) or key == "tau":
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            else:
                out[key] = value
        except (KeyError, ValueError):
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def _settings(args):
    merged = dict(DEFAULTS[args.command])
    merged["input"] = None
    merged["output"] = None
    if args.config:
        merged.update(load_config(args.config, args.command))
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        merged[key] = value
    if not 0.0 < merged["alpha"] < 1.0:
        raise UsageError("alpha must lie in (0, 1)")
    if not 0.0 < merged["clip_lo"] < merged["clip_hi"] < 1.0:
        raise UsageError("need 0 < clip-lo < clip-hi < 1")
    if merged["folds"] < 2:
        raise UsageError("folds must be at least 2")
    return merged


def default_learners(d, tau, kind="lasso", folds=5):
    """Learners used by ``estimate``.

    ``lasso`` fits L1-penalized logistic regressions on the rich design
    (transforms and pairwise products of ``w1..wd``), per time point for
    the censoring and event hazards; ``glm`` fits main-terms logistic
    regressions with categorical time.
    """
    if kind == "lasso":
        rich = DesignSpec(rich_terms(d))
        per_time = LearnerSpec(rich, "lasso", by_time=True, treated_only=True, folds=folds)
        return LearnerSpec(rich, "lasso", folds=folds), per_time, per_time
    base = main_terms(d)
    g_r = DesignSpec(base + ("a",) + tuple(f"t={t}" for t in range(1, tau)))
    h = DesignSpec(base + ("a",) + tuple(f"t={t}" for t in range(2, tau + 1)))
    return LearnerSpec(DesignSpec(base), "glm"), LearnerSpec(g_r, "glm"), LearnerSpec(h, "glm")


def _estimate_arm(ds, arm, cfg, learn_seed, fold_seed):
    ds_arm = ds.for_arm(arm)
    method = cfg["method"]
    if method == "km":
        return kaplan_meier(ds, arm, cfg["alpha"])
    learners = default_learners(ds.d, ds.tau, cfg["learner"])
    clip = (cfg["clip_lo"], cfg["clip_hi"])
    if method == "cf-dtmle":
        plan = FoldPlan.random(ds.n, cfg["folds"], fold_seed)
        return cf_dtmle(ds_arm, learners, plan, clip, alpha=cfg["alpha"], seed=learn_seed)
    nf = predict_nuisance(ds_arm, fit_nuisance(ds_arm, *learners, seed=learn_seed), clip)
    fn = {"ipw": ipw, "aipw": aipw, "tmle": tmle_classic, "dtmle": dtmle}[method]
    return fn(ds_arm, nf, alpha=cfg["alpha"])


def cmd_estimate(cfg):
    if not cfg["input"]:
        raise UsageError("estimate needs --input")
    try:
        ds = read_csv(cfg["input"])
    except ValidationError as exc:
        where = f" (line {exc.line})" if exc.line is not None and f"line {exc.line}" not in str(exc) else ""
        raise UsageError(f"{cfg['input']}{where}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {cfg['input']}: {exc}") from None
    tau = cfg["tau"] if cfg["tau"] is not None else ds.tau
    if not 1 <= tau <= ds.k_max:
        raise UsageError(f"tau must lie in [1, {ds.k_max}]")
    ds = ds.with_tau(tau)
    learn_seed, fold_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg["seed"]).spawn(2))
    arms = (1, 0) if cfg["contrast"] else (cfg["arm"],)
    reports = {}
    for arm in arms:
        if not np.any(ds.a == arm):
            raise UsageError(f"no subjects in arm {arm}")
        reports[arm] = _estimate_arm(ds, arm, cfg, learn_seed, fold_seed)
    doc = {
        "method": cfg["method"],
        "tau": tau,
        "alpha": cfg["alpha"],
        "seed": cfg["seed"],
        "arms": {str(a): r.to_dict() for a, r in reports.items()},
    }
    lines = [f"arm {a} {r.summary()}" for a, r in reports.items()]
    if cfg["contrast"]:
        diff = reports[1].theta - reports[0].theta
        se = math.sqrt(reports[1].se ** 2 + reports[0].se ** 2)
        lo, hi = wald_interval(diff, se, cfg["alpha"])
        doc["contrast"] = {"theta": diff, "se": se, "ci": [lo, hi]}
        lines.append(f"contrast (arm 1 - arm 0): {diff:.6f} se={se:.6f} CI=[{lo:.6f}, {hi:.6f}]")
    for a, r in reports.items():
        if not r.converged:
            print(f"warning: arm {a} did not converge in {r.iterations} iterations", file=sys.stderr)
    if not all(math.isfinite(r.theta) and math.isfinite(r.se) for r in reports.values()):
        raise FloatingPointError("non-finite estimate")
    text = json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n"
    if cfg["output"]:
        Path(cfg["output"]).write_text(text)
    print("\n".join(lines))
    return EXIT_OK


def cmd_simulate(cfg):
    methods = tuple(m.strip() for m in cfg["method"].split(",") if m.strip())
    try:
        sim = SimConfig(
            n=cfg["n"],
            reps=cfg["reps"],
            seed=cfg["seed"],
            scenario=cfg["scenario"],
            estimators=methods,
            tau=cfg["tau"],
            folds=cfg["folds"],
            clip=(cfg["clip_lo"], cfg["clip_hi"]),
            alpha=cfg["alpha"],
            workers=cfg["threads"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_monte_carlo(sim)
    if cfg["output"]:
        prefix = cfg["output"]
        Path(f"{prefix}.metrics.csv").write_text(report.metrics_csv())
        Path(f"{prefix}.raw.csv").write_text(report.raw_csv())
        Path(f"{prefix}.txt").write_text(report.to_text())
    print(report.table(), end="")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _settings(args)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        return cmd_simulate(cfg)
    except UsageError as exc:
        print(f"drsurv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"drsurv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
