"""Estimate reports and Wald intervals."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

__all__ = ["EstimateReport", "wald_interval", "z_quantile"]


def z_quantile(alpha):
    """Upper ``alpha / 2`` standard normal quantile."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(ndtri(1.0 - alpha / 2.0))


def wald_interval(theta, se, alpha=0.05):
    z = z_quantile(alpha)
    return (theta - z * se, theta + z * se)


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Point estimate with its standard error, interval and diagnostics.

    ``influence`` holds centered per-subject influence values (empty for
    estimators without one); ``sigma2`` is their empirical variance, so
    ``se = sqrt(sigma2 / n)``.  ``diagnostics`` is a JSON-serializable dict
    (per-iteration tilting coefficients, drift trace, warnings).
    """

    method: str
    theta: float
    se: float
    ci: tuple
    alpha: float
    sigma2: float
    n: int
    iterations: int = 0
    converged: bool = True
    influence: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_influence(cls, method, theta, influence, alpha=0.05, **kwargs):
        """Build a report whose variance is the empirical variance of ``influence``."""
        infl = np.asarray(influence, dtype=float)
        infl = infl - infl.mean()
        n = infl.size
        sigma2 = float(np.mean(infl * infl))
        se = math.sqrt(sigma2 / n)
        return cls(method, float(theta), se, wald_interval(float(theta), se, alpha), alpha, sigma2, n,
                   influence=infl, **kwargs)

    def summary(self):
        lo, hi = self.ci
        level = round(100 * (1 - self.alpha), 6)
        flag = "" if self.converged else " (not converged)"
        return f"{self.method}: theta={self.theta:.6f} se={self.se:.6f} {level:g}% CI=[{lo:.6f}, {hi:.6f}]{flag}"

    def to_dict(self, include_influence=False):
        out = {
            "method": self.method,
            "theta": self.theta,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "alpha": self.alpha,
            "sigma2": self.sigma2,
            "n": self.n,
            "iterations": self.iterations,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
        }
        if include_influence:
            out["influence"] = [float(v) for v in self.influence]
        return out

    def to_json(self, include_influence=False):
        return json.dumps(_plain(self.to_dict(include_influence)), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["method"],
            float(data["theta"]),
            float(data["se"]),
            tuple(data["ci"]),
            float(data["alpha"]),
            float(data["sigma2"]),
            int(data["n"]),
            int(data.get("iterations", 0)),
            bool(data.get("converged", True)),
            np.asarray(data.get("influence", []), dtype=float),
            data.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _plain(obj):
    """Convert numpy scalars/arrays inside ``obj`` to built-in types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj
