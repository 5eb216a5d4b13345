"""Design matrices built from ``(t, a, w)`` by named terms.

A term is a string.  Single factors are ``w3`` (raw covariate), ``sqrt(w3)``
(``|w3|^{1/2}``), ``cos(w3)``, ``a`` (treatment) and ``t=2`` (time dummy);
factors joined by ``:`` form an interaction, e.g. ``sqrt(w1):cos(w5)``.
Covariates are 1-based in term names.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

__all__ = ["DesignSpec", "main_terms", "rich_terms", "hazard_terms"]

_FACTOR = re.compile(r"^(?:(w)(\d+)|sqrt\(w(\d+)\)|cos\(w(\d+)\)|(a)|t=(\d+))$")


def _parse_factor(text):
    m = _FACTOR.match(text)
    if m is None:
        raise ValueError(f"unknown design factor {text!r}")
    raw, j_raw, j_sqrt, j_cos, a, level = m.groups()
    if raw:
        return ("w", int(j_raw) - 1)
    if j_sqrt:
        return ("sqrt", int(j_sqrt) - 1)
    if j_cos:
        return ("cos", int(j_cos) - 1)
    if a:
        return ("a", None)
    return ("t", int(level))


def _factor_column(factor, t, a, w):
    kind, arg = factor
    if kind in ("w", "sqrt", "cos"):
        if arg < 0 or arg >= w.shape[1]:
            raise ValueError(f"design refers to covariate w{arg + 1} but data has {w.shape[1]}")
        col = w[:, arg]
        if kind == "sqrt":
            return np.sqrt(np.abs(col))
        if kind == "cos":
            return np.cos(col)
        return col
    if kind == "a":
        return a.astype(float)
    return (t == arg).astype(float)


@dataclass(frozen=True)
class DesignSpec:
    """Ordered list of terms plus an intercept flag.

    Column order of :meth:`matrix` follows ``terms``; the intercept is not a
    column (the fitting routines add it).
    """

    terms: tuple
    intercept: bool = True

    def __post_init__(self):
        terms = tuple(str(t) for t in self.terms)
        seen = set()
        for term in terms:
            factors = term.split(":")
            for f in factors:
                _parse_factor(f)
            key = frozenset(factors)
            if len(key) != len(factors) or key in seen:
                raise ValueError(f"duplicate design term {term!r}")
            seen.add(key)
        object.__setattr__(self, "terms", terms)

    def __len__(self):
        return len(self.terms)

    def matrix(self, w, t=None, a=None):
        """Evaluate the design on rows ``(t, a, w)``; returns shape (n, len(terms))."""
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        n = w.shape[0]
        t = np.zeros(n, dtype=np.int64) if t is None else np.broadcast_to(np.asarray(t), (n,))
        a = np.ones(n, dtype=np.int64) if a is None else np.broadcast_to(np.asarray(a), (n,))
        out = np.empty((n, len(self.terms)))
        cache = {}
        for col, term in enumerate(self.terms):
            prod = None
            for f in term.split(":"):
                if f not in cache:
                    cache[f] = _factor_column(_parse_factor(f), t, a, w)
                prod = cache[f] if prod is None else prod * cache[f]
            out[:, col] = prod
        return out

    def to_dict(self):
        return {"terms": list(self.terms), "intercept": bool(self.intercept)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["terms"]), bool(data.get("intercept", True)))


def main_terms(d):
    """``w1..wd``."""
    return tuple(f"w{j + 1}" for j in range(d))


def rich_terms(d):
    """Raw, ``|.|^{1/2}`` and cosine transforms of every covariate plus all
    two-way interactions among those ``3d`` terms."""
    base = [f"w{j + 1}" for j in range(d)]
    base += [f"sqrt(w{j + 1})" for j in range(d)]
    base += [f"cos(w{j + 1})" for j in range(d)]
    pairs = [f"{x}:{y}" for x, y in itertools.combinations(base, 2)]
    return tuple(base + pairs)


def hazard_terms(base, times, treatment=True):
    """Full interaction of categorical time, treatment and ``base`` terms.

    Time uses reference coding against ``times[0]``; combine with an
    intercept.
    """
    dummies = [f"t={int(s)}" for s in times[1:]]
    blocks = [[""] + dummies]
    if treatment:
        blocks.append(["", "a"])
    blocks.append([""] + list(base))
    terms = []
    for combo in itertools.product(*blocks):
        parts = [c for c in combo if c]
        if parts:
            terms.append(":".join(parts))
    return tuple(terms)
