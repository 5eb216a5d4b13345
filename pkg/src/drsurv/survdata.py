"""Discrete-time right-censored survival data.

A subject is observed as ``(w, a, delta, t_tilde)``.  Equivalently the
outcome process is the sequence ``R_0, L_1, R_1, L_2, ..., R_{K-1}, L_K``
which is all zeros until the first observed censoring (``R_t = 1``) or
event (``L_t = 1``).  Two at-risk indicators are derived from it::

    I_t = 1{R_0..R_{t-1} = 0, L_1..L_{t-1} = 0}   at risk of an observed event at t
    J_t = 1{R_0..R_{t-1} = 0, L_1..L_t = 0}       at risk of censoring at t

with ``J_0 = 1``.  An event and a censoring at the same ``t`` resolve to the
event (``delta = 1{T <= C}``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ValidationError",
    "SurvivalDataset",
    "LongFormTable",
    "Indicators",
    "expand_long_form",
    "collapse_short_form",
    "risk_sets",
    "indicators",
    "read_csv",
    "write_csv",
]

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Raised for malformed survival records or long-form tables.

    ``subject`` holds the offending 0-based subject index and ``line`` the
    1-based input line when the error comes from a file.
    """

    def __init__(self, message, subject=None, line=None):
        super().__init__(message)
        self.subject = subject
        self.line = line


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Short-form survival data.

    Parameters
    ----------
    w : ndarray, shape (n, d)
        Baseline covariates.
    a : ndarray of int, shape (n,)
        Binary treatment.
    delta : ndarray of int, shape (n,)
        1 if the event time was observed.
    t_tilde : ndarray of int, shape (n,)
        Observed time, in ``{0..k_max}``.
    k_max : int
        Horizon ``K``.
    tau : int
        Target time, ``1 <= tau <= k_max``.
    """

    w: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    t_tilde: np.ndarray
    k_max: int
    tau: int

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        n = w.shape[0]
        a = np.asarray(self.a).astype(np.int64).reshape(-1)
        delta = np.asarray(self.delta).astype(np.int64).reshape(-1)
        t_tilde = np.asarray(self.t_tilde).astype(np.int64).reshape(-1)
        for name, arr in (("a", a), ("delta", delta), ("t_tilde", t_tilde)):
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
        if n and w.shape[1] < 1:
            raise ValidationError("covariate dimension must be >= 1")
        k_max, tau = int(self.k_max), int(self.tau)
        if k_max < 1:
            raise ValidationError(f"k_max must be >= 1, got {k_max}")
        if not 1 <= tau <= k_max:
            raise ValidationError(f"tau must lie in [1, {k_max}], got {tau}")
        bad = np.flatnonzero((a != 0) & (a != 1))
        if bad.size:
            raise ValidationError(f"subject {bad[0]}: treatment must be 0/1", subject=int(bad[0]))
        bad = np.flatnonzero((delta != 0) & (delta != 1))
        if bad.size:
            raise ValidationError(f"subject {bad[0]}: event indicator must be 0/1", subject=int(bad[0]))
        bad = np.flatnonzero((t_tilde < 0) | (t_tilde > k_max))
        if bad.size:
            raise ValidationError(
                f"subject {bad[0]}: observed time {t_tilde[bad[0]]} outside [0, {k_max}]",
                subject=int(bad[0]),
            )
        bad = np.flatnonzero((delta == 1) & (t_tilde == 0))
        if bad.size:
            raise ValidationError(
                f"subject {bad[0]}: events occur in 1..K, got an event at time 0",
                subject=int(bad[0]),
            )
        for arr in (w, a, delta, t_tilde):
            arr.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "t_tilde", t_tilde)
        object.__setattr__(self, "k_max", k_max)
        object.__setattr__(self, "tau", tau)

    @property
    def n(self):
        return self.w.shape[0]

    @property
    def d(self):
        return self.w.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        return (
            self.k_max == other.k_max
            and self.tau == other.tau
            and self.w.shape == other.w.shape
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.delta, other.delta)
            and np.array_equal(self.t_tilde, other.t_tilde)
        )

    def subset(self, idx):
        """Dataset restricted to the subjects in ``idx`` (renumbered from 0)."""
        idx = np.asarray(idx)
        return SurvivalDataset(
            self.w[idx], self.a[idx], self.delta[idx], self.t_tilde[idx], self.k_max, self.tau
        )

    def for_arm(self, arm):
        """Recode treatment so that ``arm`` becomes the target arm ``a = 1``."""
        if arm not in (0, 1):
            raise ValueError(f"arm must be 0 or 1, got {arm}")
        if arm == 1:
            return self
        return SurvivalDataset(self.w, 1 - self.a, self.delta, self.t_tilde, self.k_max, self.tau)

    def with_tau(self, tau):
        return SurvivalDataset(self.w, self.a, self.delta, self.t_tilde, self.k_max, tau)


@dataclass(frozen=True)
class Indicators:
    """Dense outcome-process indicators, columns indexed by time ``0..K``.

    ``r[:, t]``, ``l[:, t]``, ``i[:, t]`` and ``j[:, t]`` hold ``R_t``,
    ``L_t``, ``I_t`` and ``J_t``.  ``L_0`` and ``I_0`` are zero by
    construction; ``R_K`` is zero because the study ends at ``K``.
    """

    r: np.ndarray
    l: np.ndarray
    i: np.ndarray
    j: np.ndarray


def indicators(ds):
    """Return :class:`Indicators` for every subject of ``ds``."""
    n, k = ds.n, ds.k_max
    times = np.arange(k + 1)
    tt = ds.t_tilde[:, None]
    event = ds.delta[:, None] == 1
    r = ((tt == times) & ~event & (times < k)).astype(np.int8)
    l = ((tt == times) & event).astype(np.int8)
    # I_t: nothing happened strictly before t (event at t_tilde counts only after it)
    i = np.zeros((n, k + 1), dtype=np.int8)
    i[:, 1:] = (tt >= times[1:]).astype(np.int8)
    j = ((tt > times) | ((tt == times) & ~event)).astype(np.int8)
    j[:, 0] = 1
    return Indicators(r=r, l=l, i=i, j=j)


@dataclass(frozen=True, eq=False)
class LongFormTable:
    """Per-(subject, t) rows ``(t, w, a, J_t, R_t, I_{t+1}, L_{t+1})``.

    Columns are parallel arrays.  With ``truncated=True`` rows after the
    first ``r_t = 1`` or ``l_next = 1`` are absent; otherwise each subject has
    exactly ``K`` rows, zero-filled after its terminal event.
    """

    subject_id: np.ndarray
    t: np.ndarray
    w: np.ndarray
    a: np.ndarray
    j_t: np.ndarray
    r_t: np.ndarray
    i_next: np.ndarray
    l_next: np.ndarray
    k_max: int
    tau: int
    n_subjects: int
    truncated: bool = True

    def __len__(self):
        return self.t.shape[0]

    def rows(self):
        """Iterate rows as dicts; convenient for small tables and tests."""
        for idx in range(len(self)):
            yield {
                "subject_id": int(self.subject_id[idx]),
                "t": int(self.t[idx]),
                "w": self.w[idx],
                "a": int(self.a[idx]),
                "j_t": int(self.j_t[idx]),
                "r_t": int(self.r_t[idx]),
                "i_next": int(self.i_next[idx]),
                "l_next": int(self.l_next[idx]),
            }


def expand_long_form(ds, truncated=True):
    """Expand short-form data to the long form.

    Examples
    --------
    >>> ds = SurvivalDataset([[0.0]], [1], [1], [2], k_max=3, tau=1)
    >>> [(r["t"], r["j_t"], r["r_t"], r["i_next"], r["l_next"])
    ...  for r in expand_long_form(ds, truncated=False).rows()]
    [(0, 1, 0, 1, 0), (1, 1, 0, 1, 1), (2, 0, 0, 0, 0)]
    """
    ind = indicators(ds)
    n, k = ds.n, ds.k_max
    sid = np.repeat(np.arange(n), k)
    t = np.tile(np.arange(k), n)
    j_t = ind.j[:, :k].reshape(-1)
    r_t = ind.r[:, :k].reshape(-1)
    i_next = ind.i[:, 1:].reshape(-1)
    l_next = ind.l[:, 1:].reshape(-1)
    if truncated:
        # keep row t while the subject is still under observation at t
        keep = j_t.astype(bool)
    else:
        keep = np.ones(n * k, dtype=bool)
    return LongFormTable(
        subject_id=sid[keep],
        t=t[keep],
        w=ds.w[sid[keep]],
        a=ds.a[sid[keep]],
        j_t=j_t[keep],
        r_t=r_t[keep],
        i_next=i_next[keep],
        l_next=l_next[keep],
        k_max=k,
        tau=ds.tau,
        n_subjects=n,
        truncated=truncated,
    )


def collapse_short_form(lf):
    """Inverse of :func:`expand_long_form`.

    Raises
    ------
    ValidationError
        If a subject's indicator pattern is not one that
        :func:`expand_long_form` can produce.
    """
    n, k = lf.n_subjects, lf.k_max
    d = lf.w.shape[1] if lf.w.ndim == 2 else 1
    if n == 0:
        return SurvivalDataset(np.zeros((0, d)), [], [], [], k, lf.tau)
    w = np.full((n, lf.w.shape[1]), np.nan)
    a = np.full(n, -1, dtype=np.int64)
    delta = np.zeros(n, dtype=np.int64)
    t_tilde = np.full(n, k, dtype=np.int64)
    order = np.lexsort((lf.t, lf.subject_id))
    sid, t = lf.subject_id[order], lf.t[order]
    seen = np.zeros(n, dtype=bool)
    for pos in range(order.size):
        s, row = int(sid[pos]), int(order[pos])
        if s < 0 or s >= n:
            raise ValidationError(f"subject id {s} out of range", subject=s)
        if not seen[s]:
            seen[s] = True
            w[s] = lf.w[row]
            a[s] = lf.a[row]
            expect_t = 0
            alive = True
            n_r = n_l = 0
        if int(t[pos]) != expect_t:
            raise ValidationError(f"subject {s}: rows are not consecutive from t=0", subject=s)
        expect_t += 1
        jt, rt, inx, lnx = (int(lf.j_t[row]), int(lf.r_t[row]), int(lf.i_next[row]), int(lf.l_next[row]))
        n_r += rt
        n_l += lnx
        if n_r > 1 or n_l > 1:
            raise ValidationError(f"subject {s}: more than one censoring or event row", subject=s)
        if alive:
            if jt != 1 or inx != 1 - rt or (rt and lnx):
                raise ValidationError(f"subject {s}: inconsistent indicators at t={int(t[pos])}", subject=s)
            if rt:
                delta[s], t_tilde[s], alive = 0, int(t[pos]), False
            elif lnx:
                delta[s], t_tilde[s], alive = 1, int(t[pos]) + 1, False
        elif jt or rt or inx or lnx:
            raise ValidationError(f"subject {s}: nonzero indicators after terminal event", subject=s)
        if pos + 1 == order.size or int(sid[pos + 1]) != s:
            if alive and expect_t != k:
                raise ValidationError(f"subject {s}: rows end before K without an event", subject=s)
            if not lf.truncated and expect_t != k:
                raise ValidationError(f"subject {s}: expected {k} rows", subject=s)
    missing = np.flatnonzero(~seen)
    if missing.size:
        raise ValidationError(f"subject {missing[0]} has no rows", subject=int(missing[0]))
    return SurvivalDataset(w, a, delta, t_tilde, k, lf.tau)


def risk_sets(lf, t):
    """Subjects at risk at time ``t``.

    Returns
    -------
    at_risk_event, at_risk_censor : frozenset of int
        ``{i : I_t = 1}`` and ``{i : J_t = 1}``.
    """
    if not 0 <= t <= lf.k_max:
        raise ValueError(f"t must lie in [0, {lf.k_max}], got {t}")
    if t == 0:
        return frozenset(), frozenset(range(lf.n_subjects))
    prev = lf.t == t - 1
    at_event = lf.subject_id[prev & (lf.i_next == 1)]
    if t < lf.k_max:
        cur = lf.t == t
        at_censor = lf.subject_id[cur & (lf.j_t == 1)]
    else:
        # J_K is not stored; it is I_K with no event at K
        at_censor = lf.subject_id[prev & (lf.i_next == 1) & (lf.l_next == 0)]
    return frozenset(int(s) for s in at_event), frozenset(int(s) for s in at_censor)


def read_csv(path, k_max=None, tau=None, strict=True):
    """Read short-form data from CSV.

    The header must contain ``w1..wd``, ``A``, ``time`` and ``event``.  Other
    columns are ignored with a warning.  ``k_max`` defaults to the largest
    observed time and ``tau`` to ``k_max``.

    Raises
    ------
    ValidationError
        With ``line`` set to the offending 1-based line number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError("empty file", line=1) from None
        wcols = sorted(
            (h for h in header if h.startswith("w") and h[1:].isdigit()), key=lambda h: int(h[1:])
        )
        required = ["A", "time", "event"]
        missing = [c for c in required if c not in header]
        if missing or not wcols:
            what = ", ".join(missing) if missing else "w1..wd"
            raise ValidationError(f"missing column(s): {what}", line=1)
        if [int(c[1:]) for c in wcols] != list(range(1, len(wcols) + 1)):
            raise ValidationError("covariate columns must be w1..wd without gaps", line=1)
        extra = [h for h in header if h not in wcols and h not in required]
        if extra:
            logger.warning("ignoring column(s): %s", ", ".join(extra))
        pos = {h: header.index(h) for h in header}
        w_rows, a, t, e = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"line {lineno}: expected {len(header)} fields", line=lineno)
            try:
                wv = [float(row[pos[c]]) for c in wcols]
                av = _parse_int(row[pos["A"]])
                tv = _parse_int(row[pos["time"]])
                ev = _parse_int(row[pos["event"]])
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}", line=lineno) from None
            if strict and not all(math.isfinite(x) for x in wv):
                raise ValidationError(f"line {lineno}: non-finite covariate", line=lineno)
            if av not in (0, 1) or ev not in (0, 1):
                raise ValidationError(f"line {lineno}: A and event must be 0/1", line=lineno)
            if tv < 0 or (ev == 1 and tv == 0):
                raise ValidationError(f"line {lineno}: invalid time {tv}", line=lineno)
            w_rows.append(wv)
            a.append(av)
            t.append(tv)
            e.append(ev)
    w = np.array(w_rows, dtype=float).reshape(len(w_rows), len(wcols))
    if k_max is None:
        k_max = max(t) if t else 1
    if tau is None:
        tau = k_max
    try:
        return SurvivalDataset(w, a, e, t, k_max, tau)
    except ValidationError as exc:
        if exc.subject is not None:
            exc.line = exc.subject + 2
        raise


def _parse_int(text):
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def write_csv(ds, path):
    """Write ``ds`` in the format accepted by :func:`read_csv`."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"w{j + 1}" for j in range(ds.d)] + ["A", "time", "event"])
        for i in range(ds.n):
            writer.writerow([repr(float(x)) for x in ds.w[i]] + [int(ds.a[i]), int(ds.t_tilde[i]), int(ds.delta[i])])
