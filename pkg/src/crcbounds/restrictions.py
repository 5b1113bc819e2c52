"""Dependence restrictions and the population-size intervals they identify."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .tables import ContingencyTable, TableError, pair_groups, parity_sets

DEFAULT_DELTA = 1e8


class RestrictionError(ValueError):
    pass


@dataclass(frozen=True)
class HighestOrder:
    """Bound ``|lambda_c| <= gamma`` on the all-samples interaction."""

    gamma: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise RestrictionError(f"gamma must be finite and >= 0, got {self.gamma}")
        _check_delta(self.delta)

    def to_dict(self) -> dict:
        return {"type": "highest_order", "gamma": self.gamma, "delta": self.delta}


@dataclass(frozen=True)
class PairConstraint:
    r: int
    t: int
    eta: float
    xi: float

    def __post_init__(self):
        if self.r == self.t:
            raise RestrictionError("a pairwise constraint needs two distinct samples")
        if self.r > self.t:
            r, t = self.t, self.r
            object.__setattr__(self, "r", r)
            object.__setattr__(self, "t", t)
        if not (0 <= self.eta < self.xi and math.isfinite(self.xi)):
            raise RestrictionError(
                f"pair ({self.r},{self.t}): need 0 <= eta < xi < inf, got eta={self.eta}, xi={self.xi}"
            )


@dataclass(frozen=True)
class Pairwise:
    """Odds-ratio bounds ``eta_j <= OR(r_j, t_j) <= xi_j`` on selected sample pairs."""

    constraints: tuple[PairConstraint, ...]
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.constraints:
            raise RestrictionError("pairwise restriction needs at least one constraint")
        pairs = [(c.r, c.t) for c in self.constraints]
        if len(set(pairs)) != len(pairs):
            raise RestrictionError("pairwise constraints must be on distinct pairs")
        _check_delta(self.delta)

    @classmethod
    def all_pairs(cls, k: int, eta: float, xi: float, delta: float = DEFAULT_DELTA) -> "Pairwise":
        return cls(
            tuple(PairConstraint(r, t, eta, xi) for r in range(1, k + 1) for t in range(r + 1, k + 1)),
            delta,
        )

    @classmethod
    def agnostic(cls, k: int, xi: float, delta: float = DEFAULT_DELTA) -> "Pairwise":
        return cls.all_pairs(k, 1.0 / xi, xi, delta)

    @classmethod
    def positive(cls, k: int, xi: float, delta: float = DEFAULT_DELTA) -> "Pairwise":
        return cls.all_pairs(k, 1.0, xi, delta)

    def validate_for(self, k: int) -> None:
        for c in self.constraints:
            if c.t > k:
                raise RestrictionError(f"pair ({c.r},{c.t}) refers to a sample beyond k={k}")

    def to_dict(self) -> dict:
        return {
            "type": "pairwise",
            "constraints": [{"r": c.r, "t": c.t, "eta": c.eta, "xi": c.xi} for c in self.constraints],
            "delta": self.delta,
        }


RestrictionSpec = Union[HighestOrder, Pairwise]


def _check_delta(delta: float) -> None:
    if not (math.isfinite(delta) and delta > 0):
        raise RestrictionError(f"delta must be finite and > 0, got {delta}")


def parse_restriction(text: str, k: int | None = None, delta: float | None = None) -> RestrictionSpec:
    """Parse a restriction from JSON or a short ``key=value`` form.

    Short forms: ``gamma=0.1``; ``agnostic=3`` (``1/3 <= OR <= 3`` on every
    pair); ``positive=5`` (``1 <= OR <= 5``); ``eta=1,xi=5`` (every pair).
    The all-pairs forms need ``k``.
    """
    text = text.strip()
    if text.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise RestrictionError(f"invalid restriction JSON: {e}") from None
        return restriction_from_dict(doc, delta)
    try:
        kv = dict(part.split("=", 1) for part in text.split(","))
        kv = {key.strip().lower(): float(v) for key, v in kv.items()}
    except ValueError:
        raise RestrictionError(f"cannot parse restriction {text!r}") from None
    d = kv.pop("delta", delta if delta is not None else DEFAULT_DELTA)
    if set(kv) == {"gamma"}:
        return HighestOrder(kv["gamma"], d)
    if k is None:
        raise RestrictionError("all-pairs restriction shorthand needs the table's k")
    if set(kv) == {"agnostic"}:
        return Pairwise.agnostic(k, kv["agnostic"], d)
    if set(kv) == {"positive"}:
        return Pairwise.positive(k, kv["positive"], d)
    if set(kv) == {"eta", "xi"}:
        return Pairwise.all_pairs(k, kv["eta"], kv["xi"], d)
    raise RestrictionError(f"cannot parse restriction {text!r}")


def restriction_from_dict(doc: dict, delta: float | None = None) -> RestrictionSpec:
    if not isinstance(doc, dict):
        raise RestrictionError("restriction must be a JSON object")
    d = float(doc.get("delta", delta if delta is not None else DEFAULT_DELTA))
    kind = doc.get("type")
    try:
        if kind == "highest_order":
            return HighestOrder(float(doc["gamma"]), d)
        if kind == "pairwise":
            cons = tuple(
                PairConstraint(int(c["r"]), int(c["t"]), float(c["eta"]), float(c["xi"]))
                for c in doc["constraints"]
            )
            return Pairwise(cons, d)
    except (KeyError, TypeError) as e:
        raise RestrictionError(f"incomplete restriction: missing {e}") from None
    raise RestrictionError(f"unknown restriction type {kind!r}")


@dataclass(frozen=True)
class IdentInterval:
    lo: float
    hi: float
    feasible: bool = True
    detail: dict = field(default_factory=dict, compare=False)

    @property
    def empty(self) -> bool:
        return not self.feasible or self.lo > self.hi

    def contains(self, M: float, rtol: float = 0.0) -> bool:
        if self.empty:
            return False
        slack = rtol * max(abs(self.lo), abs(self.hi), 1.0)
        return self.lo - slack <= M <= self.hi + slack


def _as_means(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 1:
        raise RestrictionError("mean vector must be one-dimensional")
    return m


def _k_of(m: np.ndarray) -> int:
    k = int(round(math.log2(m.size + 1)))
    if 2**k - 1 != m.size:
        raise TableError(f"mean vector length {m.size} is not 2**k - 1")
    return k


def highest_order_ratio(m, k: int | None = None) -> float:
    """prod(m over odd-parity cells) / prod(m over even-parity cells), in logs for stability."""
    m = _as_means(m)
    k = k or _k_of(m)
    ps = parity_sets(k)
    odd = m[np.array(ps.odd) - 1]
    even = m[np.array(ps.even) - 1]
    if np.any(even <= 0):
        raise RestrictionError("an even-parity cell mean is zero; the interval is undefined")
    if np.any(odd <= 0):
        return 0.0
    return float(np.exp(np.log(odd).sum() - np.log(even).sum()))


def ident_interval_highest(m, gamma: float, k: int | None = None) -> IdentInterval:
    m = _as_means(m)
    if gamma < 0:
        raise RestrictionError("gamma must be >= 0")
    R = highest_order_ratio(m, k)
    s = float(m.sum())
    return IdentInterval(s + R * math.exp(-gamma), s + R * math.exp(gamma), True, {"ratio": R, "sum": s})


def pair_means(m, k: int, r: int, t: int) -> tuple[float, float, float, float]:
    """(m11, m10, m01, m00) aggregated over observed cells for pair (r, t)."""
    g = pair_groups(k, r, t)
    s = np.bincount(g, weights=_as_means(m), minlength=4)
    return float(s[3]), float(s[2]), float(s[1]), float(s[0])


def ident_interval_pairwise(m, spec: Pairwise, k: int | None = None) -> IdentInterval:
    m = _as_means(m)
    k = k or _k_of(m)
    spec.validate_for(k)
    los, his = [], []
    for c in spec.constraints:
        m11, m10, m01, _ = pair_means(m, k, c.r, c.t)
        if m11 <= 0:
            raise RestrictionError(f"pair ({c.r},{c.t}) has m11 = 0; the interval is undefined")
        base = m10 + m01 + m11
        cross = m10 * m01 / m11
        los.append(c.eta * cross + base)
        his.append(c.xi * cross + base)
    lo, hi = max(los), min(his)
    return IdentInterval(lo, hi, lo <= hi, {"pair_lo": los, "pair_hi": his})


def ident_interval(m, spec: RestrictionSpec, k: int | None = None) -> IdentInterval:
    if isinstance(spec, HighestOrder):
        return ident_interval_highest(m, spec.gamma, k)
    return ident_interval_pairwise(m, spec, k)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    reasons: tuple[str, ...] = ()


def check_feasibility(m, M: float, spec: RestrictionSpec, rtol: float = 1e-12) -> Feasibility:
    """Whether ``(M, m)`` lies in the restricted parameter space."""
    m = _as_means(m)
    reasons = []
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        reasons.append("cell means must be positive and finite")
    if M < m.sum():
        reasons.append("M is below the total of observed-cell means")
    if M > spec.delta:
        reasons.append("M exceeds delta")
    if not reasons:
        try:
            iv = ident_interval(m, spec)
        except RestrictionError as e:
            reasons.append(str(e))
        else:
            if isinstance(spec, Pairwise):
                for c, lo, hi in zip(spec.constraints, iv.detail["pair_lo"], iv.detail["pair_hi"]):
                    tol = rtol * max(abs(M), 1.0)
                    if not lo - tol <= M <= hi + tol:
                        reasons.append(f"odds ratio for pair ({c.r},{c.t}) outside [{c.eta}, {c.xi}]")
            elif not iv.contains(M, rtol):
                reasons.append("highest-order interaction outside [-gamma, gamma]")
    return Feasibility(not reasons, tuple(reasons))


def or_lower_bounds(tbl: ContingencyTable | Sequence[float]) -> list[tuple[tuple[int, int], float | None]]:
    """Lower bound n11*n00/(n10*n01) on each pairwise odds ratio, from observed cells only."""
    m = tbl.array() if isinstance(tbl, ContingencyTable) else _as_means(tbl)
    k = _k_of(m)
    out = []
    for r in range(1, k + 1):
        for t in range(r + 1, k + 1):
            m11, m10, m01, m00 = pair_means(m, k, r, t)
            den = m10 * m01
            out.append(((r, t), m11 * m00 / den if den > 0 else None))
    return out
