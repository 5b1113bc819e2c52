from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any


@dataclass
class CIResult:
    """A confidence set for M and how it was obtained.

    ``hi`` is ``math.inf`` when the set reaches the upper cap ``delta``.
    ``accepted_points`` is only filled by grid-based methods.
    """

    lo: float
    hi: float
    method: str
    empty: bool = False
    truncated_at_observed: bool = False
    accepted_points: list[float] | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def infinite_upper(self) -> bool:
        return not self.empty and math.isinf(self.hi)

    def contains(self, M: float) -> bool:
        return not self.empty and self.lo <= M <= self.hi

    def covers(self, lo: float, hi: float) -> bool:
        return not self.empty and self.lo <= lo and hi <= self.hi

    @property
    def length(self) -> float:
        return 0.0 if self.empty else self.hi - self.lo

    def to_dict(self, *, points: bool = False) -> dict:
        out = {
            "method": self.method,
            "lo": None if self.empty else self.lo,
            "hi": None if self.empty or math.isinf(self.hi) else self.hi,
            "infinite_upper": self.infinite_upper,
            "empty": self.empty,
            "truncated_at_observed": self.truncated_at_observed,
        }
        if points and self.accepted_points is not None:
            out["accepted_points"] = list(self.accepted_points)
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out


def empty_ci(method: str, **diagnostics) -> CIResult:
    return CIResult(math.nan, math.nan, method, empty=True, diagnostics=dict(diagnostics))
