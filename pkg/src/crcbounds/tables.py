"""Capture-recapture contingency tables.

Subsets of the k samples are labelled ``i = 0 .. 2**k - 1``. Bit ``t`` of the
label (most significant bit first) says whether sample ``t + 1`` caught the
units in that subset, so ``i = 4`` with ``k = 3`` is the history ``(1, 0, 0)``.
Cell 0 (never captured) is unobserved.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAX_K = 20


class TableError(ValueError):
    """Malformed or inconsistent capture-recapture input."""


class MissingCellWarning(UserWarning):
    pass


def _check_k(k: int) -> None:
    if not 2 <= k <= MAX_K:
        raise TableError(f"k must be in [2, {MAX_K}], got {k}")


def index_to_history(i: int, k: int) -> tuple[int, ...]:
    if not 0 <= i < 2**k:
        raise TableError(f"subset index {i} out of range for k={k}")
    return tuple((i >> (k - 1 - t)) & 1 for t in range(k))


def history_to_index(bits: Sequence[int]) -> int:
    i = 0
    for b in bits:
        if b not in (0, 1):
            raise TableError(f"capture history entries must be 0/1, got {b!r}")
        i = (i << 1) | int(b)
    return i


def parse_history(text: str, k: int | None = None) -> tuple[int, ...]:
    text = text.strip()
    if not text or any(ch not in "01" for ch in text):
        raise TableError(f"malformed capture history {text!r}")
    if k is not None and len(text) != k:
        raise TableError(f"history {text!r} has length {len(text)}, expected {k}")
    return tuple(int(ch) for ch in text)


@lru_cache(maxsize=None)
def design_terms(k: int) -> tuple[tuple[int, ...], ...]:
    """Interaction terms in design-vector column order.

    Ordered by size, then lexicographically: for k = 3 that is
    (), (1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3).
    """
    return tuple(
        t for size in range(k + 1) for t in itertools.combinations(range(1, k + 1), size)
    )


def design_vector(history: Sequence[int]) -> tuple[int, ...]:
    """Entry for term T is 1 iff every sample in T caught the unit; entry 0 is the intercept."""
    k = len(history)
    history_to_index(history)
    return tuple(int(all(history[s - 1] for s in term)) for term in design_terms(k))


@lru_cache(maxsize=None)
def history_matrix(k: int) -> np.ndarray:
    """(2**k, k) array of capture histories in label order."""
    _check_k(k)
    idx = np.arange(2**k)[:, None]
    shifts = np.arange(k - 1, -1, -1)[None, :]
    out = (idx >> shifts) & 1
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParitySets:
    odd: tuple[int, ...]
    even: tuple[int, ...]


@lru_cache(maxsize=None)
def parity_sets(k: int) -> ParitySets:
    """Split the subset labels by the parity of their capture counts.

    ``odd`` holds labels with an odd number of captures and ``even`` the
    nonzero labels with an even number; label 0 is in neither.
    """
    _check_k(k)
    sums = history_matrix(k).sum(axis=1)
    odd = tuple(int(i) for i in np.flatnonzero(sums % 2 == 1))
    even = tuple(int(i) for i in np.flatnonzero(sums % 2 == 0) if i != 0)
    return ParitySets(odd, even)


@dataclass(frozen=True)
class PairwiseMarginal:
    n11: float
    n10: float
    n01: float
    n00: float


def pair_groups(k: int, r: int, t: int) -> np.ndarray:
    """Group code per observed cell (labels 1..c) for the sample pair (r, t).

    Codes are 3 for (1,1), 2 for (1,0), 1 for (0,1) and 0 for (0,0).
    """
    if r == t or not (1 <= r <= k and 1 <= t <= k):
        raise TableError(f"invalid sample pair ({r}, {t}) for k={k}")
    h = history_matrix(k)[1:]
    return 2 * h[:, r - 1] + h[:, t - 1]


@dataclass(frozen=True)
class ContingencyTable:
    k: int
    counts: tuple[float, ...]
    missing_cells: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        _check_k(self.k)
        if len(self.counts) != 2**self.k - 1:
            raise TableError(
                f"expected {2**self.k - 1} observed cells for k={self.k}, got {len(self.counts)}"
            )
        if any(not np.isfinite(x) or x < 0 for x in self.counts):
            raise TableError("cell counts must be finite and nonnegative")

    @classmethod
    def from_counts(cls, counts: Sequence[float], k: int | None = None) -> "ContingencyTable":
        counts = tuple(float(x) if not float(x).is_integer() else int(x) for x in counts)
        if k is None:
            k = int(round(np.log2(len(counts) + 1)))
        return cls(k, counts)

    @property
    def c(self) -> int:
        return 2**self.k - 1

    @property
    def n_obs(self) -> float:
        return sum(self.counts)

    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float)

    def pairwise_marginal(self, r: int, t: int) -> PairwiseMarginal:
        return pairwise_marginal(self, r, t)

    def collapse(self, samples: Sequence[int]) -> "ContingencyTable":
        """Table seen by the listed samples only.

        Units caught only by dropped samples fall into the unobserved cell.
        """
        samples = sorted(set(samples))
        if len(samples) < 2 or any(not 1 <= s <= self.k for s in samples):
            raise TableError(f"cannot collapse onto samples {samples}")
        h = history_matrix(self.k)[1:][:, [s - 1 for s in samples]]
        sub = h @ (1 << np.arange(len(samples) - 1, -1, -1))
        out = np.zeros(2 ** len(samples))
        np.add.at(out, sub, self.array())
        return ContingencyTable.from_counts(out[1:], len(samples))


def pairwise_marginal(tbl: ContingencyTable, r: int, t: int) -> PairwiseMarginal:
    if not r < t:
        raise TableError(f"pair must satisfy r < t, got ({r}, {t})")
    g = pair_groups(tbl.k, r, t)
    sums = np.bincount(g, weights=tbl.array(), minlength=4)
    vals = [int(v) if float(v).is_integer() else float(v) for v in sums]
    return PairwiseMarginal(n11=vals[3], n10=vals[2], n01=vals[1], n00=vals[0])


def _from_cells(k: int, cells: Iterable[tuple[str, float]]) -> ContingencyTable:
    _check_k(k)
    counts: dict[int, float] = {}
    for hist, count in cells:
        bits = parse_history(str(hist), k)
        i = history_to_index(bits)
        if i == 0:
            raise TableError("the never-captured history is unobserved and cannot be given")
        if i in counts:
            raise TableError(f"duplicate history {hist!r}")
        count = float(count)
        if not np.isfinite(count) or count < 0:
            raise TableError(f"negative or non-finite count for history {hist!r}")
        counts[i] = int(count) if count.is_integer() else count
    missing = tuple(i for i in range(1, 2**k) if i not in counts)
    if missing:
        warnings.warn(
            f"{len(missing)} observed cell(s) missing from input, set to 0: "
            + ", ".join("".join(map(str, index_to_history(i, k))) for i in missing),
            MissingCellWarning,
            stacklevel=3,
        )
    return ContingencyTable(k, tuple(counts.get(i, 0) for i in range(1, 2**k)), missing)


def parse_table(source: str, fmt: str | None = None) -> ContingencyTable:
    """Parse a table from JSON or CSV text.

    JSON looks like ``{"k": 3, "cells": [{"history": "001", "count": 21}, ...]}``;
    CSV has a ``history,count`` header. Histories may come in any order.
    """
    text = source.strip()
    if fmt is None:
        fmt = "json" if text.startswith("{") else "csv"
    if fmt == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise TableError(f"invalid JSON: {e}") from None
        if not isinstance(doc, dict) or "cells" not in doc:
            raise TableError("JSON table needs a 'cells' list")
        try:
            cells = [(str(c["history"]), c["count"]) for c in doc["cells"]]
        except (KeyError, TypeError):
            raise TableError("each cell needs 'history' and 'count'") from None
        k = doc.get("k")
        if k is None:
            if not cells:
                raise TableError("empty table without k")
            k = len(cells[0][0].strip())
        return _from_cells(int(k), cells)
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or {"history", "count"} - set(reader.fieldnames):
            raise TableError("CSV needs a 'history,count' header")
        rows = [(r["history"], r["count"]) for r in reader]
        if not rows:
            raise TableError("CSV table has no rows")
        try:
            rows = [(h, float(c)) for h, c in rows]
        except (TypeError, ValueError):
            raise TableError("non-numeric count in CSV") from None
        return _from_cells(len(rows[0][0].strip()), rows)
    raise TableError(f"unknown table format {fmt!r}")


def load_table(path: str) -> ContingencyTable:
    """Read a table file; ``builtin:pwid`` gives the bundled PWID fixture."""
    if path.startswith("builtin:"):
        return builtin_table(path.split(":", 1)[1])
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    fmt = "csv" if path.lower().endswith(".csv") else None
    return parse_table(text, fmt)


def builtin_table(name: str) -> ContingencyTable:
    from importlib import resources

    try:
        text = resources.files("crcbounds").joinpath("data").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise TableError(f"no bundled table named {name!r}") from None
    return parse_table(text, "json")


def pwid_table() -> ContingencyTable:
    return builtin_table("pwid")
