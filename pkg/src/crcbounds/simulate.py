"""Monte Carlo coverage study for the confidence procedures.

Tables are drawn from independent Poisson cells with fixed means. Every
method sees the same replicate tables, so differences between methods are
paired. Each replicate owns a seed-sequence child, split into a data stream
and a bootstrap seed, which keeps results independent of the worker count.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .loglinear import FitError, ModelFormula, fit_hierarchy, fit_model
from .profile import PLConfig, invert_pl_ci
from .restrictions import HighestOrder, Pairwise, RestrictionSpec, ident_interval, or_lower_bounds
from .tables import ContingencyTable
from .tib import TestConfig, invert_ci

log = logging.getLogger(__name__)

PWID_MEANS = (21.0, 103.0, 13.0, 89.0, 29.0, 24.0, 27.0)
PWID_OR_BOUNDS = (0.078, 1.5, 0.56)
RESTRICTED_METHODS = ("tib", "pl")
MODEL_METHODS = ("bestbic", "indep", "saturated")
# relative gap below which an empty identification interval is read as a point
POINT_GAP = 5e-3


class SimulationError(RuntimeError):
    pass


def default_restrictions(k: int = 3) -> dict[str, RestrictionSpec]:
    """Point-identified, partially identified and misspecified designs."""
    return {
        "gamma0": HighestOrder(0.0),
        "gamma0.3": HighestOrder(0.3),
        "agnostic2.66": Pairwise.agnostic(k, 2.66),
        "agnostic3": Pairwise.agnostic(k, 3.0),
        "positive5.10": Pairwise.positive(k, 5.10),
        "positive10": Pairwise.positive(k, 10.0),
        "agnostic2": Pairwise.agnostic(k, 2.0),
        "positive3": Pairwise.positive(k, 3.0),
    }


@dataclass
class SimConfig:
    true_means: tuple[float, ...] = PWID_MEANS
    replications: int = 500
    methods: tuple[str, ...] = ("tib", "pl", "bestbic")
    restrictions: dict[str, RestrictionSpec] = field(default_factory=default_restrictions)
    M_eval_grid: tuple[int, ...] = tuple(range(250, 3001))
    seed: int = 0
    B: int = 500
    alpha: float = 0.05
    workers: int = 1
    use_threads: bool = False
    pl_starts: int = 2

    def __post_init__(self):
        self.true_means = tuple(float(x) for x in self.true_means)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if any(not (x > 0 and math.isfinite(x)) for x in self.true_means):
            raise ValueError("true means must be positive and finite")
        unknown = set(self.methods) - set(RESTRICTED_METHODS) - set(MODEL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def k(self) -> int:
        return int(round(math.log2(len(self.true_means) + 1)))


def draw_table(means, rng: np.random.Generator, max_attempts: int = 1000) -> tuple[ContingencyTable, int]:
    """Draw one table with all observed cells positive; returns (table, rejections)."""
    means = np.asarray(means, dtype=float)
    rejected = 0
    for attempt in range(1, max_attempts + 1):
        counts = rng.poisson(means)
        if np.all(counts > 0):
            return ContingencyTable.from_counts(counts.tolist()), rejected
        rejected += 1
        if attempt >= 20 and rejected / attempt > 0.5:
            raise SimulationError(
                f"{rejected} of {attempt} draws had an empty cell; the means are too small"
            )
    raise SimulationError(f"no table without empty cells in {max_attempts} draws")


def _keys(cfg: SimConfig) -> list[tuple[str, str]]:
    out = []
    for method in cfg.methods:
        if method in RESTRICTED_METHODS:
            out.extend((method, rid) for rid in cfg.restrictions)
        else:
            out.append((method, "-"))
    return out


def _replicate(cfg: SimConfig, rep: int) -> dict:
    data_ss, boot_ss = np.random.SeedSequence([cfg.seed, rep]).spawn(2)
    tbl, rejected = draw_table(cfg.true_means, np.random.default_rng(data_ss))
    boot_seed = tuple(int(x) for x in boot_ss.generate_state(2))
    counts = tbl.array()
    res: dict = {"rejections": rejected, "ci": {}}
    for method, rid in _keys(cfg):
        t0 = time.perf_counter()
        try:
            lo, hi, empty = _one_ci(cfg, method, rid, tbl, counts, boot_seed)
            err = None
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
            lo, hi, empty, err = math.nan, math.nan, False, f"{type(e).__name__}: {e}"
        res["ci"][(method, rid)] = (lo, hi, empty, err, time.perf_counter() - t0)
    return res


def _one_ci(cfg, method, rid, tbl, counts, boot_seed):
    if method == "tib":
        tc = TestConfig(alpha=cfg.alpha, B=cfg.B, seed=boot_seed, truncate_at_observed=False)
        ci = invert_ci(cfg.restrictions[rid], counts, tc)
        return ci.lo, ci.hi, ci.empty
    if method == "pl":
        pc = PLConfig(alpha=cfg.alpha, truncate_at_observed=False, n_starts=cfg.pl_starts)
        ci = invert_pl_ci(counts, cfg.restrictions[rid], pc)
        return ci.lo, ci.hi, ci.empty
    if method == "bestbic":
        fits = [f for f in fit_hierarchy(tbl, ci=False) if f.best_bic]
        if not fits:
            raise FitError("no k-sample model could be fitted")
        fit = fit_model(tbl, fits[0].model, alpha=cfg.alpha)
    elif method == "indep":
        fit = fit_model(tbl, "[" + ",".join(str(s) for s in range(1, tbl.k + 1)) + "]", alpha=cfg.alpha)
    else:
        pairs = [f"{r}{t}" for r in range(1, tbl.k + 1) for t in range(r + 1, tbl.k + 1)]
        fit = fit_model(tbl, "[" + ",".join(pairs) + "]", alpha=cfg.alpha)
    return fit.ci_lo, fit.ci_hi, False


@dataclass
class MethodSummary:
    method: str
    restriction_id: str
    ident_lo: float
    ident_hi: float
    set_coverage: float
    avg_length: float
    median_length: float
    infinite_rate: float
    empty_ci_rate: float
    failures: int
    runtime: float

    def row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CoverageReport:
    config: SimConfig
    M_grid: np.ndarray
    coverage: dict[tuple[str, str], np.ndarray]
    summaries: list[MethodSummary]
    paired: list[dict]
    intervals: dict[tuple[str, str], np.ndarray]
    rejections: int
    runtime: float

    def coverage_rows(self) -> list[dict]:
        rows = []
        for (method, rid), cov in self.coverage.items():
            for M, p in zip(self.M_grid, cov):
                rows.append({"method": method, "restriction_id": rid, "M": int(M), "coverage": float(p)})
        return rows

    def summary_rows(self) -> list[dict]:
        return [s.row() for s in self.summaries]

    def peak_coverage(self, method: str, rid: str = "-") -> float:
        return float(np.max(self.coverage[(method, rid)]))

    def summary(self, method: str, rid: str = "-") -> MethodSummary:
        for s in self.summaries:
            if s.method == method and s.restriction_id == rid:
                return s
        raise KeyError((method, rid))


def _check_or_bounds(means) -> None:
    if tuple(means) != PWID_MEANS:
        return
    got = [v for _, v in or_lower_bounds(list(means))]
    want = PWID_OR_BOUNDS
    for g, w in zip(got, want):
        digits = len(str(w).split(".")[1])
        if g is None or round(g, digits) != w:
            raise SimulationError(f"fixture check failed: odds-ratio lower bounds {got}, expected {want}")


def target_set(cfg: SimConfig, rid: str) -> tuple[float, float]:
    """Identification interval at the true means; NaN when undefined or empty.

    Rounded point-identifying parameters leave the interval empty by a hair;
    such near-degenerate intervals are read as the single point between.
    """
    if rid not in cfg.restrictions:
        return math.nan, math.nan
    iv = ident_interval(np.asarray(cfg.true_means), cfg.restrictions[rid], cfg.k)
    if not iv.empty:
        return iv.lo, iv.hi
    if iv.lo - iv.hi <= POINT_GAP * iv.hi:
        mid = 0.5 * (iv.lo + iv.hi)
        return mid, mid
    return math.nan, math.nan


def run_coverage(cfg: SimConfig) -> CoverageReport:
    _check_or_bounds(cfg.true_means)
    t0 = time.perf_counter()
    reps = range(cfg.replications)
    if cfg.workers == 1:
        results = [_replicate(cfg, r) for r in reps]
    else:
        pool_cls = ThreadPoolExecutor if cfg.use_threads else ProcessPoolExecutor
        with pool_cls(max_workers=cfg.workers) as pool:
            results = list(pool.map(_replicate, [cfg] * cfg.replications, reps))
    return _aggregate(cfg, results, time.perf_counter() - t0)


def _aggregate(cfg: SimConfig, results: list[dict], runtime: float) -> CoverageReport:
    grid = np.asarray(cfg.M_eval_grid, dtype=float)
    R = len(results)
    coverage, intervals, summaries = {}, {}, []
    hit_set: dict[tuple[str, str], np.ndarray] = {}
    for key in _keys(cfg):
        method, rid = key
        arr = np.array([r["ci"][key][:3] for r in results], dtype=float)
        lo, hi, empty = arr[:, 0], arr[:, 1], arr[:, 2].astype(bool)
        failed = np.array([r["ci"][key][3] is not None for r in results])
        ok = ~empty & ~failed
        # failed or empty replicates count as not covering
        inside = ok[:, None] & (lo[:, None] <= grid) & (grid <= hi[:, None])
        coverage[key] = inside.mean(axis=0)
        intervals[key] = arr
        ilo, ihi = target_set(cfg, rid)
        if math.isnan(ilo):
            hits = np.zeros(R, dtype=bool)
            set_cov = math.nan
        else:
            hits = ok & (lo <= ilo) & (ihi <= hi)
            set_cov = float(hits.mean())
        hit_set[key] = hits
        length = np.where(ok, hi - lo, np.nan)
        finite = length[np.isfinite(length)]
        summaries.append(MethodSummary(
            method, rid, ilo, ihi, set_cov,
            avg_length=float(finite.mean()) if finite.size else math.nan,
            median_length=float(np.median(length[ok])) if ok.any() else math.nan,
            infinite_rate=float(np.mean(ok & np.isinf(hi))),
            empty_ci_rate=float(empty.mean()),
            failures=int(failed.sum()),
            runtime=float(sum(r["ci"][key][4] for r in results)),
        ))
    paired = []
    for rid in cfg.restrictions:
        a, b = ("tib", rid), ("pl", rid)
        if a in hit_set and b in hit_set:
            d = hit_set[a].astype(float) - hit_set[b].astype(float)
            paired.append({
                "restriction_id": rid,
                "difference": float(d.mean()),
                "se": float(d.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan,
            })
    return CoverageReport(cfg, grid, coverage, summaries, paired, intervals,
                          int(sum(r["rejections"] for r in results)), runtime)


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def available_workers() -> int:
    env = os.environ.get("CRC_BOUNDS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer CRC_BOUNDS_THREADS=%r", env)
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
