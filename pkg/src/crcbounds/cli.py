"""Command line interface: ``crcbounds {fit,bounds,ci-tib,ci-pl,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .loglinear import FitError, fit_hierarchy
from .moments import DegenerateVarianceError
from .profile import PLConfig, invert_pl_ci
from .restrictions import RestrictionError, ident_interval, or_lower_bounds, parse_restriction
from .simulate import SimConfig, SimulationError, available_workers, default_restrictions, rows_to_csv, run_coverage
from .tables import TableError, load_table
from .tib import TestConfig, invert_ci

log = logging.getLogger("crcbounds")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TIMING_KEYS = {"runtime", "wall_time", "runtime_s"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


# -- serialisation ---------------------------------------------------------------

def _plain(obj):
    """Convert numpy scalars/arrays, tuples and dataclass rows to JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    if x == int(x) and abs(x) < 2**53:
        return f"{int(x)}.0"
    return format(x, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with floats at 17 significant digits; non-finite floats become null."""
    obj = _plain(obj) if _level == 0 else obj
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    return json.dumps(str(obj))


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else _fmt_float(v) if isinstance(v, float) else v)
                    for k, v in _plain(r).items()})
    return buf.getvalue()


# -- subcommands -----------------------------------------------------------------

def _restriction(args, k: int):
    return parse_restriction(args.restriction, k=k, delta=args.delta)


def cmd_fit(args) -> tuple[dict, list[dict]]:
    tbl = load_table(args.input)
    results = fit_hierarchy(tbl, ci=not args.no_ci, alpha=args.alpha)
    rows = [r.row() for r in results]
    return {"n_obs": tbl.n_obs, "models": rows}, rows


def cmd_bounds(args):
    tbl = load_table(args.input)
    spec = _restriction(args, tbl.k)
    iv = ident_interval(tbl.array(), spec, tbl.k)
    ors = [{"pair": list(p), "or_lower_bound": v} for p, v in or_lower_bounds(tbl)]
    payload = {
        "restriction": spec.to_dict(),
        "lo": iv.lo,
        "hi": iv.hi,
        "feasible": iv.feasible,
        "empty": iv.empty,
        "detail": iv.detail,
        "or_lower_bounds": ors,
    }
    return payload, [{"lo": iv.lo, "hi": iv.hi, "feasible": iv.feasible, "empty": iv.empty}]


def _ci_payload(ci, spec, points: bool):
    d = ci.to_dict(points=points)
    d["restriction"] = spec.to_dict()
    d["runtime"] = ci.diagnostics.get("runtime")
    row = {k: d[k] for k in ("method", "lo", "hi", "infinite_upper", "empty", "truncated_at_observed")}
    return d, [row]


def cmd_ci_tib(args):
    tbl = load_table(args.input)
    spec = _restriction(args, tbl.k)
    cfg = TestConfig(alpha=args.alpha, beta=args.beta, B=args.bootstrap, seed=args.seed, grid=args.grid,
                     delta=spec.delta, truncate_at_observed=args.truncate_at_observed)
    return _ci_payload(invert_ci(spec, tbl, cfg), spec, args.points)


def cmd_ci_pl(args):
    tbl = load_table(args.input)
    spec = _restriction(args, tbl.k)
    cfg = PLConfig(alpha=args.alpha, resolution=args.resolution, truncate_at_observed=args.truncate_at_observed)
    t0 = time.perf_counter()
    ci = invert_pl_ci(tbl.array(), spec, cfg, n_obs=tbl.n_obs)
    ci.diagnostics["runtime"] = time.perf_counter() - t0
    return _ci_payload(ci, spec, False)


def _sim_restrictions(items: list[str] | None, k: int) -> dict:
    if not items:
        return default_restrictions(k)
    out = {}
    for item in items:
        name, sep, text = item.partition(":")
        if not sep:
            name, text = item, item
        out[name] = parse_restriction(text, k=k)
    return out


def cmd_simulate(args):
    means = tuple(float(x) for x in args.means.split(",")) if args.means else None
    k_cfg = SimConfig(true_means=means) if means else SimConfig()
    workers = args.threads or available_workers()
    cfg = SimConfig(
        true_means=k_cfg.true_means,
        replications=args.replications,
        methods=tuple(args.methods.split(",")),
        restrictions=_sim_restrictions(args.restriction, k_cfg.k),
        M_eval_grid=tuple(range(args.m_min, args.m_max + 1)),
        seed=args.seed,
        B=args.bootstrap,
        alpha=args.alpha,
        workers=workers,
        use_threads=args.use_threads,
    )
    rep = run_coverage(cfg)
    summary = rep.summary_rows()
    payload = {
        "replications": cfg.replications,
        "rejected_tables": rep.rejections,
        "summary": summary,
        "paired_differences": rep.paired,
        "runtime": rep.runtime,
    }
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "coverage.csv").write_text(rows_to_csv(rep.coverage_rows()))
        (out / "summary.csv").write_text(_csv(strip_timing(summary) if args.no_timing else summary))
    return payload, summary


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, table: bool = True) -> None:
    if table:
        p.add_argument("--input", required=True, help="table file (JSON or CSV) or builtin:pwid")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="write results here instead of stdout")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: CRC_BOUNDS_THREADS or all CPUs)")
    p.add_argument("--no-timing", action="store_true", help="omit wall times so outputs are byte-identical")
    p.add_argument("--log-level", default="WARNING")


def _truncation(p: argparse.ArgumentParser, default: bool) -> None:
    p.add_argument("--truncate-at-observed", dest="truncate_at_observed", action="store_true", default=default)
    p.add_argument("--no-truncate", dest="truncate_at_observed", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crcbounds", description="Dependence-robust population size bounds for capture-recapture data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="log-linear model hierarchy with estimates and intervals")
    _common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--no-ci", action="store_true", help="skip profile intervals")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bounds", help="identification interval at the observed counts")
    _common(p)
    p.add_argument("--restriction", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("ci-tib", help="test-inversion bootstrap confidence interval")
    _common(p)
    p.add_argument("--restriction", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--bootstrap", "-B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--grid", choices=("adaptive", "exhaustive"), default="adaptive")
    p.add_argument("--points", action="store_true", help="include the accepted grid points")
    _truncation(p, True)
    p.set_defaults(func=cmd_ci_tib)

    p = sub.add_parser("ci-pl", help="profile likelihood confidence interval")
    _common(p)
    p.add_argument("--restriction", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--resolution", type=float, default=0.5)
    _truncation(p, True)
    p.set_defaults(func=cmd_ci_pl)

    p = sub.add_parser("simulate", help="coverage simulation")
    _common(p, table=False)
    p.add_argument("--means", help="comma-separated true cell means (default: the bundled table)")
    p.add_argument("--replications", type=int, default=500)
    p.add_argument("--bootstrap", "-B", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--methods", default="tib,pl,bestbic")
    p.add_argument("--restriction", action="append", help="NAME:SPEC, repeatable (default: built-in designs)")
    p.add_argument("--m-min", type=int, default=250)
    p.add_argument("--m-max", type=int, default=3000)
    p.add_argument("--out-dir", help="directory for coverage.csv and summary.csv")
    p.add_argument("--use-threads", action="store_true", help="thread pool instead of processes")
    p.set_defaults(func=cmd_simulate)
    return parser


def _manifest(args) -> dict:
    # worker count and argv are execution details; leaving them out keeps outputs thread-independent
    skip = ("func", "out", "format", "log_level", "threads", "use_threads", "command")
    config = {k: v for k, v in vars(args).items() if k not in skip}
    return {
        "subcommand": args.command,
        "inputs": [args.input] if getattr(args, "input", None) else [],
        "restriction": getattr(args, "restriction", None),
        "config": config,
        "seed": getattr(args, "seed", None),
        "tool_version": tool_version(),
    }


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (fit, bounds, ci-tib, ci-pl, simulate)")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads:
        os.environ["CRC_BOUNDS_THREADS"] = str(args.threads)

    t0 = time.perf_counter()
    try:
        payload, rows = args.func(args)
    except (RestrictionError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TableError, OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, DegenerateVarianceError, SimulationError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    manifest = _manifest(args)
    manifest["wall_time"] = time.perf_counter() - t0
    doc = {"manifest": manifest, "result": payload}
    if args.no_timing:
        doc = strip_timing(_plain(doc))
        rows = strip_timing(_plain(rows))
    if args.format == "json":
        text = dumps(doc) + "\n"
    else:
        text = _csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        if args.format == "csv":
            Path(args.out + ".manifest.json").write_text(dumps(doc["manifest"]) + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
