"""Command line entry point: ``btpp verify | run | sweep | report``.

Exit codes: 0 success, 1 validation error, 2 verification failure,
3 divergence in every seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, fields
from typing import Iterable, Optional, Sequence

from btpp.algorithms import DivergenceError
from btpp.config import ConfigError, ExperimentConfig, load_config
from btpp.simulator import MetricsRecord, RunConfig, run_experiment
from btpp.verification import verify_grid

logger = logging.getLogger("btpp")

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3

HEADER = [f.name for f in fields(MetricsRecord)]
METRICS = ["gamma", "grad_norm_sq", "consensus_err", "dist_to_opt", "f_gap", "vectors_sent"]
AGGREGATES = ("count", "mean", "std", "median")
WORKERS_ENV = "BTPP_WORKERS"


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Iterable[Sequence], header: Sequence[str], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def execute(config: RunConfig) -> tuple[list[MetricsRecord], Optional[str]]:
    try:
        return run_experiment(config), None
    except DivergenceError as err:
        return err.records, str(err)


def run_all(configs: Sequence[RunConfig], workers: int) -> list[tuple[list[MetricsRecord], Optional[str]]]:
    if workers <= 1 or len(configs) <= 1:
        return [execute(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute, configs))


def _emit(text: str, out_path: Optional[str]) -> None:
    if out_path:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_seeds(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds value {raw!r}") from None


def _records_csv(configs: Sequence[RunConfig], workers: int) -> tuple[str, int]:
    results = run_all(configs, workers)
    buf = io.StringIO()
    rows = []
    diverged = 0
    for config, (records, error) in zip(configs, results):
        if error:
            diverged += 1
            print(
                f"diverged: algo={config.algorithm} n={config.problem.n} B={config.B} "
                f"seed={config.seed}: {error}",
                file=sys.stderr,
            )
        rows.extend(astuple(r) for r in records)
    write_csv(rows, HEADER, buf)
    status = EXIT_DIVERGED if configs and diverged == len(configs) else EXIT_OK
    return buf.getvalue(), status


def cmd_run(args) -> int:
    config = load_config(args.config)
    if not config.is_single:
        raise ConfigError(f"{config.source}: run takes single values of n, B and tag; use sweep for lists")
    text, status = _records_csv(config.expand(_parse_seeds(args.seeds)), worker_count())
    _emit(text, args.out)
    return status


def cmd_sweep(args) -> int:
    config: ExperimentConfig = load_config(args.config)
    text, status = _records_csv(config.expand(_parse_seeds(args.seeds)), worker_count())
    _emit(text, args.out)
    return status


def parse_grid(specs: Optional[Sequence[str]]) -> tuple[list[int], list[int]]:
    ns, Bs = list(range(1, 65)), [2, 3, 4, 8]
    for spec in specs or []:
        key, _, raw = spec.partition("=")
        values: list[int] = []
        try:
            for part in raw.split(","):
                if ".." in part:
                    lo, hi = part.split("..")
                    values.extend(range(int(lo), int(hi) + 1))
                else:
                    values.append(int(part))
        except ValueError:
            raise ConfigError(f"bad --grid value {spec!r}") from None
        if key.strip() == "n":
            ns = values
        elif key.strip() == "B":
            Bs = values
        else:
            raise ConfigError(f"--grid expects n=... or B=..., got {spec!r}")
    if not ns or min(ns) < 1 or not Bs or min(Bs) < 2:
        raise ConfigError("grid needs n >= 1 and B >= 2")
    return ns, Bs


def cmd_verify(args) -> int:
    ns, Bs = parse_grid(args.grid)
    results = verify_grid(ns, Bs, inject_fault=args.inject_fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name}: {r.checked} checks, {len(r.failures)} failed"
        if r.failures:
            line += " at " + ", ".join(r.failures[:5]) + (" ..." if len(r.failures) > 5 else "")
        print(line)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def aggregate_rows(
    tables: Sequence[tuple[list[str], list[dict]]], group_by: Sequence[str], aggregates: Sequence[str]
) -> tuple[list[str], list[list]]:
    header = tables[0][0]
    for other, _ in tables[1:]:
        if other != header:
            raise ConfigError("CSV headers differ between inputs")
    missing = [g for g in group_by if g not in header]
    if missing:
        raise ConfigError(f"group_by columns not in header: {missing}")
    metrics = [m for m in METRICS if m in header and m not in group_by]

    groups: dict[tuple, list[dict]] = {}
    for _, rows in tables:
        for row in rows:
            groups.setdefault(tuple(row[g] for g in group_by), []).append(row)

    out_header = list(group_by) + [f"{m}_{a}" for m in metrics for a in aggregates]
    out_rows = []
    for key, rows in groups.items():
        line: list = list(key)
        for m in metrics:
            vals = [float(r[m]) for r in rows if r[m] != ""]
            for a in aggregates:
                line.append(_aggregate(a, vals))
        out_rows.append(line)
    return out_header, out_rows


def _aggregate(kind: str, vals: list[float]):
    if kind == "count":
        return len(vals)
    if not vals:
        return None
    if kind == "mean":
        return math.fsum(vals) / len(vals)
    if kind == "median":
        return float(statistics.median(vals))
    return statistics.stdev(vals) if len(vals) > 1 else 0.0


def cmd_report(args) -> int:
    tables = []
    for path in args.csv:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            tables.append((list(reader.fieldnames or []), list(reader)))
    group_by = [g.strip() for g in args.group_by.split(",") if g.strip()]
    aggregates = [a.strip() for a in args.aggregate.split(",") if a.strip()]
    bad = [a for a in aggregates if a not in AGGREGATES]
    if bad:
        raise ConfigError(f"unknown aggregates {bad}; choose from {AGGREGATES}")
    header, rows = aggregate_rows(tables, group_by, aggregates)
    buf = io.StringIO()
    write_csv(rows, header, buf)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btpp", description="B-ary tree push-pull simulation lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check the tree-matrix properties and the tracking identity")
    p.add_argument("--grid", action="append", help="n=1..64 or B=2,3,4,8 (repeatable)")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    for name, func, text in (
        ("run", cmd_run, "run one configuration for each seed"),
        ("sweep", cmd_sweep, "run the Cartesian product of listed n, B, tag and seeds"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="config file, or preset:NAME")
        p.add_argument("--out", help="write CSV here instead of stdout")
        p.add_argument("--seeds", help="comma-separated seeds overriding the config")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--group-by", default="iter")
    p.add_argument("--aggregate", default="count,mean,std")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
