"""Command-line entry point: run scenarios, or evaluate the capacity calculators."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

from .capacity import (
    FronthaulParams,
    TrafficProjection,
    cpri_fronthaul_rate,
    fronthaul_to_backhaul_ratio,
    omnify_projection,
    per_user_traffic,
    soda_backhaul_rate,
)
from .errors import CorelessError, ParseError
from .runner import FORMATS, export_report, run_scenario
from .scenario import load_scenario, parse_hz, parse_rate, parse_size, parse_time

log = logging.getLogger("coreless")


def format_rate(bps: float) -> str:
    for unit, scale in (("Tb/s", 1e12), ("Gb/s", 1e9), ("Mb/s", 1e6), ("kb/s", 1e3)):
        if abs(bps) >= scale:
            return f"{bps / scale:.6g} {unit}"
    return f"{bps:.6g} b/s"


def format_bytes(n: float) -> str:
    for unit, scale in (("ZB", 10**21), ("EB", 10**18), ("PB", 10**15), ("TB", 10**12),
                        ("GB", 10**9), ("MB", 10**6), ("kB", 10**3)):
        if abs(n) >= scale:
            if isinstance(n, int) and n % scale == 0:
                return f"{n // scale} {unit}"
            return f"{n / scale:.6g} {unit}"
    return f"{n} B"


def _table(rows) -> str:
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def _fronthaul(args) -> FronthaulParams:
    params = FronthaulParams(parse_hz(args.bw), args.antennas,
                             sample_width_bits=args.sample_bits,
                             compression=Fraction(args.compression))
    params.validate()
    return params


def _add_fronthaul_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bw", default="20MHz", help="carrier bandwidth, e.g. 20MHz or 1GHz")
    p.add_argument("--antennas", type=int, default=2)
    p.add_argument("--sample-bits", type=int, default=15)
    p.add_argument("--compression", default="1", help="compression ratio (1 = none)")


def cmd_capacity(args) -> int:
    if args.calc == "cpri":
        rate = cpri_fronthaul_rate(_fronthaul(args))
        print(_table([("fronthaul rate", format_rate(rate))]))
    elif args.calc == "backhaul":
        rate = soda_backhaul_rate(parse_rate(args.info_rate), args.overhead)
        print(_table([("backhaul rate", format_rate(rate))]))
    elif args.calc == "compare":
        params = _fronthaul(args)
        info = parse_rate(args.info_rate)
        front = cpri_fronthaul_rate(params)
        back = soda_backhaul_rate(info, args.overhead)
        ratio = fronthaul_to_backhaul_ratio(params, info, args.overhead)
        print(_table([("fronthaul rate", format_rate(front)),
                      ("backhaul rate", format_rate(back)),
                      ("fronthaul/backhaul", f"{ratio:.6g}")]))
    elif args.calc == "omnify":
        value = omnify_projection(TrafficProjection(args.from_year, parse_size(args.base),
                                                    args.to_year))
        print(_table([(f"traffic in {args.to_year}", format_bytes(value))]))
    elif args.calc == "per-user":
        value = per_user_traffic(parse_size(args.total), int(float(args.users)))
        print(_table([("traffic per user", format_bytes(value))]))
    return 0


def _run_one(path: str, args, out_dir: str):
    scenario = load_scenario(path)
    until = parse_time(args.until) if args.until else None
    log.debug("running %s (%d directives)", path, len(scenario.directives))
    result = run_scenario(scenario, seed=args.seed, until=until)
    export_report(result, args.format, out_dir, write_trace=args.verbose)
    return result


def cmd_run(args) -> int:
    paths = args.scenario
    if len(paths) == 1:
        dirs = [args.out]
    else:
        stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
        dirs = [os.path.join(args.out, f"{i:02d}-{s}") if stems.count(s) > 1
                else os.path.join(args.out, s) for i, s in enumerate(stems)]

    def job(item):
        path, out_dir = item
        try:
            return path, _run_one(path, args, out_dir), None
        except (ParseError, CorelessError, OSError) as exc:
            return path, None, exc

    # runs share nothing, so each gets its own thread
    with ThreadPoolExecutor(max_workers=max(1, min(len(paths), os.cpu_count() or 1))) as pool:
        outcomes = list(pool.map(job, zip(paths, dirs)))
    code = 0
    for (path, result, error), out_dir in zip(outcomes, dirs):
        if error is not None:
            print(f"{path}: {type(error).__name__}: {error}", file=sys.stderr)
            code = max(code, 2)
            continue
        r = result.report
        print(f"{path}: exit={r.exit_code} flows={len(r.flows)} "
              f"cdr_bytes={r.cdr['total_bytes']} digest={r.digest} -> {out_dir}")
        for message in r.errors:
            print(f"  error: {message}", file=sys.stderr)
        code = max(code, r.exit_code)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coreless",
                                     description="Coreless mobile network simulator")
    parser.add_argument("--scenario", action="append", default=[], metavar="PATH",
                        help="scenario file (repeat to run several in parallel)")
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: the scenario's seed line, else 0)")
    parser.add_argument("--until", default=None, help="end time, e.g. 10s")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--format", choices=FORMATS, default="csv")
    parser.add_argument("--verbose", action="store_true", help="also write trace.log")
    sub = parser.add_subparsers(dest="command")

    cap = sub.add_parser("capacity", help="fronthaul/backhaul/traffic calculators")
    calcs = cap.add_subparsers(dest="calc", required=True)
    _add_fronthaul_flags(calcs.add_parser("cpri", help="CPRI fronthaul bit rate"))
    back = calcs.add_parser("backhaul", help="packet backhaul rate")
    back.add_argument("--info-rate", default="150Mbps")
    back.add_argument("--overhead", type=float, default=0.1)
    cmp_ = calcs.add_parser("compare", help="fronthaul vs backhaul table")
    _add_fronthaul_flags(cmp_)
    cmp_.add_argument("--info-rate", default="150Mbps")
    cmp_.add_argument("--overhead", type=float, default=0.1)
    omni = calcs.add_parser("omnify", help="tenfold-per-five-years traffic projection")
    omni.add_argument("--base", default="1EB", help="traffic in the base year, e.g. 1EB")
    omni.add_argument("--from", dest="from_year", type=int, default=2013)
    omni.add_argument("--to", dest="to_year", type=int, required=True)
    per = calcs.add_parser("per-user", help="total traffic divided across users")
    per.add_argument("--total", required=True, help="e.g. 1ZB")
    per.add_argument("--users", required=True, help="e.g. 5e9")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "capacity":
        try:
            return cmd_capacity(args)
        except (CorelessError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    if not args.scenario:
        parser.error("--scenario is required unless a subcommand is given")
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
