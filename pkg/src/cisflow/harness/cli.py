"""Command-line entry point: load, failover, recommend and stages.

Exit codes: 0 on success or a PASS verdict, 1 on a FAIL verdict, 2 on
usage and input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from ..cluster import FaultPlan
from .experiments import AppSettings, run_failover_experiment, run_scaling_experiment
from .report import ReportWriteError, write_report_csv
from .scenarios import KINDS, LoadScenario, RateSchedule

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _worker_list(text: str) -> list[int]:
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad worker list {text!r}") from None
    if not counts or any(n < 1 for n in counts):
        raise argparse.ArgumentTypeError("worker counts must be positive integers")
    return counts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cisflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    load = sub.add_parser("load", help="step the input rate and find the max sustainable rate")
    load.add_argument("--scenario", required=True, choices=KINDS)
    load.add_argument("--workers", type=_worker_list, default=[1],
                      help="worker count or comma list, e.g. 1,2,4")
    load.add_argument("--start", type=int, default=None, help="first rate (default: --step)")
    load.add_argument("--step", type=int, default=500)
    load.add_argument("--max", type=int, default=10_000)
    load.add_argument("--dwell", type=int, default=30, help="virtual seconds per rate step")
    load.add_argument("--vehicles", type=int, default=1000, help="fleet size for ls2")
    load.add_argument("--seed", type=int, default=0)
    load.add_argument("--out", required=True)

    fo = sub.add_parser("failover", help="run a fault plan and judge the outcome")
    fo.add_argument("--plan", required=True, help="JSON list of {t_ms, event, node}")
    fo.add_argument("--rate", type=int, default=500)
    fo.add_argument("--duration", type=int, default=None, help="virtual seconds of input")
    fo.add_argument("--unreliable", action="store_true", help="auto-acking receiver")
    fo.add_argument("--seed", type=int, default=0)
    fo.add_argument("--out", required=True)

    rec = sub.add_parser("recommend", help="one-shot run of the recommendation pipeline")
    rec.add_argument("--stations", required=True)
    rec.add_argument("--prices", required=True)
    rec.add_argument("--input", required=True, help="vehicle messages, one JSON per line")

    st = sub.add_parser("stages", help="print the stage plan of the demo pipeline")
    st.add_argument("--demo", action="store_true", required=True)
    return p


def cmd_load(args, out=None) -> int:
    try:
        schedule = RateSchedule(args.start or args.step, args.step, args.max, args.dwell)
        scenario = LoadScenario.named(args.scenario, args.vehicles)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = run_scaling_experiment(args.workers, scenario, schedule, args.seed)
    write_report_csv(result.report, args.out)
    for n, rate in result.max_rate.items():
        print(f"workers={n} max_sustainable_rate={rate}", file=out)
    return EXIT_PASS


def load_plan(path: str) -> FaultPlan:
    try:
        with open(path, encoding="utf-8") as fh:
            items = json.load(fh)
        if not isinstance(items, list):
            raise ValueError("plan must be a JSON list")
        return FaultPlan.from_json(items)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad fault plan {path}: {exc}") from exc


def cmd_failover(args, out=None) -> int:
    plan = load_plan(args.plan)
    if args.rate <= 0:
        raise UsageError("--rate must be positive")
    result = run_failover_experiment(plan, rate=args.rate, seed=args.seed,
                                     duration_s=args.duration, reliable=not args.unreliable,
                                     settings=AppSettings())
    write_report_csv(result.report, args.out)
    print(result.verdict.summary(), file=out)
    return EXIT_PASS if result.verdict.passed else EXIT_FAIL


def cmd_recommend(args, out=None) -> int:
    from ..cis.app import run_oneshot
    from ..cis.data import CsvFormatError, load_prices_csv, load_stations_csv
    from ..cis.recommend import Recommendation

    try:
        stations = load_stations_csv(args.stations)
        events = load_prices_csv(args.prices)
        with open(args.input, "rb") as fh:
            payloads = [line.rstrip(b"\r\n") for line in fh if line.strip()]
    except (OSError, CsvFormatError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    for o in run_oneshot(stations, events, payloads):
        doc = {"vehicleid": o.vehicle_id, "reason": o.reason, "timestamp": o.timestamp}
        if isinstance(o, Recommendation):
            doc.update(station_id=o.station_id, price=o.price_per_liter,
                       distance_km=round(o.distance_km, 4),
                       expected_cost=round(o.expected_fill_cost, 4))
        print(json.dumps(doc, sort_keys=True), file=out)
    return EXIT_PASS


def cmd_stages(args, out=None) -> int:
    from ..engine.core import Context, LocalBackend

    ctx = Context(LocalBackend(2, 2))
    lines = [f"{i} {'ERROR' if i % 3 == 0 else 'INFO'} "
             f"{'MySQL timeout' if i % 6 == 0 else 'request served'}" for i in range(24)]
    log = ctx.parallelize(lines, 4, name="log-items")
    errors = log.filter(lambda s: s.split()[1] == "ERROR", name="errors").persist()
    times = errors.map(lambda s: int(s.split()[0]), name="error-times")

    def show(title, ds):
        print(title, file=out)
        for st in ctx.build_stages(ds):
            print(f"  stage {st.stage_id}: pipeline={list(st.pipeline)} boundary={st.boundary} "
                  f"partitions={list(st.partitions)}", file=out)

    show("error times (collect):", times)
    print(f"  collect -> {times.collect()}", file=out)
    mysql = errors.filter(lambda s: "MySQL" in s, name="mysql-errors")
    show("mysql errors (count), errors now cached:", mysql)
    print(f"  count -> {mysql.count()}", file=out)
    names = {d.id: d.name for d in times.lineage() + mysql.lineage()}
    print("datasets: " + ", ".join(f"{k}={v}" for k, v in sorted(names.items())), file=out)
    return EXIT_PASS


COMMANDS = {"load": cmd_load, "failover": cmd_failover, "recommend": cmd_recommend,
            "stages": cmd_stages}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        return COMMANDS[args.command](args, sys.stdout)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReportWriteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
