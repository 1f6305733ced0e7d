"""Top-level command line: run scenarios, recompute reports, benchmarks."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .emma import load_location_dataset
from .errors import CascaError
from .orchestrator import (compute_report, load_scenario, measure_api_overhead,
                           measure_reconfiguration, read_steps_csv, run_scenario)
from .service_api import parse_slos

log = logging.getLogger("casca.cli")


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    out_dir = args.out_dir or scenario.out_dir or "run"
    report = run_scenario(scenario, out_dir)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    run_dir = args.run_dir
    steps = read_steps_csv(os.path.join(run_dir, "steps.csv"))
    with open(os.path.join(run_dir, "scenario.json"), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    base = os.path.dirname(os.path.abspath(args.scenario_base or run_dir))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    slo_specs = parse_slos(resolve(raw["slos"]))
    emma = raw.get("emma", {})
    intensity_fn = None
    power_id = None
    if emma.get("locations"):
        index = load_location_dataset(resolve(emma["locations"]))
        country = emma.get("country", "AT")
        granularity = emma.get("granularity", "hourly")
        power_id = raw.get("decision", {}).get("power_slo_id", "power_w")

        def intensity_fn(ts, _index=index, _c=country, _g=granularity):
            return _index.lookup(_c, ts, _g)

    report = compute_report(steps, os.path.join(run_dir, "telemetry.jsonl"), slo_specs,
                            warmup_steps=int(raw.get("warmup_steps", 100)),
                            power_slo_id=power_id, intensity_fn=intensity_fn)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_bench_reconfig(args) -> int:
    scenario = load_scenario(args.scenario)
    result = measure_reconfiguration(scenario, args.edits)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _cmd_bench_overhead(args) -> int:
    scenario = load_scenario(args.scenario)
    result = measure_api_overhead(scenario, args.n)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="casca",
                                     description="Carbon-aware SLO control platform runner.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario end to end")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", help="run directory (default: scenario's out_dir or ./run)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", help="recompute a report from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--scenario-base", help="directory against which scenario paths resolve")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("bench-reconfig", help="time declarative reconfigurations")
    p.add_argument("--scenario", required=True)
    p.add_argument("--edits", type=int, default=10)
    p.set_defaults(fn=_cmd_bench_reconfig)

    p = sub.add_parser("bench-overhead", help="API round-trip latency harness")
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, default=400)
    p.set_defaults(fn=_cmd_bench_overhead)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CascaError as exc:
        parser.exit(2, f"error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
