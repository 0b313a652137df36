"""Command-line entry point: ``moekv run|sweep|cost|trace|report``."""

from __future__ import annotations

import argparse
import sys

from . import harness


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moekv", description="Expert-sharded KV cache simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one config end to end")
    r.add_argument("config")
    r.add_argument("-o", "--out", default="moekv-out", help="directory for events and report")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")

    s = sub.add_parser("sweep", help="run a config over a grid of values")
    s.add_argument("config")
    s.add_argument("--vary", action="append", required=True, metavar="KEY=A,B,C")
    s.add_argument("-o", "--out", default="moekv-sweep")

    c = sub.add_parser("cost", help="print the analytic cost report")
    c.add_argument("config")
    c.add_argument("--vary", action="append", default=[], metavar="KEY=A,B,C")

    t = sub.add_parser("trace", help="write a synthetic trace file")
    t.add_argument("spec")
    t.add_argument("-o", "--output", required=True)

    rep = sub.add_parser("report", help="summarise an event log")
    rep.add_argument("log")
    rep.add_argument("--json", action="store_true")
    return p


def _overrides(pairs):
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise harness.InvalidConfig(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = harness.parse_value(value.strip())
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            overrides = _overrides(args.set)
        except harness.InvalidConfig as exc:
            print(f"moekv: config error: {exc}", file=sys.stderr)
            return harness.EXIT_CONFIG
        return harness.cmd_run(args.config, args.out, overrides=overrides)
    if args.command == "sweep":
        return harness.cmd_sweep(args.config, args.vary, args.out)
    if args.command == "cost":
        return harness.cmd_cost(args.config, args.vary)
    if args.command == "trace":
        return harness.cmd_trace(args.spec, args.output)
    return harness.cmd_report(args.log, as_json=args.json)


if __name__ == "__main__":
    sys.exit(main())
