"""Command-line entry point.

Subcommands:
  run            simulate a scenario file and write reports + figures
  gen-trace      synthesize a workload trace CSV from a spec file
  calibrate-zipf solve the popularity exponent for a concentration target
  sweep-cache    replay a scenario's add-on accesses across cache sizes
  bench-merge    time in-place vs create-and-replace adapter patching

Exit codes: 0 success, 2 configuration/validation error, 3 simulation
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .errors import (
    ConfigError,
    NotFoundError,
    SimulationError,
    TraceFormatError,
    ValidationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_IO = 4


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the seed from the scenario/spec file")
    parser.add_argument("--out-dir", default=None,
                        help="directory for generated files (default: ./addonsim-out)")
    parser.add_argument("--format", choices=("text", "json", "csv"), default="text",
                        help="stdout format for the command summary")


def _out_dir(args) -> Path:
    return Path(args.out_dir) if args.out_dir else Path("addonsim-out")


def _cmd_run(args) -> int:
    from .scenario import run_scenario

    report, paths = run_scenario(args.scenario, out_dir=_out_dir(args),
                                 seed_override=args.seed)
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.format == "csv":
        print((_out_dir(args) / "report.csv").read_text(encoding="utf-8"), end="")
    else:
        meta = report.get("scenario", {})
        print(f"scenario {meta.get('name', '?')}: {meta.get('n_requests', '?')} requests, "
              f"{len(report['policies'])} policies, seed {meta.get('seed', '?')}")
        width = max(len(entry["label"]) for entry in report["policies"])
        for entry in report["policies"]:
            print(f"  {entry['label']:<{width}}  "
                  f"mean {entry['latency_ms']['mean']:10.1f} ms  "
                  f"p95 {entry['latency_ms']['p95']:10.1f} ms  "
                  f"throughput {entry['throughput_images_per_gpu_min']:6.2f} img/GPU-min  "
                  f"speedup {entry['speedup_vs_baseline']:5.2f}x")
        for note in {note for entry in report["policies"] for note in entry["notes"]}:
            print(f"  note: {note}")
        if paths:
            print("wrote: " + " ".join(str(path) for _, path in sorted(paths.items())))
    return EXIT_OK


def _cmd_gen_trace(args) -> int:
    from .scenario import _build_trace_spec
    from .workload import export_csv, generate

    spec_path = Path(args.spec)
    try:
        doc = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}: not valid JSON ({exc})") from exc
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    doc["seed"] = seed
    spec = _build_trace_spec(doc, seed, str(spec_path))
    trace = generate(spec)
    export_csv(trace, args.output)
    summary = {
        "requests": len(trace.requests),
        "output": args.output,
        "seed": seed,
        "spec_hash": trace.provenance.get("spec_hash"),
    }
    if args.format == "json":
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(f"wrote {summary['requests']} requests to {args.output} (seed {seed})")
    return EXIT_OK


def _cmd_calibrate_zipf(args) -> int:
    from .workload import calibrate_zipf, zipf_top_mass

    exponent = calibrate_zipf(args.items, args.top, args.mass)
    achieved = zipf_top_mass(args.items, exponent, args.top)
    if args.format == "json":
        print(json.dumps({
            "n_items": args.items,
            "top_fraction": args.top,
            "target_mass": args.mass,
            "exponent": exponent,
            "achieved_mass": achieved,
        }, indent=2, sort_keys=True))
    elif args.format == "csv":
        print("n_items,top_fraction,target_mass,exponent,achieved_mass")
        print(f"{args.items},{args.top!r},{args.mass!r},{exponent!r},{achieved!r}")
    else:
        print(f"exponent {exponent:.9f} puts mass {achieved:.9f} on the top "
              f"{args.top:.0%} of {args.items} items (target {args.mass})")
    return EXIT_OK


def _parse_capacities(tokens) -> list[float]:
    values: list[float] = []
    for token in tokens:
        for piece in str(token).split(","):
            piece = piece.strip()
            if piece:
                values.append(float(piece))
    if not values:
        raise ValidationError("--capacities needs at least one value")
    return values


def _cmd_sweep_cache(args) -> int:
    from .scenario import sweep_cache

    result, paths = sweep_cache(args.scenario, _parse_capacities(args.capacities),
                                out_dir=_out_dir(args))
    if args.format == "json":
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        for kind in sorted(result["sweep"]):
            for row in result["sweep"][kind]:
                print(f"{kind}: capacity {row['capacity_mib']:10.1f} MiB  "
                      f"hit rate {row['hit_rate']:.4f}  "
                      f"({row['hits']}/{row['accesses']} hits, {row['evictions']} evictions)")
        if paths:
            print("wrote: " + " ".join(str(path) for _, path in sorted(paths.items())))
    return EXIT_OK


def _cmd_bench_merge(args) -> int:
    from .lora import bench_merge

    result = bench_merge(h1=args.h1, h2=args.h2, rank=args.rank,
                         repeats=args.repeats, seed=args.seed or 0)
    if args.format == "json":
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        print(f"layer {args.h1}x{args.h2}, rank {args.rank}, {args.repeats} repeats:")
        print(f"  merge_in_place      {result['merge_in_place_ms']:9.3f} ms  "
              f"({result['in_place_nbytes']} bytes held)")
        print(f"  create_and_replace  {result['create_and_replace_ms']:9.3f} ms  "
              f"({result['create_and_replace_nbytes']} bytes held)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="addonsim",
        description="Discrete-event simulator for diffusion serving with "
                    "ControlNet/LoRA add-ons.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario file")
    p_run.add_argument("scenario", help="path to a scenario JSON file")
    _common_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_gen = sub.add_parser("gen-trace", help="generate a trace CSV from a spec file")
    p_gen.add_argument("spec", help="path to a trace-spec JSON file")
    p_gen.add_argument("-o", "--output", required=True, help="output CSV path")
    _common_flags(p_gen)
    p_gen.set_defaults(func=_cmd_gen_trace)

    p_cal = sub.add_parser("calibrate-zipf", help="solve a Zipf exponent for a mass target")
    p_cal.add_argument("--items", type=int, required=True, help="distinct item count")
    p_cal.add_argument("--top", type=float, required=True, help="top fraction of items")
    p_cal.add_argument("--mass", type=float, required=True, help="target probability mass")
    _common_flags(p_cal)
    p_cal.set_defaults(func=_cmd_calibrate_zipf)

    p_sweep = sub.add_parser("sweep-cache", help="hit-rate sweep over cache capacities")
    p_sweep.add_argument("scenario", help="path to a scenario JSON file")
    p_sweep.add_argument("--capacities", nargs="+", required=True,
                         help="capacities in MiB (space or comma separated)")
    _common_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep_cache)

    p_bench = sub.add_parser("bench-merge", help="time adapter patching routes")
    p_bench.add_argument("--h1", type=int, default=2048)
    p_bench.add_argument("--h2", type=int, default=2048)
    p_bench.add_argument("--rank", type=int, default=64)
    p_bench.add_argument("--repeats", type=int, default=5)
    _common_flags(p_bench)
    p_bench.set_defaults(func=_cmd_bench_merge)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, NotFoundError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
