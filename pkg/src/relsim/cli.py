"""Batch experiment driver.

Subcommands:

* ``gen-trace``: generate a timed relQuery trace file.
* ``run``: execute a policy x rate x seed grid and emit per-run CSVs plus a
  combined summary.
* ``fit``: fit a linear cost model from calibration samples.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import cost_model, engine, report, workload
from .priority import InfeasibleRequestError, SchedulerConstraints

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _add_common_trace_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="workload preset name (amazon/rotten/beer/pdmx)")
    p.add_argument("--num-relqueries", type=int, default=100)
    p.add_argument("--size-range", default="1,100", help="min,max relQuery size")
    p.add_argument("--mean-input-len", type=int, help="overrides the preset value")
    p.add_argument("--shared-fraction", type=float, default=0.40)
    p.add_argument("--rate", type=float, default=1.0, help="relQueries per second")
    p.add_argument("--seed", type=int, default=0)


def _trace_config(args) -> workload.TraceConfig:
    lo, hi = (int(x) for x in args.size_range.split(","))
    kwargs = dict(
        num_relqueries=args.num_relqueries,
        size_range=(lo, hi),
        rate=args.rate,
        shared_fraction=args.shared_fraction,
        seed=args.seed,
    )
    if args.preset:
        cfg = workload.config_from_preset(args.preset, **kwargs)
    else:
        cfg = workload.TraceConfig(**kwargs)
    if args.mean_input_len:
        cfg.mean_input_len = args.mean_input_len
    return cfg


def cmd_gen_trace(args) -> int:
    cfg = _trace_config(args)
    trace = workload.generate_trace(cfg)
    workload.save_trace(trace, args.out)
    print(
        f"{args.out}: {len(trace.entries)} relQueries, "
        f"{trace.num_requests} requests, rate {trace.rate}/s, seed {trace.seed}"
    )
    return EXIT_OK


def _engine_config(args) -> engine.EngineConfig:
    return engine.EngineConfig(
        constraints=SchedulerConstraints(
            cap=args.cap,
            max_num_seqs=args.max_num_seqs,
            max_num_batched_tokens=args.max_num_batched_tokens,
        ),
        noise_sigma=args.noise_sigma,
        sample_size=args.sample_size,
        tau=args.tau if args.tau is not None else math.inf,
    )


def _run_cell(cell: dict):
    """Execute one (policy, rate, seed) grid cell; used by worker processes."""
    trace = workload.load_trace(cell["trace_path"])
    world = cost_model.load_model(cell["world_model_path"])
    policy_model = (
        cost_model.load_model(cell["policy_model_path"])
        if cell["policy_model_path"]
        else None
    )
    cfg = engine.EngineConfig(
        constraints=SchedulerConstraints(**cell["constraints"]),
        noise_sigma=cell["noise_sigma"],
        sample_size=cell["sample_size"],
        tau=cell["tau"],
    )
    result = engine.run(
        trace, cell["policy"], world, cfg, policy_model, seed=cell["seed"]
    )
    result.write_relquery_csv(cell["out_csv"])
    result.write_decision_csv(cell["out_decisions"])
    return cell["out_csv"]


def _load_run_csv(path: Path, policy: str, rate: float, seed: int) -> engine.RunResult:
    """Rebuild the summary-relevant part of a RunResult from its CSV."""
    import csv as _csv

    ledgers: dict[int, engine.TimestampLedger] = {}
    sizes: dict[int, int] = {}
    with path.open() as f:
        for row in _csv.DictReader(f):
            rel_id = int(row["rel_id"])
            arrival = float(row["arrival_s"])
            w, c, t = (float(row[k]) for k in ("waiting_s", "core_s", "tail_s"))
            ledgers[rel_id] = engine.TimestampLedger(
                arrival=arrival,
                first_prefill_start=arrival + w,
                last_prefill_end=arrival + w + c,
                last_decode_end=arrival + w + c + t,
            )
            sizes[rel_id] = int(row["size"])
    return engine.RunResult(
        policy=policy, rate=rate, seed=seed, ledgers=ledgers,
        relquery_sizes=sizes, decision_log=[], iterations=0, sim_duration=0.0,
        dpu_wall_s=0.0, aba_wall_s=0.0, cache_hit_tokens=0, cache_miss_tokens=0,
    )


def cmd_run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = args.policies.split(",")
    for p in policies:
        if p not in engine.POLICIES:
            print(f"unknown policy {p!r}; choose from {engine.POLICIES}", file=sys.stderr)
            return EXIT_VALIDATION
    rates = [float(r) for r in args.rates.split(",")]
    seeds = list(range(args.seeds))

    world = cost_model.world_preset(args.world_model)
    world_path = out_dir / "world_model.json"
    cost_model.save_model(world, world_path)
    if args.policy_model:
        if not Path(args.policy_model).exists():
            print(f"policy model file not found: {args.policy_model}", file=sys.stderr)
            return EXIT_VALIDATION
        policy_model_path = args.policy_model
    else:
        policy_model_path = None

    # one trace per (rate, seed), shared by all policies of that cell
    traces: dict[tuple[float, int], Path] = {}
    for rate in rates:
        for seed in seeds:
            tpath = out_dir / f"trace_r{rate}_s{seed}.trace"
            if not (args.resume and tpath.exists()):
                ns = argparse.Namespace(**vars(args))
                ns.rate, ns.seed = rate, seed
                trace = workload.generate_trace(_trace_config(ns))
                workload.save_trace(trace, tpath)
            traces[(rate, seed)] = tpath

    cells = []
    for policy in policies:
        for rate in rates:
            for seed in seeds:
                out_csv = out_dir / f"run_{policy}_r{rate}_s{seed}.csv"
                cells.append(
                    {
                        "policy": policy,
                        "rate": rate,
                        "seed": seed,
                        "trace_path": str(traces[(rate, seed)]),
                        "world_model_path": str(world_path),
                        "policy_model_path": policy_model_path,
                        "constraints": {
                            "cap": args.cap,
                            "max_num_seqs": args.max_num_seqs,
                            "max_num_batched_tokens": args.max_num_batched_tokens,
                        },
                        "noise_sigma": args.noise_sigma,
                        "sample_size": args.sample_size,
                        "tau": args.tau if args.tau is not None else math.inf,
                        "out_csv": str(out_csv),
                        "out_decisions": str(
                            out_dir / f"decisions_{policy}_r{rate}_s{seed}.csv"
                        ),
                    }
                )

    todo = [c for c in cells if not (args.resume and Path(c["out_csv"]).exists())]
    try:
        if args.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                list(ex.map(_run_cell, todo))
        else:
            for c in todo:
                _run_cell(c)
    except InfeasibleRequestError as e:
        print(f"run aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except engine.SimulationAborted as e:
        print(f"run aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    results = [
        _load_run_csv(Path(c["out_csv"]), c["policy"], c["rate"], c["seed"])
        for c in cells
    ]
    baseline = args.baseline if args.baseline in policies else policies[0]
    table = report.summarize(results, baseline=baseline)
    table.write_csv(out_dir / "summary.csv")
    table.write_long_csv(out_dir / "summary_long.csv")
    print(f"{len(cells)} runs -> {out_dir}/summary.csv")
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        samples = cost_model.load_samples(args.samples)
        model = cost_model.fit(samples)
    except (cost_model.FitError, OSError) as e:
        print(f"fit failed: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    cost_model.save_model(model, args.out)
    print(
        f"alpha_p={model.alpha_p:.6g} beta_p={model.beta_p:.6g} "
        f"alpha_d={model.alpha_d:.6g} beta_d={model.beta_d:.6g}"
        + (" (clamped)" if model.clamped else "")
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relsim",
        description="Scheduling simulator for templated LLM workloads over tables",
    )
    parser.add_argument("--config", help="JSON file with default argument values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate an arrival trace file")
    _add_common_trace_args(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("run", help="run a policy x rate x seed grid")
    _add_common_trace_args(p)
    p.add_argument("--policies", default="fcfs,sp,relserve")
    p.add_argument("--rates", default="0.5,1.0")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..n-1)")
    p.add_argument("--world-model", default="opt-13b-like")
    p.add_argument("--policy-model", help="fitted model JSON; defaults to the world model")
    p.add_argument("--baseline", default="fcfs")
    p.add_argument("--cap", type=int, default=200_000)
    p.add_argument("--max-num-seqs", type=int, default=256)
    p.add_argument("--max-num-batched-tokens", type=int, default=8192)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--sample-size", type=int, default=8)
    p.add_argument("--tau", type=float, default=None,
                   help="starvation threshold in s/request (default: disabled)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true",
                   help="skip grid cells whose output CSV already exists")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit cost model coefficients from samples")
    p.add_argument("samples", help="CSV of kind,x,duration_s lines")
    p.add_argument("-o", "--out", required=True, help="model JSON output path")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            print(f"bad config file: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        # config supplies defaults; explicit flags win because parse_args
        # already applied them, so only fill values still at parser defaults
        parser_defaults = vars(parser.parse_args([args.command] + _required_stub(args)))
        for key, value in defaults.items():
            key = key.replace("-", "_")
            if hasattr(args, key) and getattr(args, key) == parser_defaults.get(key):
                setattr(args, key, value)
    try:
        return args.func(args)
    except (ValueError, workload.SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def _required_stub(args) -> list[str]:
    """Minimal extra argv so a second parse (for defaults) passes validation."""
    stub = []
    if hasattr(args, "out") and args.out is not None:
        stub += ["--out", str(args.out)] if args.command != "fit" else ["-o", str(args.out)]
    if args.command == "fit":
        stub = [args.samples] + stub
    return stub


if __name__ == "__main__":
    sys.exit(main())
