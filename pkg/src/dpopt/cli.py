"""Command-line front end.

One subcommand per experiment mode plus two utilities::

    dpopt consensus  --config exp.toml [--runs N] [--workers N] [--out DIR]
    dpopt optimize   --config exp.toml [...]
    dpopt compare    --config exp.toml [...]
    dpopt accountant --config exp.toml          # CSV table on stdout
    dpopt oracle     --config exp.toml          # JSON report on stdout
    dpopt validate-config --config exp.toml     # certificate report, exit 0/1
    dpopt bench [--agents N] [--dim D] [--rounds K] [--repeats R]

The subcommand decides the mode: a config that declares a different ``mode``
is rejected, and a config that omits ``mode`` inherits the subcommand's.
Output directory precedence: ``--out``, then ``$DPOPT_OUT_DIR``, then the
config's ``out_dir``, then ``dpopt_results``.  Exit status is 0 on success,
1 when no run completed (or validation failed), 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .errors import DpoptError
from .harness import (
    ENV_OUT_DIR,
    accountant_table,
    certificate_report,
    compare_baselines,
    load_toml,
    oracle_report,
    parse_config,
    run_experiment,
    _jsonable,
    _resolve_out_dir,
)

_RUN_MODES = ("consensus", "optimize", "compare")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dpopt",
        description=("Differentially private distributed optimization: "
                     "run experiments, tabulate privacy budgets, and solve "
                     "reference problems from TOML configs."))
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, metavar="FILE",
                       help="TOML experiment file")

    for mode in _RUN_MODES:
        p = sub.add_parser(mode, help=f"run a {mode} experiment")
        add_config(p)
        p.add_argument("--runs", type=int, metavar="N",
                       help="run N derived seeds (replaces the config's "
                            "seeds/runs)")
        p.add_argument("--workers", type=int, metavar="N",
                       help="process-pool size for the runs")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--override-certificates", action="store_true",
                       help="run even when a schedule certificate fails")
        p.set_defaults(func=_cmd_run, mode=mode)

    p = sub.add_parser("accountant",
                       help="print the privacy-budget table as CSV")
    add_config(p)
    p.set_defaults(func=_cmd_accountant, mode="accountant")

    p = sub.add_parser("oracle",
                       help="print the centralized reference solution as "
                            "JSON")
    add_config(p)
    p.set_defaults(func=_cmd_oracle, mode="oracle")

    p = sub.add_parser("validate-config",
                       help="check every schedule certificate in a config")
    add_config(p)
    p.set_defaults(func=_cmd_validate, mode=None)

    p = sub.add_parser("bench",
                       help="time the numpy and numba kernel paths")
    p.add_argument("--agents", type=int, default=16)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--rounds", type=int, default=2000)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=_cmd_bench, mode=None)

    return parser


def _load_for(args):
    """Load the config file with the subcommand's mode and CLI overrides."""
    path = Path(args.config)
    data = load_toml(path)
    if not isinstance(data, dict):
        raise DpoptError("config root must be a table")
    declared = data.get("mode")
    if args.mode is not None:
        if declared is not None and declared != args.mode:
            raise DpoptError(
                f"config declares mode '{declared}' but the '{args.mode}' "
                f"command was invoked")
        data["mode"] = args.mode
    if getattr(args, "runs", None) is not None:
        data["runs"] = args.runs
        data.pop("seeds", None)
    if getattr(args, "workers", None) is not None:
        data["workers"] = args.workers
    if getattr(args, "override_certificates", False):
        data["override_certificates"] = True
    out = getattr(args, "out", None) or os.environ.get(ENV_OUT_DIR)
    if out:
        data["out_dir"] = str(out)
    return parse_config(data, base_dir=path.parent)


def _print_failures(failures):
    for failure in failures:
        parts = [f"{k}={failure[k]}" for k in sorted(failure) if k != "error"]
        print(f"  failed [{', '.join(parts)}]: {failure['error']}",
              file=sys.stderr)


def _cmd_run(args):
    config = _load_for(args)
    if config.mode == "compare":
        summary = compare_baselines(config)
        completed = sum(m["runs"] for m in summary["methods"].values())
        print(f"mode: compare   config hash: {summary['config_hash']}")
        budget = summary["budget"]
        if "error" in budget:
            print(f"budget: target eps {budget['target_eps']:.4g}; "
                  f"geometric baseline skipped ({budget['error']})")
        else:
            print(f"budget: target eps {budget['target_eps']:.4g}, "
                  f"matched noise level {budget['nu_geo']:.4g} "
                  f"(mismatch {budget['rel_mismatch']:.2%})")
        for name, info in summary["methods"].items():
            print(f"  {name}: {info['runs']} runs, final mean error "
                  f"{info['final_mean_error']:.6g}")
    else:
        summary = run_experiment(config)
        completed = summary["runs_completed"]
        print(f"mode: {summary['mode']}   "
              f"config hash: {summary['config_hash']}")
        print(f"runs completed: {completed}/{len(summary['seeds'])}")
        for key, value in sorted(summary.get("final", {}).items()):
            print(f"  final {key} = {value:.6g}")
    _print_failures(summary["failures"])
    print(f"artifacts: {_resolve_out_dir(config)}")
    return 0 if completed > 0 else 1


def _cmd_accountant(args):
    table = accountant_table(_load_for(args))
    sys.stdout.write(table.to_csv())
    return 0


def _cmd_oracle(args):
    report = oracle_report(_load_for(args))
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


def _cmd_validate(args):
    path = Path(args.config)
    config = parse_config(load_toml(path), base_dir=path.parent)
    report = certificate_report(config)
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0 if report["ok"] else 1


# ---------------------------------------------------------------------------
# bench: numpy vs numba on the two engine hot loops


def _bench_workloads(args):
    from .consensus import ConsensusConfig, run_consensus
    from .optimizer import OptimizerConfig, run_optimizer
    from .problems import make_demand_response
    from .schedules import NoiseSchedule, PowerSchedule
    from .sets import Box
    from .topology import metropolis_weights, random_connected_graph

    pairs = random_connected_graph(args.agents, 0.3, seed=0)
    topology = metropolis_weights(args.agents, pairs, scale=0.9)
    domain = Box.cube(args.dim, -5.0, 5.0)
    chi = PowerSchedule(1.0, 0.9, 0.1)
    noise = NoiseSchedule(1.0, 0.1, 0.2)

    def consensus(backend, horizon):
        cfg = ConsensusConfig(
            horizon=horizon, chi=chi, gamma=PowerSchedule(1.0, 1.0, 0.1),
            noise=noise, seed=0, backend=backend)
        run_consensus(topology, domain, cfg)

    instance = make_demand_response(num_agents=5, horizon=4, seed=11)
    opt_pairs = random_connected_graph(5, 0.5, seed=1)
    opt_topology = metropolis_weights(5, opt_pairs, scale=0.9)

    def optimizer(backend, horizon):
        cfg = OptimizerConfig(
            horizon=horizon, chi=chi, gamma=PowerSchedule(0.1, 1.0, 0.1),
            theta=PowerSchedule(0.1, 0.96, 0.1), noise=noise, seed=0,
            backend=backend)
        run_optimizer(instance, opt_topology, cfg)

    return [("consensus", consensus), ("optimizer", optimizer)]


def _cmd_bench(args):
    from .backend import numba_available

    backends = ["numpy"] + (["numba"] if numba_available() else [])
    if "numba" not in backends:
        print("numba is not importable here; timing the numpy path only.")
    workloads = _bench_workloads(args)
    print(f"agents={args.agents} dim={args.dim} rounds={args.rounds} "
          f"repeats={args.repeats} (best-of)")
    header = ["workload"] + [f"{b} [s]" for b in backends]
    rows = []
    for name, run in workloads:
        times = {}
        for backend in backends:
            run(backend, 2)  # warm up (JIT compile, allocator)
            best = min(
                _timed(run, backend, args.rounds)
                for _ in range(max(1, args.repeats)))
            times[backend] = best
        row = [name] + [f"{times[b]:.3f}" for b in backends]
        if len(backends) == 2:
            row.append(f"{times['numpy'] / times['numba']:.2f}x")
        rows.append(row)
    if len(backends) == 2:
        header.append("speedup")
    widths = [max(len(r[i]) for r in [header] + rows)
              for i in range(len(header))]
    for row in [header] + rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return 0


def _timed(run, backend, rounds):
    start = time.perf_counter()
    run(backend, rounds)
    return time.perf_counter() - start


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DpoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
