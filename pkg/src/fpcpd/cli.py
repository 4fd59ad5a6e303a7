"""Command-line entry point: ``fpcpd <subcommand> ...``.

Subcommands
-----------
gen         write a synthetic low-rank tensor
gen-shm     write synthetic vibration events plus a manifest
bench       run solvers on a tensor (or the pinned synthetic benchmark)
pipeline    run the detection and localization pipeline on an event directory
corcondia   core consistency of fits at several ranks
plan-dump   print the block plan for given dimensions as JSON

Solver settings come from defaults, then ``--config <file>`` (flat
``key = value``), then any solver flag given explicitly on the command line.
Results go to stdout as comma-separated rows; files go under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .solvers import CONFIG_KEYS, SolverConfig, read_kv_file

log = logging.getLogger("fpcpd")

_FLAG_TYPES = {
    "rank": int, "eta": float, "eta_decay": float, "gamma": float, "noise": float, "beta": float,
    "epochs": int, "tol": float, "seed": int, "threads": int, "batch_fraction": float,
}


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver settings (override --config)")
    g.add_argument("--config", type=Path, help="flat key = value file of solver settings")
    for key, kind in _FLAG_TYPES.items():
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    g.add_argument("--deterministic", dest="deterministic", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--nag-lookahead", dest="nag_lookahead", action=argparse.BooleanOptionalAction, default=None)


def _solver_config(args, base: SolverConfig | None = None) -> SolverConfig:
    cfg = base or SolverConfig()
    if args.config is not None:
        raw = read_kv_file(args.config)
        unknown = set(raw) - set(CONFIG_KEYS)
        if unknown:
            raise SystemExit(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg = cfg.replace(**SolverConfig.from_mapping({**cfg.to_mapping(), **raw}).to_mapping())
    flags = {k: getattr(args, k) for k in list(_FLAG_TYPES) + ["deterministic", "nag_lookahead"]
             if getattr(args, k, None) is not None}
    return cfg.replace(**flags) if flags else cfg


def _explicit_flags(args) -> bool:
    return args.config is not None or any(
        getattr(args, k, None) is not None for k in list(_FLAG_TYPES) + ["deterministic", "nag_lookahead"])


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def _num(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(x)


def _load_any_tensor(path: Path, dims=None):
    from .tensor import load_tensor, load_tensor_csv
    if path.suffix.lower() == ".csv":
        return load_tensor_csv(path, dims)
    return load_tensor(path)


# --------------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic
    from .tensor import save_tensor, save_tensor_csv

    spec = SyntheticSpec(tuple(args.dims), args.true_rank, args.noise_std, args.seed)
    t, truth = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    (save_tensor_csv if out.suffix.lower() == ".csv" else save_tensor)(out, t)
    if args.factors_out:
        np.savez(args.factors_out, A=truth.A, B=truth.B, C=truth.C)
    w = _writer()
    w.writerow(["path", "I", "J", "K", "true_rank", "noise_std", "seed"])
    w.writerow([str(out), *t.dims, spec.true_rank, spec.noise_std, spec.seed])
    return 0


def cmd_gen_shm(args) -> int:
    from dataclasses import replace

    from .bench import load_shm_benchmark
    from .shm import save_events
    from .synthetic import generate_shm_events

    spec, _ = load_shm_benchmark(args.benchmark)
    changes = {k: getattr(args, k) for k in ("sensors", "n_healthy", "samples", "seed")
               if getattr(args, k) is not None}
    spec = replace(spec, **changes)
    ev = generate_shm_events(spec)
    manifest = save_events(args.out, ev)
    w = _writer()
    w.writerow(["manifest", "sensors", "events", "samples", "sample_rate"])
    w.writerow([str(manifest), ev.sensors, ev.events, ev.samples, ev.sample_rate])
    return 0


# --------------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .bench import load_benchmark_spec, run_benchmark, run_synthetic_benchmark
    from .solvers import read_trace_csv

    out = Path(args.out)
    if args.tensor is None:
        spec = load_benchmark_spec(args.benchmark)
        spec.solver_cfg = _solver_config(args, spec.solver_cfg)
        if args.solvers:
            spec.solvers = tuple(args.solvers.split(","))
        if args.target is not None:
            spec.target_rmse = args.target
        seeds = range(args.seeds) if args.seeds is not None else None
        summary = run_synthetic_benchmark(spec, out, seeds)
        w = _writer()
        w.writerow(["solver", "median_epochs_to_target", "target_rmse", "seeds"])
        for s, med in summary["median_epochs_to_target"].items():
            w.writerow([s, _num(med), spec.target_rmse, len(summary["seeds"])])
        if not args.no_plots:
            _plot_seed_traces(out / f"seed{summary['seeds'][0]}", spec.solvers, spec.target_rmse, read_trace_csv)
        return 0

    t = _load_any_tensor(args.tensor, args.dims)
    cfg = _solver_config(args)
    solvers = tuple((args.solvers or "fpcpd,psgd,sals,als").split(","))
    results = run_benchmark(t, solvers, cfg, out, args.target)
    w = _writer()
    w.writerow(["solver", "status", "epochs", "final_rmse", "seconds", "thread_count"])
    for r in results:
        w.writerow([r.solver, r.status, len(r.trace), _num(r.final_rmse), repr(r.seconds), r.thread_count])
    if not args.no_plots:
        from .plotting import plot_traces
        plot_traces({r.solver: r.trace for r in results}, out / "rmse_vs_time.png", args.target)
    return 0


def _plot_seed_traces(seed_dir: Path, solvers, target, reader) -> None:
    from .plotting import plot_traces
    traces = {s: reader(seed_dir / f"{s}.csv") for s in solvers if (seed_dir / f"{s}.csv").exists()}
    plot_traces(traces, seed_dir.parent / "rmse_vs_time.png", target)
    plot_traces(traces, seed_dir.parent / "rmse_vs_epoch.png", target, x="epoch")


# --------------------------------------------------------------------------- pipeline


def cmd_pipeline(args) -> int:
    from dataclasses import replace

    from .bench import load_shm_benchmark
    from .shm import HEALTHY, evaluate_pipeline, extract_features, load_events
    from .synthetic import generate_shm_events

    shm_spec, pcfg = load_shm_benchmark(args.benchmark)
    if _explicit_flags(args):
        pcfg.solver_cfg = _solver_config(args, pcfg.solver_cfg)
    changes = {k: getattr(args, k) for k in ("solver", "nu", "sigma", "k", "trials", "train_fraction")
               if getattr(args, k) is not None}
    if args.pipeline_seed is not None:
        changes["seed"] = args.pipeline_seed
    pcfg = replace(pcfg, **changes)

    if args.events is None:
        ev = generate_shm_events(shm_spec)
    else:
        ev = load_events(args.events, args.manifest)
    labels = ev.labels or [HEALTHY] * ev.events
    if all(lab == HEALTHY for lab in labels):
        raise SystemExit("manifest lists only healthy events; the pipeline needs at least one damage event")
    feats = extract_features(ev, args.keep_bins)
    if feats.degenerate.any():
        log.warning("%d constant signals produced all-zero features", int(feats.degenerate.sum()))
    report = evaluate_pipeline(feats.tensor, labels, pcfg, ev.event_ids, ev.damaged_sensor)
    paths = report.write(args.out)
    if not args.no_plots:
        from .plotting import render_pipeline_figures
        paths.update(render_pipeline_figures(report, args.out))
    w = _writer()
    w.writerow(["metric", "value"])
    w.writerow(["f_score_mean", repr(report.f_mean)])
    w.writerow(["f_score_std", repr(report.f_std)])
    acc = report.localization_accuracy()
    w.writerow(["localization_accuracy", _num(acc)])
    for lab, v in report.mean_decision().items():
        w.writerow([f"mean_decision[{lab}]", repr(v)])
    for name, p in paths.items():
        w.writerow([f"file[{name}]", str(p)])
    return 0


# --------------------------------------------------------------------------- corcondia / plan-dump


def cmd_corcondia(args) -> int:
    from .solvers import corcondia, run_solver

    t = _load_any_tensor(args.tensor, args.dims)
    cfg = _solver_config(args)
    w = _writer()
    w.writerow(["rank", "corcondia", "rmse", "damped"])
    for R in args.ranks:
        fit = run_solver(args.solver, t, cfg.replace(rank=R))
        res = corcondia(t, fit.model, return_info=True)
        w.writerow([R, repr(res.value), repr(fit.trace[-1].rmse), int(res.damped)])
    return 0


def cmd_plan_dump(args) -> int:
    from .blocks import build_plan, verify_plan

    plan = build_plan(tuple(args.dims))
    verify_plan(plan, tuple(args.dims))
    text = plan.to_json(indent=None if args.compact else 2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpcpd", description="Block-parallel CP decomposition toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic low-rank tensor")
    g.add_argument("--dims", type=int, nargs=3, default=[30, 30, 30], metavar=("I", "J", "K"))
    g.add_argument("--true-rank", type=int, default=5)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output path (.csv for text, otherwise binary)")
    g.add_argument("--factors-out", help="also save the ground-truth factors to this .npz")
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("gen-shm", help="write synthetic vibration events and a manifest")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--benchmark", type=Path, help="SHM benchmark config (default: packaged)")
    g.add_argument("--sensors", type=int)
    g.add_argument("--n-healthy", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_shm)

    g = sub.add_parser("bench", help="benchmark solvers; without --tensor runs the pinned benchmark")
    g.add_argument("--tensor", type=Path)
    g.add_argument("--dims", type=int, nargs=3, metavar=("I", "J", "K"), help="dims for CSV tensors")
    g.add_argument("--benchmark", type=Path, help="benchmark config (default: packaged)")
    g.add_argument("--solvers", help="comma-separated solver names")
    g.add_argument("--target", type=float, help="RMSE target for epochs-to-target")
    g.add_argument("--seeds", type=int, help="run only the first N seeds of the pinned benchmark")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--no-plots", action="store_true")
    _add_solver_flags(g)
    g.set_defaults(func=cmd_bench)

    g = sub.add_parser("pipeline", help="detection, severity and localization on vibration events")
    g.add_argument("--events", type=Path, help="event directory (default: generate the SHM benchmark)")
    g.add_argument("--manifest", type=Path, help="manifest CSV (default: <events>/manifest.csv)")
    g.add_argument("--benchmark", type=Path, help="SHM benchmark config (default: packaged)")
    g.add_argument("--solver")
    g.add_argument("--nu", type=float)
    g.add_argument("--sigma", type=float, help="kernel width (default: median heuristic)")
    g.add_argument("--k", type=int)
    g.add_argument("--trials", type=int)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--pipeline-seed", type=int)
    g.add_argument("--keep-bins", type=int)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--no-plots", action="store_true")
    _add_solver_flags(g)
    g.set_defaults(func=cmd_pipeline)

    g = sub.add_parser("corcondia", help="core consistency at several ranks")
    g.add_argument("--tensor", type=Path, required=True)
    g.add_argument("--dims", type=int, nargs=3, metavar=("I", "J", "K"))
    g.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6])
    g.add_argument("--solver", default="als")
    _add_solver_flags(g)
    g.set_defaults(func=cmd_corcondia)

    g = sub.add_parser("plan-dump", help="print the block plan for I x J x K as JSON")
    g.add_argument("dims", type=int, nargs=3, metavar="DIM", help="I J K")
    g.add_argument("--out")
    g.add_argument("--compact", action="store_true")
    g.set_defaults(func=cmd_plan_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"fpcpd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
