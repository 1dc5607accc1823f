"""Command-line entry point: ``pointlk {train,register,bench,jacobian-analysis}``.

Exit codes: 0 success, 1 usage / I/O / schema error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench, cloud, featnet, solver, trainer
from .errors import ConfigurationError, InvalidArgumentError, ParseError, PointLKError, UnsupportedFormatError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("pointlk")


def load_config(path) -> dict:
    """TOML config, or JSON when the extension is ``.json``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).lower().endswith(".json"):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc}", field=str(path)) from None
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}", field=str(path)) from None


def _model(path):
    net = featnet.load_weights(path)
    return trainer.inference_net(net) if not net.folded else net


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    data = load_config(args.config) if args.config else {}
    unknown = sorted(set(data) - {"train"})
    if unknown:
        raise ConfigurationError("unknown top-level keys", field=",".join(unknown))
    section = dict(data.get("train", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    cfg = trainer.TrainConfig.from_dict(section)
    prefix = args.out
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    net = adam = None
    start = 0
    if args.resume:
        net, adam, last = trainer.load_checkpoint(args.resume)
        start = last + 1
    net, adam, history = trainer.train(
        cfg, net=net, adam=adam, start_epoch=start, log_path=f"{prefix}.log.csv",
        time_budget_s=args.time_budget,
    )
    last_epoch = history[-1].epoch if history else start - 1
    trainer.save_checkpoint(prefix, net, adam, last_epoch, cfg)
    featnet.save_weights(trainer.inference_net(net), f"{prefix}.model.json")
    if args.figures:
        from . import plots

        plots.training_curves(history, os.path.join(args.figures, "training.png"))
    print(json.dumps({"epoch": last_epoch, "weights": f"{prefix}.weights.json", "model": f"{prefix}.model.json"}))
    return EXIT_OK


# --------------------------------------------------------------------------
# register
# --------------------------------------------------------------------------


def _grid(text):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected nx,ny,nz") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError("expected three positive integers nx,ny,nz")
    return dims


def cmd_register(args) -> int:
    net = _model(args.model)
    src = cloud.load(args.source)
    tmpl = cloud.load(args.template)
    cfg = solver.SolverConfig(
        max_iters=args.max_iters,
        method=args.method,
        step=args.step,
        dof="planar" if args.planar else "se3",
        center=args.center,
    )
    if args.voxels:
        vcfg = solver.VoxelConfig(grid_dims=args.voxels, min_points=args.min_points, max_points_per_voxel=args.cap)
        result = solver.register_voxelized(net, src, tmpl, cfg, vcfg)
    else:
        result = solver.register(net, src, tmpl, cfg)
    print(result.to_json())
    return EXIT_OK if result.ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def cmd_bench(args) -> int:
    net = _model(args.model)
    data = load_config(args.config) if args.config else {}
    unknown = sorted(set(data) - {"bench"})
    if unknown:
        raise ConfigurationError("unknown top-level keys", field=",".join(unknown))
    overrides = data.get("bench", {}).get(args.suite, {})
    cfg = bench.suite_config(args.suite, overrides)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    result = bench.run_suite(args.suite, net, cfg, args.out, args.workers, args.omit_timing)
    if args.figures:
        from . import plots

        fig = os.path.join(args.figures, f"{args.suite}.png")
        if args.suite == "fidelity":
            plots.fidelity_curve(result["curve"], fig)
        elif args.suite in ("noise", "sparsity", "partial"):
            plots.condition_trend(result["aggregate"], fig, args.suite)
        else:
            plots.method_bars(result["aggregate"], fig, args.suite)
    for agg in result["aggregate"]:
        print(json.dumps({k: agg[k] for k in bench.AGG_HEADER}))
    return EXIT_OK


# --------------------------------------------------------------------------
# jacobian analysis
# --------------------------------------------------------------------------


def _steps(text):
    try:
        steps = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated step sizes") from None
    if not steps or min(steps) <= 0:
        raise argparse.ArgumentTypeError("step sizes must be positive")
    return steps


def cmd_jacobian_analysis(args) -> int:
    net = _model(args.model)
    P = cloud.load(args.cloud).points
    entries, summary = bench.jacobian_analysis(net, P, args.steps, dtype=np.dtype(args.dtype).type)
    os.makedirs(args.out, exist_ok=True)
    header = ["feature", "twist", "analytical"] + [f"numerical_t={t:g}" for t in args.steps]
    bench.write_csv(os.path.join(args.out, "jacobian_entries.csv"), header, entries)
    bench.write_csv(os.path.join(args.out, "jacobian_summary.csv"), ("step", "pearson_all", "pearson_w_z"), summary)
    if args.figures:
        from . import plots

        plots.jacobian_scatter(entries, summary, os.path.join(args.figures, "jacobian.png"))
    for row in summary:
        print(json.dumps(row))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointlk", description="Analytical PointNet-LK registration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the feature network on generated primitive pairs")
    t.add_argument("--config", help="TOML or JSON file with a [train] table")
    t.add_argument("--out", required=True, help="checkpoint prefix")
    t.add_argument("--resume", help="checkpoint prefix to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--time-budget", type=float, help="stop after the epoch that exceeds this many seconds")
    t.add_argument("--figures", help="also render figures into this directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register a source cloud to a template cloud")
    r.add_argument("--model", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--template", required=True)
    r.add_argument("--voxels", type=_grid, help="voxel grid nx,ny,nz")
    r.add_argument("--min-points", type=int, default=16)
    r.add_argument("--cap", type=int, help="max points per voxel")
    r.add_argument("--method", choices=solver.METHODS, default="analytical")
    r.add_argument("--step", type=float, default=1e-2, help="finite-difference step (numerical method)")
    r.add_argument("--planar", action="store_true", help="3-DoF warp: rotation about z, translation in x and y")
    r.add_argument("--max-iters", type=int, default=10)
    r.add_argument("--center", action="store_true", help="initialise translation from the centroids")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="run a benchmark suite")
    b.add_argument("suite", choices=bench.SUITES)
    b.add_argument("--model", required=True)
    b.add_argument("--config", help="TOML or JSON file with [bench.<suite>] tables")
    b.add_argument("--out", required=True, help="output directory for CSV files")
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int, help=f"worker processes (default: ${bench.WORKERS_ENV} or 1)")
    b.add_argument("--omit-timing", action="store_true", help="leave elapsed_s empty for byte-stable output")
    b.add_argument("--figures", help="also render figures into this directory")
    b.set_defaults(func=cmd_bench)

    j = sub.add_parser("jacobian-analysis", help="analytical vs numerical Jacobian across step sizes")
    j.add_argument("--model", required=True)
    j.add_argument("--cloud", required=True)
    j.add_argument("--steps", type=_steps, default=[1e-10, 1e-4, 1e-2, 1.0, 10.0])
    j.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    j.add_argument("--out", required=True)
    j.add_argument("--figures", help="also render figures into this directory")
    j.set_defaults(func=cmd_jacobian_analysis)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidArgumentError, ParseError, UnsupportedFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PointLKError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
