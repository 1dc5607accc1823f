"""Benchmark suites on generated primitives and scenes.

Each suite expands to a list of jobs ``(pair, condition, method)``; jobs run
in a worker pool and rows come back in job order. A failing pair yields a
failure row instead of aborting the suite.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cloud, icp, jacobian, metrics, solver
from .errors import ConfigurationError, PointLKError

SUITES = ("accuracy", "fidelity", "noise", "sparsity", "partial", "voxel", "icp-compare")
WORKERS_ENV = "POINTLK_WORKERS"

ROW_HEADER = (
    "suite", "pair", "condition", "method", "rot_err_deg", "trans_err", "success",
    "iterations", "termination", "jacobian_builds", "elapsed_s", "error",
)
AGG_HEADER = (
    "suite", "condition", "method", "n", "rot_rmse", "trans_rmse", "rot_median", "trans_median",
    "success_ratio", "auc", "n_failed",
)
CURVE_HEADER = (
    "suite", "condition", "method", "rot_threshold_deg", "trans_threshold",
    "success_joint", "success_rot", "success_trans",
)

_DATA = {
    "n_pairs": 50,
    "n_points": 1000,
    "seed": 0,
    "kinds": list(cloud.PRIMITIVES),
    "max_rot_deg": 30.0,
    "max_trans": 0.3,
    "stretch": [0.4, 1.0],
    "scene": False,
    "directory": None,
}

DEFAULTS = {
    "accuracy": {"data": dict(_DATA), "methods": ["analytical"]},
    "fidelity": {
        "data": dict(_DATA),
        "methods": ["analytical", "numerical:0.01"],
        # log-spaced rotation thresholds in degrees; translation scaled by 0.05/5
        "thresholds_deg": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 5.0],
    },
    "noise": {"data": dict(_DATA), "methods": ["analytical"], "std": [0.0, 0.01, 0.02, 0.04]},
    "sparsity": {"data": dict(_DATA), "methods": ["analytical"], "keep": [1.0, 0.5, 0.25, 0.1]},
    "partial": {"data": dict(_DATA), "methods": ["analytical"], "keep": [1.0, 0.9, 0.7, 0.5]},
    "voxel": {
        "data": {**_DATA, "scene": True, "n_points": 3000, "n_pairs": 30},
        # (grid, max points per voxel); grid [1,1,1] with no cap is the whole-cloud solver
        "configs": [
            [[1, 1, 1], None],
            [[3, 3, 3], 37],
            [[2, 2, 2], 125],
            [[3, 3, 3], 148],
            [[2, 2, 2], 500],
            [[2, 2, 2], 1000],
        ],
        "min_points": 16,
    },
    "icp-compare": {"data": dict(_DATA), "methods": ["analytical", "icp"]},
}

SOLVER_KEYS = ("max_iters", "dx_tol", "center", "divergence_factor")
DEFAULT_SOLVER = {"max_iters": 10, "center": True}
SCENE_MAX_ITERS = 20


def suite_config(suite: str, overrides: dict | None = None) -> dict:
    """Defaults for ``suite`` merged with ``overrides`` (unknown keys are schema errors)."""
    if suite not in SUITES:
        raise ConfigurationError(f"unknown suite {suite!r}; expected one of {SUITES}", field="suite")
    cfg = copy.deepcopy(DEFAULTS[suite])
    cfg["solver"] = dict(DEFAULT_SOLVER)
    for key, val in (overrides or {}).items():
        if key not in cfg:
            raise ConfigurationError("unknown key", field=f"bench.{suite}.{key}")
        if isinstance(cfg[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError("expected a table", field=f"bench.{suite}.{key}")
            allowed = SOLVER_KEYS if key == "solver" else cfg[key].keys()
            for k in val:
                if k not in allowed:
                    raise ConfigurationError("unknown key", field=f"bench.{suite}.{key}.{k}")
            cfg[key].update(val)
        else:
            cfg[key] = val
    if cfg["data"]["scene"] and "max_iters" not in (overrides or {}).get("solver", {}):
        cfg["solver"]["max_iters"] = SCENE_MAX_ITERS
    for m in cfg.get("methods", []):
        parse_method(m, field=f"bench.{suite}.methods")
    return cfg


@dataclass(frozen=True)
class Method:
    kind: str  # analytical | numerical | icp | voxel
    step: float = 0.0
    grid: tuple = (1, 1, 1)
    cap: int | None = None

    @property
    def label(self) -> str:
        if self.kind == "numerical":
            return f"numerical:{self.step:g}"
        if self.kind == "voxel":
            grid = "x".join(map(str, self.grid))
            return f"voxel:{grid}" + (f":{self.cap}" if self.cap else "")
        return self.kind


def parse_method(spec: str, field: str = "method") -> Method:
    """``analytical`` | ``icp`` | ``numerical:<t>`` | ``voxel:<nx>x<ny>x<nz>[:cap]``."""
    parts = str(spec).split(":")
    try:
        if parts[0] in ("analytical", "icp") and len(parts) == 1:
            return Method(parts[0])
        if parts[0] == "numerical" and len(parts) == 2:
            step = float(parts[1])
            if not step > 0:
                raise ValueError
            return Method("numerical", step=step)
        if parts[0] == "voxel" and len(parts) in (2, 3):
            grid = tuple(int(x) for x in parts[1].split("x"))
            if len(grid) != 3 or min(grid) < 1:
                raise ValueError
            cap = int(parts[2]) if len(parts) == 3 else None
            return Method("voxel", grid=grid, cap=cap)
    except ValueError:
        pass
    raise ConfigurationError(f"bad method spec {spec!r}", field=field)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def make_pairs(data: dict) -> list:
    """Pairs from a generator spec or from a directory of cloud files."""
    rng = np.random.default_rng(data["seed"])
    sources = []
    if data.get("directory"):
        names = sorted(
            f for f in os.listdir(data["directory"]) if os.path.splitext(f)[1].lower() in (".xyz", ".off", ".ply")
        )
        if not names:
            raise ConfigurationError("no .xyz/.off/.ply files", field="data.directory")
        for name in names[: data["n_pairs"]]:
            sources.append(cloud.normalize_unit_box(cloud.load(os.path.join(data["directory"], name))))
    else:
        from .trainer import stretch_cloud

        kinds = tuple(data["kinds"])
        for i in range(data["n_pairs"]):
            seed = int(rng.integers(2**31))
            if data.get("scene"):
                c = cloud.generate_scene(data["n_points"], seed=seed, kinds=kinds)
            else:
                c = cloud.generate_primitive(kinds[i % len(kinds)], data["n_points"], seed=seed)
                if data.get("stretch"):
                    c = stretch_cloud(c, rng, *data["stretch"])
                c = cloud.normalize_unit_box(c)
            sources.append(c.with_points(c.points, id=f"pair{i:04d}"))
    return [cloud.make_pair(s, cloud.sample_perturbation(rng, data["max_rot_deg"], data["max_trans"])) for s in sources]


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------


def run_method(net, method: Method, P_S, P_T, solver_kw: dict, min_points: int = 16):
    cfg_kw = {k: v for k, v in solver_kw.items() if k in SOLVER_KEYS}
    if method.kind == "icp":
        return icp.icp_register(P_S, P_T, icp.IcpConfig(max_iters=cfg_kw.get("max_iters", 10)))
    if method.kind == "numerical":
        return solver.register(net, P_S, P_T, solver.SolverConfig(method="numerical", step=method.step, **cfg_kw))
    if method.kind == "voxel":
        vcfg = solver.VoxelConfig(grid_dims=method.grid, min_points=min_points, max_points_per_voxel=method.cap)
        return solver.register_voxelized(net, P_S, P_T, solver.SolverConfig(**cfg_kw), vcfg)
    return solver.register(net, P_S, P_T, solver.SolverConfig(**cfg_kw))


def _job(args):
    suite, net, pair, condition, method, solver_kw, min_points, corruption = args
    builds0 = jacobian.build_count()
    row = {"suite": suite, "pair": pair.source.id, "condition": condition, "method": method.label}
    try:
        if corruption is not None:
            pair = _corrupt(suite, pair, *corruption)
        res = run_method(net, method, pair.source, pair.template, solver_kw, min_points)
        err = metrics.pair_error(res.estimate, pair.gt)
        row.update(
            rot_err_deg=err.rot_deg, trans_err=err.trans, success=int(metrics.is_success(err)),
            iterations=res.iterations, termination=res.termination,
            jacobian_builds=jacobian.build_count() - builds0, elapsed_s=res.elapsed_s, error="",
        )
    except (PointLKError, np.linalg.LinAlgError) as exc:
        row.update(
            rot_err_deg=180.0, trans_err=math.inf, success=0, iterations=0, termination="error",
            jacobian_builds=jacobian.build_count() - builds0, elapsed_s=0.0, error=str(exc),
        )
    return row


def _corrupt(suite, pair, level, seed):
    src = pair.source
    if suite == "noise":
        src = cloud.corrupt_noise(src, level, seed=seed) if level > 0 else src
    elif suite == "sparsity":
        src = cloud.corrupt_sparsify(src, level, seed=seed) if level < 1 else src
    elif suite == "partial":
        if level < 1:
            direction = np.random.default_rng(seed).normal(size=3)
            src = cloud.corrupt_halfspace(src, direction, level)
    return cloud.PairSpec(src, pair.template, pair.gt)


def build_jobs(suite: str, cfg: dict, net) -> list:
    pairs = make_pairs(cfg["data"])
    solver_kw = cfg["solver"]
    min_points = cfg.get("min_points", 16)
    jobs = []
    if suite == "voxel":
        methods = []
        for entry in cfg["configs"]:
            if not isinstance(entry, (list, tuple)) or len(entry) not in (1, 2):
                raise ConfigurationError("entries are [grid] or [grid, cap]", field="bench.voxel.configs")
            grid = tuple(int(g) for g in entry[0])
            cap = entry[1] if len(entry) == 2 else None
            methods.append(Method("analytical") if grid == (1, 1, 1) and cap is None else Method("voxel", grid=grid, cap=cap))
        for pair in pairs:
            for m in methods:
                jobs.append((suite, net, pair, "", m, solver_kw, min_points, None))
        return jobs
    methods = [parse_method(m) for m in cfg["methods"]]
    levels = {"noise": "std", "sparsity": "keep", "partial": "keep"}.get(suite)
    for i, pair in enumerate(pairs):
        conds = [(None, "")] if levels is None else [(lv, f"{levels}={lv:g}") for lv in cfg[levels]]
        for level, label in conds:
            corruption = None if level is None else (level, cfg["data"]["seed"] * 100003 + i)
            for m in methods:
                jobs.append((suite, net, pair, label, m, solver_kw, min_points, corruption))
    return jobs


def worker_count(default: int = 1) -> int:
    val = os.environ.get(WORKERS_ENV)
    if val is None:
        return default
    try:
        n = int(val)
    except ValueError:
        raise ConfigurationError("must be an integer", field=WORKERS_ENV) from None
    return max(1, n)


def run_jobs(jobs, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) < 2:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def aggregate_rows(rows) -> list:
    """One aggregate per (condition, method), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["suite"], r["condition"], r["method"]), []).append(r)
    out = []
    for (suite, cond, method), rs in groups.items():
        errs = [metrics.PairError(r["rot_err_deg"], r["trans_err"]) for r in rs]
        agg = metrics.aggregate(errs)
        rt, _, ratios = metrics.success_curve(errs)
        out.append({
            "suite": suite, "condition": cond, "method": method, "n": agg.n,
            "rot_rmse": agg.rot_rmse, "trans_rmse": agg.trans_rmse, "rot_median": agg.rot_median,
            "trans_median": agg.trans_median, "success_ratio": agg.success_ratio,
            "auc": metrics.auc(rt, ratios), "n_failed": sum(r["termination"] == "error" for r in rs),
        })
    return out


def success_curves(rows) -> list:
    """Joint, rotation-only and translation-only success curves per (condition, method)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["suite"], r["condition"], r["method"]), []).append(r)
    out = []
    for (suite, cond, method), rs in groups.items():
        errs = [metrics.PairError(r["rot_err_deg"], r["trans_err"]) for r in rs]
        rt, tt, joint = metrics.success_curve(errs)
        _, rot, _, trans = metrics.separate_curves(errs)
        for k in range(len(rt)):
            out.append({
                "suite": suite, "condition": cond, "method": method,
                "rot_threshold_deg": float(rt[k]), "trans_threshold": float(tt[k]),
                "success_joint": float(joint[k]), "success_rot": float(rot[k]), "success_trans": float(trans[k]),
            })
    return out


def fidelity_curve(rows, thresholds_deg) -> list:
    """Success ratio per method at each rotation threshold (translation scaled alongside)."""
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows))
    scale = metrics.TRANS_THRESHOLD / metrics.ROT_THRESHOLD_DEG
    for m in methods:
        errs = [metrics.PairError(r["rot_err_deg"], r["trans_err"]) for r in rows if r["method"] == m]
        for th in thresholds_deg:
            ratio = float(np.mean([metrics.is_success(e, th, th * scale) for e in errs]))
            out.append({"method": m, "rot_threshold_deg": th, "trans_threshold": th * scale, "success_ratio": ratio})
    return out


def _fmt(v, omit_timing=False, key=None):
    if key == "elapsed_s" and omit_timing:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return "" if v is None else str(v)


def write_csv(path, header, rows, omit_timing=False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h), omit_timing, h) for h in header])


def run_suite(suite: str, net, cfg: dict, out_dir, workers=None, omit_timing=False) -> dict:
    """Run one suite; writes ``<suite>.rows.csv``, ``.aggregate.csv`` and ``.success.csv`` (+ ``.curve.csv`` for fidelity)."""
    os.makedirs(out_dir, exist_ok=True)
    rows = run_jobs(build_jobs(suite, cfg, net), workers)
    aggs = aggregate_rows(rows)
    paths = {
        "rows": os.path.join(out_dir, f"{suite}.rows.csv"),
        "aggregate": os.path.join(out_dir, f"{suite}.aggregate.csv"),
        "success": os.path.join(out_dir, f"{suite}.success.csv"),
    }
    write_csv(paths["rows"], ROW_HEADER, rows, omit_timing)
    write_csv(paths["aggregate"], AGG_HEADER, aggs)
    write_csv(paths["success"], CURVE_HEADER, success_curves(rows))
    result = {"rows": rows, "aggregate": aggs, "paths": paths}
    if suite == "fidelity":
        curve = fidelity_curve(rows, cfg["thresholds_deg"])
        paths["curve"] = os.path.join(out_dir, f"{suite}.curve.csv")
        write_csv(paths["curve"], ("method", "rot_threshold_deg", "trans_threshold", "success_ratio"), curve)
        result["curve"] = curve
    return result


# --------------------------------------------------------------------------
# Jacobian step-size analysis
# --------------------------------------------------------------------------

TWIST_NAMES = ("w_x", "w_y", "w_z", "v_x", "v_y", "v_z")


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0 or not np.all(np.isfinite(b)):
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def jacobian_analysis(net, P, steps, dtype=np.float32):
    """Analytical vs numerical Jacobian entries per step size.

    Returns ``(entries, summary)``: ``entries`` rows carry feature index,
    twist coordinate, the analytical value and one numerical value per
    step; ``summary`` rows carry Pearson r over all entries and over the
    ``w_z`` column alone.
    """
    A = jacobian.analytical_jacobian(net, P, strict=False).J
    nums = [jacobian.numerical_jacobian(net, P, t, dtype=dtype, strict=False).J for t in steps]
    entries = []
    for k in range(A.shape[0]):
        for p in range(6):
            row = {"feature": k, "twist": TWIST_NAMES[p], "analytical": A[k, p]}
            for t, N in zip(steps, nums):
                row[f"numerical_t={t:g}"] = N[k, p]
            entries.append(row)
    summary = [
        {"step": t, "pearson_all": pearson(A.ravel(), N.ravel()), "pearson_w_z": pearson(A[:, 2], N[:, 2])}
        for t, N in zip(steps, nums)
    ]
    return entries, summary
