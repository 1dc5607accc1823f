"""Inverse-compositional Lucas-Kanade registration on global features.

The Jacobian is built once on the template. Each iteration compares the
source feature with the feature of the template under the current inverse
warp, solves the linearized least-squares problem with the precomputed
pseudoinverse, and composes the inverted increment onto the template warp:
``G^-1(xi o^-1 dxi) = G^-1(xi) G^-1(dxi)``. The reported estimate is the
inverse of that warp, i.e. the transform taking the source onto the
template.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import featnet, jacobian, se3
from .cloud import as_points, voxelize
from .errors import (
    DegenerateInputError,
    InvalidArgumentError,
    ModeError,
    RankDeficiencyError,
)

TERMINATIONS = ("converged", "max_iters", "diverged", "rank_deficient")
METHODS = ("analytical", "numerical")


@dataclass
class SolverConfig:
    max_iters: int = 10
    dx_tol: float = 1e-7
    method: str = "analytical"
    step: float = 1e-2  # finite-difference step, numerical method only
    numerical_dtype: str = "float32"
    dof: str = "se3"  # or "planar": rotation about z + translation in x, y
    divergence_factor: float = 10.0
    # shift both clouds to their centroids before solving (translation initialisation)
    center: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not self.dx_tol > 0 or not self.divergence_factor > 0:
            raise InvalidArgumentError("tolerances must be positive")
        if self.method not in METHODS:
            raise InvalidArgumentError(f"method must be one of {METHODS}")
        if self.method == "numerical" and not self.step > 0:
            raise InvalidArgumentError("step must be positive")
        if self.dof not in ("se3", "planar"):
            raise InvalidArgumentError("dof must be 'se3' or 'planar'")
        if self.method == "numerical" and self.dof != "se3":
            raise InvalidArgumentError("the numerical Jacobian is only defined for the 6-DoF warp")


@dataclass
class VoxelConfig:
    grid_dims: tuple = (2, 2, 2)
    min_points: int = 16
    max_points_per_voxel: int | None = None
    seed: int = 0
    # re-bin the source against the current estimate every iteration
    rebin: bool = True


@dataclass
class RegistrationResult:
    estimate: np.ndarray
    iterations: int
    residuals: list
    termination: str
    method: str = "analytical"
    jacobian_builds: int = 0
    elapsed_s: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.termination in ("converged", "max_iters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimate"] = np.asarray(self.estimate).ravel().tolist()
        d["residuals"] = [float(r) for r in self.residuals]
        d["diagnostics"] = _jsonable(self.diagnostics)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationResult":
        d = dict(d)
        d["estimate"] = np.array(d["estimate"], dtype=float).reshape(4, 4)
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _embed(dx, dof):
    if dof == "se3":
        return dx
    full = np.zeros(6)
    full[list(jacobian.PLANAR_COLUMNS)] = dx
    return full


def _check_net(net):
    if net.mode != "inference":
        raise ModeError("registration needs an inference-mode net; call fold_bn first")


def build_bundle(net, P_T, cfg: SolverConfig) -> jacobian.JacobianBundle:
    if cfg.method == "numerical":
        return jacobian.numerical_jacobian(net, P_T, cfg.step, dtype=np.dtype(cfg.numerical_dtype).type)
    return jacobian.analytical_jacobian(net, P_T, dof=cfg.dof)


def _iterate(residual_fn, bundle, cfg, dof):
    """Shared IC loop. Returns (template warp, residual log, termination)."""
    g = np.eye(4)
    log = []
    for _ in range(cfg.max_iters):
        r = residual_fn(g)
        rn = float(np.linalg.norm(r))
        log.append(rn)
        if not np.isfinite(rn):
            return g, log, "diverged"
        if rn > cfg.divergence_factor * max(log[0], np.finfo(float).tiny):
            return g, log, "diverged"
        dx = bundle.pinv @ r
        if not np.all(np.isfinite(dx)):
            return g, log, "diverged"
        g = g @ se3.exp_twist(-_embed(dx, dof))
        if np.linalg.norm(dx) < cfg.dx_tol:
            return g, log, "converged"
    return g, log, "max_iters"


def _centering(P_S, P_T, cfg):
    if not cfg.center:
        return P_S, P_T, np.zeros(3), np.zeros(3)
    cS, cT = P_S.mean(axis=0), P_T.mean(axis=0)
    return P_S - cS, P_T - cT, cS, cT


def _uncenter(est, cS, cT):
    return se3.compose(se3.from_rt(np.eye(3), cT), se3.compose(est, se3.from_rt(np.eye(3), -cS)))


def register(net, P_S, P_T, cfg: SolverConfig | None = None) -> RegistrationResult:
    """Align source ``P_S`` to template ``P_T``; the estimate maps source onto template."""
    cfg = cfg or SolverConfig()
    _check_net(net)
    t0 = time.perf_counter()
    P_S = np.asarray(as_points(P_S), dtype=float)
    P_T = np.asarray(as_points(P_T), dtype=float)
    P_S, P_T, cS, cT = _centering(P_S, P_T, cfg)
    method = cfg.method if cfg.method == "analytical" else f"numerical(t={cfg.step:g})"
    try:
        bundle = build_bundle(net, P_T, cfg)
    except RankDeficiencyError as exc:
        return RegistrationResult(
            np.eye(4), 0, [], "rank_deficient", method, 0, time.perf_counter() - t0, exc.diagnostics
        )
    f_S = featnet.global_feature(net, P_S)

    def residual(g):
        return f_S - featnet.global_feature(net, se3.transform_points(g, P_T))

    g, log, reason = _iterate(residual, bundle, cfg, cfg.dof)
    est = _uncenter(se3.inverse(g), cS, cT)
    return RegistrationResult(
        est, len(log), log, reason, method, 1, time.perf_counter() - t0,
        {"cond_JtJ": bundle.diagnostics["cond_JtJ"]},
    )


def register_voxelized(
    net, P_S, P_T, cfg: SolverConfig | None = None, voxel_cfg: VoxelConfig | None = None
) -> RegistrationResult:
    """Voxelized variant: summed per-voxel feature residuals against one global Jacobian.

    The grid lives on the template's bounding box. Source points are binned
    on the same grid after mapping them with the current estimate; every
    voxel pair is compared in a frame shifted by the template voxel centroid.
    """
    cfg = cfg or SolverConfig()
    vcfg = voxel_cfg or VoxelConfig()
    _check_net(net)
    if cfg.method != "analytical" or cfg.dof != "se3":
        raise InvalidArgumentError("voxelized registration uses the analytical 6-DoF Jacobian")
    t0 = time.perf_counter()
    P_S = np.asarray(as_points(P_S), dtype=float)
    P_T = np.asarray(as_points(P_T), dtype=float)
    P_S, P_T, cS, cT = _centering(P_S, P_T, cfg)
    partition = voxelize(P_T, vcfg.grid_dims, vcfg.min_points, vcfg.max_points_per_voxel, vcfg.seed)
    try:
        bundle = jacobian.voxel_global_jacobian(net, partition, P_T)
    except RankDeficiencyError as exc:
        return RegistrationResult(
            np.eye(4), 0, [], "rank_deficient", "voxelized", 0, time.perf_counter() - t0,
            exc.diagnostics,
        )
    templates = [P_T[v.indices] for v in partition.voxels]
    centers = [v.center for v in partition.voxels]
    state = {"src": None}

    def source_features(g):
        est = se3.inverse(g)
        groups = partition.assign(se3.transform_points(est, P_S), clip=True)
        feats = []
        for idx, c in zip(groups, centers):
            if len(idx) < vcfg.min_points:
                feats.append(None)
            else:
                feats.append(featnet.global_feature(net, P_S[idx] - c))
        if all(f is None for f in feats):
            raise DegenerateInputError("no voxel receives enough source points")
        return feats

    def residual(g):
        if state["src"] is None or vcfg.rebin:
            state["src"] = source_features(g)
        r = np.zeros(net.K)
        for f_src, V, c in zip(state["src"], templates, centers):
            if f_src is None:
                continue
            r += f_src - featnet.global_feature(net, se3.transform_points(g, V) - c)
        return r

    g, log, reason = _iterate(residual, bundle, cfg, "se3")
    est = _uncenter(se3.inverse(g), cS, cT)
    return RegistrationResult(
        est, len(log), log, reason, "voxelized", 1, time.perf_counter() - t0,
        {"n_voxels": len(partition), "cond_JtJ": bundle.diagnostics["cond_JtJ"]},
    )
