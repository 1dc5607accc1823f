"""Point-to-point ICP baseline: nearest neighbours plus closed-form Procrustes."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .cloud import as_points
from .errors import DegenerateInputError, InvalidArgumentError, RankDeficiencyError
from .solver import RegistrationResult

log = logging.getLogger(__name__)


@dataclass
class IcpConfig:
    max_iters: int = 10
    max_corr_dist: float = math.inf  # correspondences farther than this are dropped
    tol: float = 1e-10  # on the Frobenius norm of the incremental transform minus I

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not self.max_corr_dist > 0 or not self.tol > 0:
            raise InvalidArgumentError("max_corr_dist and tol must be positive")


def procrustes_fit(X, Y, weights=None) -> np.ndarray:
    """Rigid ``g`` minimizing ``sum_i w_i ||g . x_i - y_i||^2``.

    Rotation from the SVD of the weighted cross-covariance; a reflection is
    turned into a rotation by flipping the smallest singular direction.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise InvalidArgumentError(f"need matched (N, 3) arrays, got {X.shape} and {Y.shape}")
    if len(X) < 3:
        raise DegenerateInputError("need at least 3 correspondences")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(X),) or np.any(w < 0) or not w.sum() > 0:
        raise InvalidArgumentError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    mx, my = w @ X, w @ Y
    H = (X - mx).T @ (w[:, None] * (Y - my))
    U, s, Vt = np.linalg.svd(H)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise RankDeficiencyError(
            "cross-covariance has rank < 2", {"singular_values": s.tolist(), "rank": int((s > 1e-12 * s[0]).sum())}
        )
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return se3.from_rt(R, my - R @ mx)


def icp_register(P_S, P_T, cfg: IcpConfig | None = None) -> RegistrationResult:
    """Align source to template; ``residuals`` logs the summed squared NN distance per iteration."""
    cfg = cfg or IcpConfig()
    t0 = time.perf_counter()
    S = np.asarray(as_points(P_S), dtype=float)
    T = np.asarray(as_points(P_T), dtype=float)
    if len(S) < 3 or len(T) < 3:
        raise DegenerateInputError("ICP needs at least 3 points per cloud")
    tree = cKDTree(T)
    est = np.eye(4)
    objective = []
    reason = "max_iters"
    for _ in range(cfg.max_iters):
        moved = se3.transform_points(est, S)
        dist, idx = tree.query(moved)
        keep = dist <= cfg.max_corr_dist
        if keep.sum() < 3:
            reason = "diverged"
            break
        objective.append(float(np.sum(dist[keep] ** 2)))
        step = procrustes_fit(moved[keep], T[idx[keep]])
        est = se3.compose(step, est)
        change = float(np.linalg.norm(step - np.eye(4)))
        log.debug("icp iter %d  objective %.6g  change %.3g", len(objective), objective[-1], change)
        if change < cfg.tol:
            reason = "converged"
            break
    return RegistrationResult(
        est, len(objective), objective, reason, "icp", 0, time.perf_counter() - t0, {}
    )
