"""Registration Jacobians: analytical, finite-difference and voxel-conditioned.

All Jacobians describe ``xi -> phi(exp(-xi) . P)`` at ``xi = 0``; rows are
feature dimensions, columns twist coordinates (rotation first). The
analytical one is the chain rule of the per-point feature gradient and the
warp Jacobian, routed through the max-pool winners.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import featnet, se3
from .cloud import as_points
from .errors import InvalidArgumentError, NonFiniteError, RankDeficiencyError

RANK_RTOL = 1e-10
PLANAR_COLUMNS = (2, 3, 4)  # w_z, v_x, v_y

_lock = threading.Lock()
_builds = 0


def build_count() -> int:
    """Total number of Jacobian bundles built in this process."""
    return _builds


def _count_build():
    global _builds
    with _lock:
        _builds += 1


@dataclass
class JacobianBundle:
    J: np.ndarray
    pinv: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def dof(self) -> int:
        return self.J.shape[1]


def make_bundle(J, method: str, strict: bool = True, **extra) -> JacobianBundle:
    """Attach an SVD-based pseudoinverse with relative rank tolerance ``RANK_RTOL``.

    With ``strict`` a rank-deficient ``J`` raises; otherwise the truncated
    pseudoinverse is returned and ``diagnostics['rank']`` tells the story.
    """
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise NonFiniteError(f"{method} Jacobian has non-finite entries")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    smax = s[0] if s.size else 0.0
    keep = s > RANK_RTOL * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    rank = int(keep.sum())
    cond = float(s[0] ** 2 / s[-1] ** 2) if s[-1] > 0 else float("inf")
    diagnostics = {"singular_values": s.tolist(), "rank": rank, "cond_JtJ": cond, **extra}
    if strict and rank < J.shape[1]:
        raise RankDeficiencyError(f"{method} Jacobian has rank {rank} < {J.shape[1]}", diagnostics)
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    pinv = (Vt.T * inv_s) @ U.T
    _count_build()
    return JacobianBundle(J, pinv, method, diagnostics)


def warp_jacobian(p) -> np.ndarray:
    """d/dxi of ``exp(-xi) . p`` at 0, i.e. ``[skew(p) | -I]`` (3 x 6)."""
    p = np.asarray(p, dtype=float).reshape(3)
    return np.hstack([se3.skew(p), -np.eye(3)])


def warp_jacobians(P) -> np.ndarray:
    """Vectorized :func:`warp_jacobian` for an (N, 3) array, shape (N, 3, 6)."""
    P = np.asarray(P, dtype=float)
    W = np.zeros((len(P), 3, 6))
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    W[:, 0, 1], W[:, 0, 2] = -z, y
    W[:, 1, 0], W[:, 1, 2] = z, -x
    W[:, 2, 0], W[:, 2, 1] = -y, x
    W[:, [0, 1, 2], [3, 4, 5]] = -1.0
    return W


def planar_warp_jacobian(p) -> np.ndarray:
    """3-DoF in-plane warp (rotation about z, translation in x and y), 3 x 3."""
    return warp_jacobian(p)[:, PLANAR_COLUMNS]


def _warp_fn(dof: str):
    if dof == "se3":
        return warp_jacobians
    if dof == "planar":
        return lambda P: warp_jacobians(P)[:, :, PLANAR_COLUMNS]
    raise InvalidArgumentError(f"unknown warp {dof!r}; expected 'se3' or 'planar'")


def steepest_descent_features(net, P, offset=None, dof: str = "se3", acts=None):
    """Pooled K x dof Jacobian rows and the forward activations used.

    The feature is evaluated on ``P - offset`` while the warp acts about the
    global origin; row ``k`` is the product of the feature gradient and the
    warp Jacobian at the point that wins feature ``k``.
    """
    P = np.asarray(as_points(P), dtype=float)
    local = P if offset is None else P - np.asarray(offset, dtype=float)
    if acts is None:
        _, acts = featnet.forward(net, local)
    G = featnet.pooled_feature_gradient(net, acts)  # (K, 3)
    W = _warp_fn(dof)(P[acts.argmax])  # (K, 3, dof)
    return np.einsum("kc,kcd->kd", G, W), acts


def analytical_jacobian(net, P, offset=None, dof: str = "se3", strict: bool = True) -> JacobianBundle:
    J, acts = steepest_descent_features(net, P, offset, dof)
    return make_bundle(
        J, "analytical", strict, argmax_coverage=int(np.unique(acts.argmax).size), dof=dof
    )


def numerical_jacobian(net, P, t: float, dtype=np.float32, strict: bool = True) -> JacobianBundle:
    """One-sided finite differences ``(phi(exp(-t T_p) P) - phi(P)) / t`` per generator.

    The six perturbed forwards (and the warp) run in ``dtype``; single
    precision by default, which is where the baseline's step-size failure
    modes (cancellation at tiny ``t``) live.
    """
    if not t > 0:
        raise InvalidArgumentError("step size t must be positive")
    P = np.asarray(as_points(P), dtype=float)
    Pd = P.astype(dtype)
    f0 = featnet.global_feature(net, Pd, dtype=dtype)
    cols = []
    for p in range(6):
        e = np.zeros(6)
        e[p] = t
        g = se3.exp_twist(-e).astype(dtype)
        Q = Pd @ g[:3, :3].T + g[:3, 3]
        fp = featnet.global_feature(net, Q, dtype=dtype)
        cols.append((fp - f0) / dtype(t))
    J = np.column_stack(cols).astype(float)
    return make_bundle(J, f"numerical(t={t:g})", strict, step=t, dtype=np.dtype(dtype).name)


def local_jacobian(net, points, center) -> np.ndarray:
    """K x 6 Jacobian of one voxel in its own frame (points shifted to ``center``)."""
    return steepest_descent_features(net, np.asarray(points) - center)[0]


def voxel_global_jacobian(net, partition, points, strict: bool = True) -> JacobianBundle:
    """Sum over voxels of ``J_local(V_m - c_m) @ adjoint_translation(c_m)``.

    Accumulated in voxel order; the per-voxel blocks are never concatenated.
    """
    pts = np.asarray(as_points(points), dtype=float)
    J = np.zeros((net.K, 6))
    per_voxel_rank = []
    for voxel in partition.voxels:
        J_local = local_jacobian(net, pts[voxel.indices], voxel.center)
        per_voxel_rank.append(int(np.linalg.matrix_rank(J_local)))
        J += J_local @ se3.adjoint_translation(voxel.center)
    return make_bundle(
        J, "voxelized", strict, n_voxels=len(partition.voxels), voxel_ranks=per_voxel_rank
    )
