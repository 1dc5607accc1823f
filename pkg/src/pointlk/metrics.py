"""Registration error metrics and aggregates.

Errors are measured on ``E = est . gt^-1``: the rotation error is the angle
of ``R_E`` in degrees and the translation error is ``||t_E||``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import se3
from .errors import InvalidArgumentError

ROT_THRESHOLD_DEG = 5.0
TRANS_THRESHOLD = 0.05


@dataclass(frozen=True)
class PairError:
    rot_deg: float
    trans: float


def pair_error(est, gt) -> PairError:
    """Rotation (degrees) and translation error of ``est`` against ``gt``.

    A non-finite estimate counts as the worst case: 180 degrees and infinite
    translation error.
    """
    est = np.asarray(est, dtype=float)
    if not np.all(np.isfinite(est)):
        return PairError(180.0, math.inf)
    E = se3.compose(est, se3.inverse(gt))
    angle = se3.rotation_angle(E[:3, :3])
    return PairError(math.degrees(angle), float(np.linalg.norm(E[:3, 3])))


def is_success(err: PairError, rot_deg: float = ROT_THRESHOLD_DEG, trans: float = TRANS_THRESHOLD) -> bool:
    """Strict thresholds on both errors."""
    return err.rot_deg < rot_deg and err.trans < trans


def lower_median(values) -> float:
    """Median that picks the lower middle element for even counts (no interpolation)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InvalidArgumentError("median of an empty set")
    return float(v[(v.size - 1) // 2])


@dataclass(frozen=True)
class Aggregate:
    n: int
    rot_rmse: float
    trans_rmse: float
    rot_median: float
    trans_median: float
    success_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(errors, rot_deg: float = ROT_THRESHOLD_DEG, trans: float = TRANS_THRESHOLD) -> Aggregate:
    errors = list(errors)
    if not errors:
        raise InvalidArgumentError("no errors to aggregate")
    r = np.array([e.rot_deg for e in errors])
    t = np.array([e.trans for e in errors])
    return Aggregate(
        n=len(errors),
        rot_rmse=float(np.sqrt(np.mean(r * r))),
        trans_rmse=float(np.sqrt(np.mean(t * t))),
        rot_median=lower_median(r),
        trans_median=lower_median(t),
        success_ratio=float(np.mean([is_success(e, rot_deg, trans) for e in errors])),
    )


def success_curve(
    errors, max_rot_deg: float = ROT_THRESHOLD_DEG, max_trans: float | None = None, n: int = 64
):
    """Success ratio at ``n`` jointly scaled thresholds ``s * (max_rot, max_trans)``, ``s`` in [0, 1].

    Returns ``(rot_thresholds, trans_thresholds, ratios)``. The first point
    sits at zero, where the strict criterion never succeeds.
    """
    r, t = _split(errors)
    if max_trans is None:
        max_trans = max_rot_deg * TRANS_THRESHOLD / ROT_THRESHOLD_DEG
    s = np.linspace(0.0, 1.0, n)
    rt, tt = s * max_rot_deg, s * max_trans
    ratios = np.array([np.mean((r < a) & (t < b)) for a, b in zip(rt, tt)])
    return rt, tt, ratios


def separate_curves(
    errors, max_rot_deg: float = ROT_THRESHOLD_DEG, max_trans: float = TRANS_THRESHOLD, n: int = 64
):
    """Rotation-only and translation-only success curves on the same grid.

    Returns ``(rot_thresholds, rot_ratios, trans_thresholds, trans_ratios)``.
    """
    r, t = _split(errors)
    s = np.linspace(0.0, 1.0, n)
    rt, tt = s * max_rot_deg, s * max_trans
    return rt, np.array([np.mean(r < a) for a in rt]), tt, np.array([np.mean(t < b) for b in tt])


def _split(errors):
    errors = list(errors)
    if not errors:
        raise InvalidArgumentError("no errors")
    return np.array([e.rot_deg for e in errors]), np.array([e.trans for e in errors])


def auc(thresholds, ratios) -> float:
    """Trapezoidal area under a success curve, normalized by the threshold range."""
    x = np.asarray(thresholds, dtype=float)
    y = np.asarray(ratios, dtype=float)
    if x.size < 2 or x.shape != y.shape:
        raise InvalidArgumentError("need at least two matching points")
    span = x[-1] - x[0]
    if not span > 0:
        raise InvalidArgumentError("thresholds must increase")
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0) / span)
