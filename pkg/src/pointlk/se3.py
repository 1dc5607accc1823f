"""SE(3) / se(3) algebra with closed-form exponential and logarithm.

Twists are plain ``(6,)`` float arrays ordered rotation first:
``(w_x, w_y, w_z, v_x, v_y, v_z)``. Rigid transforms are ``(4, 4)`` arrays
with bottom row ``(0, 0, 0, 1)``. Every function here is pure.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError, SingularityError

# below this rotation angle the Rodrigues coefficients switch to Taylor series
SMALL_ANGLE = 1e-8
# the V^-1 coefficient (1 - A/2B)/theta^2 cancels badly well before SMALL_ANGLE
_VINV_SERIES_ANGLE = 1e-3
# log refuses angles closer than this to pi (axis sign is ill-defined there)
PI_MARGIN = 1e-6

ROT = slice(0, 3)
TRANS = slice(3, 6)


def skew(v) -> np.ndarray:
    """Hat operator: ``skew(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


def generators() -> np.ndarray:
    """The six 4x4 se(3) basis matrices, stacked as ``(6, 4, 4)``."""
    T = np.zeros((6, 4, 4))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        T[k, :3, :3] = skew(e)
        T[3 + k, k, 3] = 1.0
    return T


def hat(xi) -> np.ndarray:
    """``sum_p xi_p T_p`` as a 4x4 matrix."""
    xi = as_twist(xi)
    M = np.zeros((4, 4))
    M[:3, :3] = skew(xi[ROT])
    M[:3, 3] = xi[TRANS]
    return M


def as_twist(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (6,):
        raise InvalidArgumentError(f"twist must have 6 entries, got {xi.shape[0]}")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("twist has non-finite entries")
    return xi


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Return A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta**3


def exp_twist(xi) -> np.ndarray:
    """Matrix exponential of ``hat(xi)`` in closed form."""
    xi = as_twist(xi)
    w, v = xi[ROT], xi[TRANS]
    theta = float(np.linalg.norm(w))
    A, B, C = _rodrigues_coeffs(theta)
    W = skew(w)
    W2 = W @ W
    g = np.eye(4)
    g[:3, :3] = np.eye(3) + A * W + B * W2
    g[:3, 3] = (np.eye(3) + B * W + C * W2) @ v
    return g


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians, accurate near 0 and pi."""
    R = np.asarray(R, dtype=float)[:3, :3]
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(math.atan2(s, c))


def log_transform(g) -> np.ndarray:
    """Inverse of :func:`exp_twist` for rotation angles below ``pi - PI_MARGIN``."""
    g = np.asarray(g, dtype=float)
    R, t = g[:3, :3], g[:3, 3]
    theta = rotation_angle(R)
    if theta > math.pi - PI_MARGIN:
        raise SingularityError(f"rotation angle {theta!r} is at the pi singularity")
    if theta < SMALL_ANGLE:
        w = 0.5 * vee(R - R.T) * (1.0 + theta * theta / 6.0)
    else:
        w = theta / (2.0 * math.sin(theta)) * vee(R - R.T)
    W = skew(w)
    if theta < _VINV_SERIES_ANGLE:
        t2 = theta * theta
        D = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        A, B, _ = _rodrigues_coeffs(theta)
        D = (1.0 - A / (2.0 * B)) / (theta * theta)
    v = (np.eye(3) - 0.5 * W + D * (W @ W)) @ t
    return np.concatenate([w, v])


def compose(a, b) -> np.ndarray:
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def inverse(g) -> np.ndarray:
    """Inverse via the transpose-rotation form ``[R^T, -R^T t]``."""
    g = np.asarray(g, dtype=float)
    out = np.eye(4)
    Rt = g[:3, :3].T
    out[:3, :3] = Rt
    out[:3, 3] = -Rt @ g[:3, 3]
    return out


def transform_points(g, points) -> np.ndarray:
    """Apply ``g`` to an ``(N, 3)`` array, preserving row order."""
    g = np.asarray(g)
    points = np.asarray(points)
    return points @ g[:3, :3].T + g[:3, 3]


def apply(g, cloud):
    """Apply ``g`` to a :class:`~pointlk.cloud.PointCloud` or a raw ``(N, 3)`` array."""
    if hasattr(cloud, "points") and hasattr(cloud, "with_points"):
        return cloud.with_points(transform_points(g, cloud.points))
    return transform_points(g, cloud)


def adjoint_translation(c) -> np.ndarray:
    """6x6 map from a global twist to its first-order equivalent about center ``c``.

    Block form ``[[I, 0], [-skew(c), I]]``; the frame is translated only,
    never rotated.
    """
    c = np.asarray(c, dtype=float).reshape(3)
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("center has non-finite entries")
    M = np.eye(6)
    M[TRANS, ROT] = -skew(c)
    return M


def from_rt(R, t) -> np.ndarray:
    g = np.eye(4)
    g[:3, :3] = R
    g[:3, 3] = t
    return g


def is_rigid(g, tol: float = 1e-9) -> bool:
    g = np.asarray(g, dtype=float)
    if g.shape != (4, 4) or not np.all(np.isfinite(g)):
        return False
    if not np.array_equal(g[3], [0.0, 0.0, 0.0, 1.0]):
        return False
    R = g[:3, :3]
    return bool(np.linalg.norm(R.T @ R - np.eye(3)) < tol and np.linalg.det(R) > 0)


def check_rigid(g, name: str = "transform", tol: float = 1e-9) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if not is_rigid(g, tol):
        raise InvalidArgumentError(f"{name} is not a valid SE(3) matrix")
    return g
