"""Independent reference computations used by the test-suite.

Nothing here calls the analytical derivative code under test: the network
is re-evaluated with plain per-point loops and all derivatives are finite
differences.
"""

import numpy as np

from pointlk import se3
from pointlk.featnet import BN_EPS


def naive_point_features(net, p, dtype=float):
    """Per-layer output and ReLU pattern for a single point, one layer at a time."""
    z = np.asarray(p, dtype=dtype)
    pattern = []
    for layer in net.layers:
        A, b = layer.A.astype(dtype), layer.b.astype(dtype)
        a = np.dot(A, z) + b
        if layer.has_bn:
            scale = layer.bn_scale.astype(dtype) / np.sqrt(layer.bn_var.astype(dtype) + BN_EPS)
            a = scale * (a - layer.bn_mean.astype(dtype)) + layer.bn_shift.astype(dtype)
        pattern.append(a > 0)
        z = np.where(a > 0, a, 0.0)
    return z, pattern


def naive_global_feature(net, P):
    feats = np.array([naive_point_features(net, p)[0] for p in P])
    return feats.max(axis=0)


def relu_pattern(net, p):
    return np.concatenate(naive_point_features(net, p)[1])


def fd_point_gradient(net, p, h=1e-5, dtype=float):
    """Central differences of z_L w.r.t. one point, shape (3, K).

    With dtype=np.longdouble the network is evaluated in extended precision,
    so the cancellation error of the difference (about eps*|z|/h) stays far
    below entries of size 1e-8..1e-6.

    Also returns a flag per coordinate telling whether the ReLU pattern is
    constant over the stencil; where it is not, the function is not
    differentiable along the stencil and the difference is meaningless.
    """
    base = relu_pattern(net, p)
    grad = []
    smooth = []
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        q = np.asarray(p, dtype=dtype)
        fp, pp = naive_point_features(net, q + e, dtype)
        fm, pm = naive_point_features(net, q - e, dtype)
        grad.append(((fp - fm) / (2 * h)).astype(float))
        smooth.append(
            np.array_equal(np.concatenate(pp), base) and np.array_equal(np.concatenate(pm), base)
        )
    return np.array(grad), np.array(smooth)


def warped_feature(feature_fn, P, xi, offset=None):
    """feature_fn(exp(-xi) . P - offset)."""
    Q = se3.transform_points(se3.exp_twist(-np.asarray(xi, dtype=float)), P)
    if offset is not None:
        Q = Q - offset
    return feature_fn(Q)


def fd_twist_jacobian(feature_fn, P, h=1e-6, offset=None):
    """Central-difference K x 6 Jacobian of xi -> feature(exp(-xi) . P - offset) at 0."""
    cols = []
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fp = warped_feature(feature_fn, P, e, offset)
        fm = warped_feature(feature_fn, P, -e, offset)
        cols.append((fp - fm) / (2 * h))
    return np.column_stack(cols)


def pearson(a, b):
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0
