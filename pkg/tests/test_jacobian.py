import numpy as np
import pytest

from conftest import random_net
from oracles import fd_twist_jacobian, naive_global_feature
from pointlk import cloud, featnet, jacobian, se3
from pointlk.errors import InvalidArgumentError, RankDeficiencyError


def _rel_entrywise(J, F, floor=1e-8):
    big = np.maximum(np.abs(J), np.abs(F)) > floor
    return (np.abs(J - F)[big] / np.maximum(np.abs(J), np.abs(F))[big]).max(initial=0.0)


def _cloud(kind="cube", n=200, seed=0):
    return cloud.normalize_unit_box(cloud.generate_primitive(kind, n, seed=seed)).points


def test_warp_jacobian_matches_finite_differences():
    p = np.array([0.3, -0.2, 0.5])
    h = 1e-6
    cols = []
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        plus = se3.transform_points(se3.exp_twist(-e), p[None])[0]
        minus = se3.transform_points(se3.exp_twist(e), p[None])[0]
        cols.append((plus - minus) / (2 * h))
    np.testing.assert_allclose(jacobian.warp_jacobian(p), np.column_stack(cols), atol=1e-9)


def test_vectorized_warp_matches_single_point():
    P = np.random.default_rng(0).normal(size=(20, 3))
    W = jacobian.warp_jacobians(P)
    for i, p in enumerate(P):
        np.testing.assert_array_equal(W[i], jacobian.warp_jacobian(p))


def test_planar_warp_columns():
    p = np.array([0.4, -0.1, 0.7])
    np.testing.assert_array_equal(jacobian.planar_warp_jacobian(p), jacobian.warp_jacobian(p)[:, [2, 3, 4]])


def test_warp_at_origin_is_pure_translation():
    np.testing.assert_array_equal(jacobian.warp_jacobian(np.zeros(3)), np.hstack([np.zeros((3, 3)), -np.eye(3)]))


@pytest.mark.parametrize("seed", range(3))
def test_analytical_matches_naive_finite_differences(seed):
    net = random_net(seed, (3, 32, 64, 128))
    P = _cloud(cloud.PRIMITIVES[seed], 150, seed)
    J = jacobian.analytical_jacobian(net, P).J
    F = fd_twist_jacobian(lambda Q: naive_global_feature(net, Q), P)
    assert _rel_entrywise(J, F) < 1e-4


def test_rows_route_through_winning_point():
    net = random_net(3, (3, 16, 32, 64))
    P = _cloud("torus", 80, 3)
    J, acts = jacobian.steepest_descent_features(net, P)
    G = featnet.input_gradient(net, P, acts)
    for k in range(64):
        i = acts.argmax[k]
        np.testing.assert_allclose(J[k], G[i, :, k] @ jacobian.warp_jacobian(P[i]), atol=1e-14)


def test_offset_shifts_feature_not_warp():
    net = random_net(4, (3, 16, 32, 64))
    P = _cloud("cylinder", 100, 4)
    c = np.array([0.2, -0.1, 0.3])
    J = jacobian.steepest_descent_features(net, P, offset=c)[0]
    F = fd_twist_jacobian(lambda Q: featnet.global_feature(net, Q), P, offset=c)
    assert _rel_entrywise(J, F) < 1e-4


def test_single_voxel_reproduces_whole_cloud_jacobian():
    net = random_net(5)
    P = _cloud("plane-with-bumps", 300, 5) + np.array([0.4, -0.3, 0.2])
    part = cloud.voxelize(P, (1, 1, 1), min_points=4)
    c = part.voxels[0].center
    assert np.linalg.norm(c) > 0.1
    Jv = jacobian.voxel_global_jacobian(net, part, P).J
    # whole-cloud Jacobian of the feature taken in the centroid frame
    Jw = jacobian.steepest_descent_features(net, P, offset=c)[0]
    assert np.linalg.norm(Jv - Jw) / np.linalg.norm(Jw) < 1e-8


def test_build_counter_counts_bundles():
    net = random_net(6, (3, 16, 32, 64))
    P = _cloud("cube", 60, 6)
    before = jacobian.build_count()
    jacobian.analytical_jacobian(net, P)
    jacobian.numerical_jacobian(net, P, 1e-2)
    assert jacobian.build_count() - before == 2


def test_single_point_is_rank_deficient():
    net = random_net(7, (3, 16, 32, 64))
    with pytest.raises(RankDeficiencyError) as info:
        jacobian.analytical_jacobian(net, np.array([[0.1, 0.2, 0.3]]))
    assert info.value.diagnostics["rank"] < 6
    bundle = jacobian.analytical_jacobian(net, np.array([[0.1, 0.2, 0.3]]), strict=False)
    assert bundle.diagnostics["rank"] < 6


def test_pinv_is_left_inverse_at_full_rank():
    net = random_net(8, (3, 32, 64, 128))
    b = jacobian.analytical_jacobian(net, _cloud("cube", 200, 8))
    np.testing.assert_allclose(b.pinv @ b.J, np.eye(6), atol=1e-8)


def test_numerical_step_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        jacobian.numerical_jacobian(random_net(9, (3, 8, 16)), np.zeros((5, 3)), 0.0)


def test_numerical_jacobian_close_at_moderate_step():
    net = random_net(10, (3, 32, 64, 128))
    P = _cloud("torus", 200, 10)
    A = jacobian.analytical_jacobian(net, P).J
    N = jacobian.numerical_jacobian(net, P, 1e-3, dtype=np.float64).J
    assert np.linalg.norm(A - N) / np.linalg.norm(A) < 0.05
