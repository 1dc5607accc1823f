import json

import numpy as np
import pytest

from conftest import random_net
from pointlk import cloud, featnet, jacobian, se3, solver
from pointlk.errors import InvalidArgumentError, ModeError


def _cloud(kind="cube", n=300, seed=0):
    return cloud.normalize_unit_box(cloud.generate_primitive(kind, n, seed=seed)).points


@pytest.fixture
def folded():
    return featnet.fold_bn(random_net(0, (3, 32, 64, 128)))


def test_identical_clouds_give_identity(folded):
    P = _cloud()
    res = solver.register(folded, P, P)
    assert res.termination == "converged" and res.iterations == 1
    np.testing.assert_array_equal(res.estimate, np.eye(4))


def test_voxelized_identical_clouds_give_identity(folded):
    P = _cloud("cylinder", 800, 1)
    res = solver.register_voxelized(folded, P, P, voxel_cfg=solver.VoxelConfig((2, 2, 2), min_points=8))
    assert res.termination == "converged" and res.iterations <= 2
    assert np.linalg.norm(res.estimate - np.eye(4)) < 1e-8


def test_train_mode_net_is_refused():
    net = featnet.init_net((3, 8, 16), mode="train")
    with pytest.raises(ModeError):
        solver.register(net, np.zeros((4, 3)), np.zeros((4, 3)))


def test_one_jacobian_build_per_registration(folded):
    P = _cloud("torus", 300, 2)
    Q = se3.transform_points(se3.exp_twist(np.array([0.2, -0.1, 0.3, 0.05, 0.0, 0.02])), P)
    for max_iters in (1, 3, 10):
        before = jacobian.build_count()
        res = solver.register(folded, Q, P, solver.SolverConfig(max_iters=max_iters, dx_tol=1e-30))
        assert jacobian.build_count() - before == 1 == res.jacobian_builds
        assert res.iterations == len(res.residuals) <= max_iters


def test_single_voxel_reduces_to_centered_whole_cloud(folded):
    P = _cloud("plane-with-bumps", 600, 3)
    gt = se3.exp_twist(np.array([0.1, 0.05, -0.1, 0.05, 0.02, 0.0]))
    pair = cloud.make_pair(cloud.PointCloud(P), gt)
    vox = solver.register_voxelized(
        folded, pair.source, pair.template, voxel_cfg=solver.VoxelConfig((1, 1, 1), min_points=4)
    )
    c = pair.template.points.mean(axis=0)
    whole = solver.register(folded, pair.source.points - c, pair.template.points - c)
    shift = se3.from_rt(np.eye(3), c)
    np.testing.assert_allclose(vox.estimate, shift @ whole.estimate @ se3.inverse(shift), atol=1e-12)
    np.testing.assert_allclose(vox.residuals, whole.residuals, rtol=0, atol=1e-12)


def test_rank_deficient_jacobian_returns_identity(folded):
    res = solver.register(folded, np.array([[0.1, 0.2, 0.3]]), np.array([[0.1, 0.2, 0.3]]))
    assert res.termination == "rank_deficient" and not res.ok
    np.testing.assert_array_equal(res.estimate, np.eye(4))


def test_divergence_guard_stops_early():
    # a Jacobian pseudoinverse that grossly overshoots every step
    net = featnet.fold_bn(random_net(4, (3, 16, 32, 64)))
    P = _cloud("cube", 200, 4)
    Q = se3.transform_points(se3.exp_twist(np.array([0.0, 0.0, 0.3, 0.0, 0.0, 0.0])), P)
    bundle = jacobian.analytical_jacobian(net, P)
    bundle.pinv *= 1e3
    f_S = featnet.global_feature(net, Q)
    cfg = solver.SolverConfig(max_iters=10)

    def residual(g):
        return f_S - featnet.global_feature(net, se3.transform_points(g, P))

    _, log, reason = solver._iterate(residual, bundle, cfg, "se3")
    assert reason == "diverged"
    assert log[-1] > 10 * log[0]


def test_planar_registration_stays_in_plane(folded):
    P = _cloud("plane-with-bumps", 400, 5)
    gt = se3.exp_twist(np.array([0.0, 0.0, 0.2, 0.05, -0.03, 0.0]))
    pair = cloud.make_pair(cloud.PointCloud(P), gt)
    res = solver.register(folded, pair.source, pair.template, solver.SolverConfig(dof="planar"))
    xi = se3.log_transform(res.estimate)
    np.testing.assert_allclose(xi[[0, 1, 5]], 0.0, atol=1e-12)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        solver.SolverConfig(max_iters=0)
    with pytest.raises(InvalidArgumentError):
        solver.SolverConfig(method="numerical", step=-1.0)
    with pytest.raises(InvalidArgumentError):
        solver.SolverConfig(method="numerical", dof="planar")


def test_centering_recovers_pure_translation(folded):
    P = _cloud("cube", 300, 6)
    gt = se3.from_rt(np.eye(3), np.array([0.4, -0.3, 0.2]))
    pair = cloud.make_pair(cloud.PointCloud(P), gt)
    res = solver.register(folded, pair.source, pair.template, solver.SolverConfig(center=True))
    np.testing.assert_allclose(res.estimate, gt, atol=1e-12)


def test_result_json_round_trip(folded):
    P = _cloud()
    res = solver.register(folded, P, P)
    back = solver.RegistrationResult.from_dict(json.loads(res.to_json()))
    np.testing.assert_array_equal(back.estimate, res.estimate)
    assert back.termination == res.termination and back.residuals == res.residuals
