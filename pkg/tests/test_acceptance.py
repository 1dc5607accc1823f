"""Acceptance criteria 1-12; each test records one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_net
from oracles import fd_point_gradient, fd_twist_jacobian, naive_global_feature, pearson
from pointlk import bench, cloud, featnet, icp, jacobian, metrics, se3, solver, trainer
from pointlk.metrics import PairError

EVAL_PAIRS = 100
EVAL_SEED = 424242


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def _prim(kind, n, seed):
    return cloud.normalize_unit_box(cloud.generate_primitive(kind, n, seed=seed))


# -------------------------------------------------------------------------- 1
def test_c01_gradient_exactness():
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for s in range(20):
        net = featnet.fold_bn(random_net(1000 + s))
        for c in range(5):
            P = np.random.default_rng([s, c]).uniform(-0.5, 0.5, (8, 3))
            G = featnet.input_gradient(net, P)
            for i, p in enumerate(P):
                fd, smooth = fd_point_gradient(net, p, h=1e-5, dtype=np.longdouble)
                for ax in np.flatnonzero(smooth):
                    a, b = G[i, ax], fd[ax]
                    big = np.maximum(np.abs(a), np.abs(b)) > 1e-8
                    rel = np.abs(a - b)[big] / np.maximum(np.abs(a), np.abs(b))[big]
                    worst = max(worst, rel.max(initial=0.0))
                    checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30 and checked > 2000
    assert report(1, ok, f"max rel err {worst:.2e} over {checked} stencils, {elapsed:.1f}s")


# -------------------------------------------------------------------------- 2
def test_c02_jacobian_decomposition(trained_model):
    t0 = time.perf_counter()
    worst = 0.0
    nets = [trained_model, featnet.fold_bn(featnet.init_net((3, 32, 64, 256), seed=5)), random_net(6)]
    for k, net in enumerate(nets):
        for kind in ("cube", "torus"):
            P = _prim(kind, 300, 10 + k).points
            J = jacobian.analytical_jacobian(net, P, strict=False).J
            F = fd_twist_jacobian(lambda Q: naive_global_feature(net, Q), P, h=1e-6)
            big = np.maximum(np.abs(J), np.abs(F)) > 1e-8
            worst = max(worst, (np.abs(J - F)[big] / np.maximum(np.abs(J), np.abs(F))[big]).max())
    elapsed = time.perf_counter() - t0
    assert report(2, worst < 1e-4 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.1f}s")


# -------------------------------------------------------------------------- 3
def test_c03_step_size_trend(trained_model):
    t0 = time.perf_counter()
    P = _prim("cube", 1000, 3).points
    A = jacobian.analytical_jacobian(trained_model, P).J
    r = {}
    for t in (1e-10, 1e-2, 10.0):
        N = jacobian.numerical_jacobian(trained_model, P, t, dtype=np.float32, strict=False).J
        r[t] = pearson(A, N)
    elapsed = time.perf_counter() - t0
    ok = r[1e-2] > max(r[10.0], r[1e-10]) and r[1e-10] < 0.5 and elapsed < 10
    detail = ", ".join(f"r(t={t:g})={v:.3f}" for t, v in r.items())
    assert report(3, ok, f"{detail}, {elapsed:.1f}s")


# -------------------------------------------------------------------------- 4
def test_c04_voxel_conditioning():
    t0 = time.perf_counter()
    net = random_net(4)
    P = _prim("plane-with-bumps", 500, 4).points + np.array([0.7, -0.4, 0.3])
    part = cloud.voxelize(P, (1, 1, 1), min_points=4)
    c = part.voxels[0].center
    Jv = jacobian.voxel_global_jacobian(net, part, P).J
    # whole cloud, feature taken in the centroid frame, warp about the global origin
    Jw = jacobian.analytical_jacobian(net, P, offset=c).J
    rel = np.linalg.norm(Jv - Jw) / np.linalg.norm(Jw)
    # and both describe the finite-difference Jacobian of the same map
    F = fd_twist_jacobian(lambda Q: naive_global_feature(net, Q), P, offset=c)
    fd_rel = np.linalg.norm(Jv - F) / np.linalg.norm(F)
    elapsed = time.perf_counter() - t0
    ok = np.linalg.norm(c) > 0.5 and rel < 1e-8 and fd_rel < 1e-4 and elapsed < 5
    assert report(4, ok, f"rel Frobenius {rel:.2e} (vs finite differences {fd_rel:.1e}), |c|={np.linalg.norm(c):.2f}")


# -------------------------------------------------------------------------- 5
def test_c05_fixed_point(trained_model):
    worst, iters = 0.0, 0
    vcfg = solver.VoxelConfig((2, 2, 2), min_points=16)
    for i in range(50):
        P = _prim(cloud.PRIMITIVES[i % 5], 1000, 500 + i)
        for res in (
            solver.register(trained_model, P, P),
            solver.register_voxelized(trained_model, P, P, voxel_cfg=vcfg),
        ):
            worst = max(worst, np.linalg.norm(res.estimate - np.eye(4)))
            iters = max(iters, res.iterations)
    assert report(5, worst < 1e-8 and iters <= 2, f"max |est - I|_F {worst:.1e}, max iterations {iters}")


# -------------------------------------------------------------------------- 6, 7
@pytest.fixture(scope="module")
def desk_eval(desk):
    net, meta = desk
    pairs = trainer.build_dataset(EVAL_PAIRS, 1000, seed=EVAL_SEED, max_rot_deg=30.0, max_trans=0.3)
    cfg = solver.SolverConfig(max_iters=10, center=True)
    analytical = [solver.register(net, p.source, p.template, cfg) for p in pairs]
    num_cfg = solver.SolverConfig(max_iters=10, center=True, method="numerical", step=1e-2)
    numerical = [solver.register(net, p.source, p.template, num_cfg) for p in pairs]
    return net, meta, pairs, analytical, numerical


def test_c06_desk_scale_registration(desk_eval):
    _, meta, pairs, analytical, _ = desk_eval
    errs = [metrics.pair_error(r.estimate, p.gt) for r, p in zip(analytical, pairs)]
    agg = metrics.aggregate(errs)
    cfg = meta["config"]
    trained_ok = (
        tuple(cfg["widths"]) == (3, 32, 64, 256)
        and cfg["n_pairs"] == 500
        and cfg["max_rot_deg"] == 45.0
        and cfg["max_trans"] == 0.8
        and meta["train_seconds"] <= 1800
    )
    ok = trained_ok and agg.success_ratio >= 0.85 and agg.rot_median < 1.0
    detail = (
        f"success {agg.success_ratio:.2f}, median rot {agg.rot_median:.3g} deg over {agg.n} pairs; "
        f"trained {meta['epochs_run']} epochs in {meta['train_seconds'] / 60:.1f} min"
    )
    assert report(6, ok, detail)


def test_c07_fidelity(desk_eval):
    _, _, pairs, analytical, numerical = desk_eval
    idx = [i for i, r in enumerate(analytical) if r.termination == "converged"]
    th = 1e-3
    a = np.mean([metrics.pair_error(analytical[i].estimate, pairs[i].gt).rot_deg < th for i in idx]) if idx else 0.0
    n = np.mean([metrics.pair_error(numerical[i].estimate, pairs[i].gt).rot_deg < th for i in idx]) if idx else 0.0
    ok = len(idx) > 0 and a > n
    assert report(7, ok, f"rot < {th:g} deg on {len(idx)} converged pairs: analytical {a:.2f}, numerical(t=1e-2) {n:.2f}")


# -------------------------------------------------------------------------- 8
def test_c08_voxelization_trend(trained_model):
    data = dict(bench.DEFAULTS["voxel"]["data"])
    data.update(n_pairs=100, n_points=2000, seed=8, max_rot_deg=30.0, max_trans=0.3)
    pairs = bench.make_pairs(data)
    # scene mode runs 20 iterations
    cfg = solver.SolverConfig(max_iters=bench.SCENE_MAX_ITERS, center=True)
    vcfg = solver.VoxelConfig((2, 2, 2), min_points=16)
    whole, vox = [], []
    for p in pairs:
        whole.append(metrics.pair_error(solver.register(trained_model, p.source, p.template, cfg).estimate, p.gt))
        vox.append(
            metrics.pair_error(solver.register_voxelized(trained_model, p.source, p.template, cfg, vcfg).estimate, p.gt)
        )
    mw = metrics.lower_median([e.rot_deg for e in whole])
    mv = metrics.lower_median([e.rot_deg for e in vox])
    assert report(8, mv <= mw and len(pairs) >= 100, f"median rot: voxel(2,2,2) {mv:.3g} deg, whole cloud {mw:.3g} deg, {len(pairs)} scenes")


# -------------------------------------------------------------------------- 9
def test_c09_icp_sanity():
    rng = np.random.default_rng(9)
    worst, max_iters, monotone, steps = 0.0, 0, True, 0
    # sparse clouds: nearest neighbours coincide with the true matches after a few steps
    for i in range(20):
        c = _prim(cloud.PRIMITIVES[i % 5], 100, 900 + i)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        gt = se3.exp_twist(np.concatenate([axis * np.radians(15.0), rng.uniform(-0.02, 0.02, 3)]))
        pair = cloud.make_pair(c, gt)
        res = icp.icp_register(pair.source, pair.template)
        err = se3.compose(res.estimate, se3.inverse(gt))
        worst = max(worst, se3.rotation_angle(err[:3, :3]))
        max_iters = max(max_iters, res.iterations)
        diffs = np.diff(res.residuals)
        monotone &= bool(np.all(diffs <= 0))
        steps += len(diffs)
    ok = worst < 1e-4 and max_iters <= 10 and monotone
    assert report(9, ok, f"max rot err {worst:.1e} rad, max iterations {max_iters}, objective non-increasing over {steps} steps: {monotone}")


# -------------------------------------------------------------------------- 10
def test_c10_loss_properties():
    rng = np.random.default_rng(10)
    zero_ok, pos_ok = True, True
    for _ in range(1000):
        a = se3.exp_twist(np.concatenate([rng.normal(size=3) * 0.8, rng.normal(size=3)]))
        b = se3.exp_twist(np.concatenate([rng.normal(size=3) * 0.8, rng.normal(size=3)]))
        # est gt^-1 is formed numerically, so "zero" means zero up to rounding
        zero_ok &= trainer.loss_transform(a, a) < 1e-20
        pos_ok &= trainer.loss_transform(a, b) > 0.0
    net = featnet.fold_bn(random_net(10, (3, 32, 64, 256)))
    worst_feat = 0.0
    for i in range(10):
        c = _prim(cloud.PRIMITIVES[i % 5], 500, 1000 + i)
        gt = se3.exp_twist(cloud.sample_perturbation(rng))
        pair = cloud.make_pair(c, gt)
        worst_feat = max(worst_feat, trainer.loss_feature(net, gt, pair.template, pair.source))
    ok = zero_ok and pos_ok and worst_feat < 1e-10
    assert report(10, ok, f"L_G zero on equal: {zero_ok}, positive otherwise: {pos_ok}; max L_phi at exact alignment {worst_feat:.1e}")


# -------------------------------------------------------------------------- 11
def test_c11_one_jacobian_per_registration(trained_model):
    counts = set()
    P = _prim("torus", 800, 11)
    pair = cloud.make_pair(P, se3.exp_twist(np.array([0.2, -0.3, 0.1, 0.05, 0.1, 0.0])))
    for max_iters in (1, 2, 5, 10, 20):
        for run in (
            lambda c: solver.register(trained_model, pair.source, pair.template, c),
            lambda c: solver.register_voxelized(trained_model, pair.source, pair.template, c),
            lambda c: solver.register(
                trained_model, pair.source, pair.template,
                solver.SolverConfig(max_iters=c.max_iters, dx_tol=c.dx_tol, method="numerical"),
            ),
        ):
            before = jacobian.build_count()
            res = run(solver.SolverConfig(max_iters=max_iters, dx_tol=1e-30))
            counts.add((jacobian.build_count() - before, res.jacobian_builds))
    assert report(11, counts == {(1, 1)}, f"builds per registration observed: {sorted(counts)}")


# -------------------------------------------------------------------------- 12
def _brute_aggregate(errors, rt=5.0, tt=0.05):
    n = len(errors)
    rs = sorted(e.rot_deg for e in errors)
    ts = sorted(e.trans for e in errors)
    rmse_r = math.sqrt(sum(e.rot_deg ** 2 for e in errors) / n)
    rmse_t = math.sqrt(sum(e.trans ** 2 for e in errors) / n)
    succ = sum(1 for e in errors if e.rot_deg < rt and e.trans < tt) / n
    return rmse_r, rmse_t, rs[(n - 1) // 2], ts[(n - 1) // 2], succ


def _brute_auc(xs, ys):
    area = 0.0
    for i in range(1, len(xs)):
        area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0
    return area / (xs[-1] - xs[0])


def test_c12_metrics_oracle():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        errs = [PairError(float(r), float(t)) for r, t in zip(rng.exponential(5, n), rng.exponential(0.05, n))]
        agg = metrics.aggregate(errs)
        got = (agg.rot_rmse, agg.trans_rmse, agg.rot_median, agg.trans_median, agg.success_ratio)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, _brute_aggregate(errs))))
        m = int(rng.integers(2, 30))
        xs = np.cumsum(rng.uniform(0.01, 1.0, m))
        ys = rng.uniform(0, 1, m)
        worst = max(worst, abs(metrics.auc(xs, ys) - _brute_auc(list(xs), list(ys))))
    assert report(12, worst < 1e-12, f"max deviation from brute force {worst:.1e} over 1000 lists")
