"""Training the embedding through a few unrolled registration iterations.

Losses per pair: the rigid-transformation loss ``||est gt^-1 - I||_F^2`` and
the feature loss ``||phi(est^-1 . P_T) - phi(P_S)||^2``. Gradients are exact
reverse-mode through the unrolled iterations with two quantities held
constant: the Jacobian pseudoinverse (built once per pair from the current
parameters) and the batch-norm statistics (computed once per batch).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import expm_frechet

from . import featnet, jacobian, metrics, se3
from .cloud import PRIMITIVES, PairSpec, generate_primitive, make_pair, normalize_unit_box, sample_perturbation
from .errors import ConfigurationError, NonFiniteError

log = logging.getLogger(__name__)

_GENERATORS = se3.generators()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    # "decoupled": AdamW-style shrinkage; "lr": per-epoch learning-rate decay lr/(1 + decay*epoch)
    decay_mode: str = "decoupled"
    unroll: int = 2
    lambda_transform: float = 1.0
    lambda_feature: float = 1.0
    seed: int = 0
    max_rot_deg: float = 45.0
    max_trans: float = 0.8
    widths: tuple = (3, 64, 128, 1024)
    n_pairs: int = 500
    n_points: int = 1000
    kinds: tuple = PRIMITIVES
    stretch: tuple = (0.4, 1.0)
    bn_momentum: float = 0.9
    # shift each cloud to its centroid (translation initialisation, as the solver's ``center``)
    center: bool = True

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.kinds = tuple(self.kinds)
        self.stretch = tuple(self.stretch)
        for name in ("epochs", "batch_size", "unroll", "n_pairs", "n_points"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError("must be a positive integer", field=name)
        for name in ("lr", "max_trans", "max_rot_deg"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError("must be non-negative", field=name)
        for name in ("weight_decay", "lambda_transform", "lambda_feature"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError("must be non-negative", field=name)
        if self.decay_mode not in ("decoupled", "lr"):
            raise ConfigurationError("must be 'decoupled' or 'lr'", field="decay_mode")
        if not 0 <= self.bn_momentum < 1:
            raise ConfigurationError("must lie in [0, 1)", field="bn_momentum")
        bad = [k for k in self.kinds if k not in PRIMITIVES]
        if bad or not self.kinds:
            raise ConfigurationError(f"unknown primitive kinds {bad}", field="kinds")
        if len(self.stretch) != 2 or not 0 < self.stretch[0] <= self.stretch[1]:
            raise ConfigurationError("must be (low, high) with 0 < low <= high", field="stretch")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown keys {unknown}", field="train")
        kw = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            val = data[f.name]
            default = f.default
            try:
                if isinstance(default, bool):
                    kw[f.name] = bool(val)
                elif isinstance(default, int):
                    if isinstance(val, bool) or float(val) != int(val):
                        raise ValueError
                    kw[f.name] = int(val)
                elif isinstance(default, float):
                    kw[f.name] = float(val)
                elif isinstance(default, tuple):
                    kw[f.name] = tuple(val)
                else:
                    kw[f.name] = val
            except (TypeError, ValueError):
                raise ConfigurationError(f"bad value {val!r}", field=f"train.{f.name}") from None
        try:
            return cls(**kw)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc).split(": ", 1)[-1], field=f"train.{exc.field}") from None


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {f"{k[0]}.{k[1]}": v.tolist() for k, v in self.m.items()},
            "v": {f"{k[0]}.{k[1]}": v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        def keyed(src):
            out = {}
            for k, v in src.items():
                layer, name = k.split(".", 1)
                out[(int(layer), name)] = np.array(v, dtype=float)
            return out

        return cls(keyed(d["m"]), keyed(d["v"]), int(d["step"]), d["beta1"], d["beta2"], d["eps"])


def adam_step(net, grads, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update with decoupled weight decay, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, name, param in net.parameters():
        key = (i, name)
        g = grads[i][name]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        setattr(net.layers[i], name, param - update - lr * weight_decay * param)
    net.touch()


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def loss_transform(est, gt) -> float:
    """``||est gt^-1 - I||_F^2``; zero iff the two transforms agree."""
    M = se3.compose(est, se3.inverse(gt)) - np.eye(4)
    return float(np.sum(M * M))


def loss_feature(net, est, P_T, P_S) -> float:
    """``||phi(est^-1 . P_T) - phi(P_S)||^2``."""
    warped = se3.transform_points(se3.inverse(est), np.asarray(getattr(P_T, "points", P_T)))
    d = featnet.global_feature(net, warped) - featnet.global_feature(net, getattr(P_S, "points", P_S))
    return float(d @ d)


# --------------------------------------------------------------------------
# unrolled forward / reverse pass for one pair
# --------------------------------------------------------------------------


def _exp_twist_vjp(dx, upstream):
    """Gradient w.r.t. ``dx`` of ``<upstream, exp(-hat(dx))>``."""
    A = -se3.hat(dx)
    out = np.empty(6)
    for k in range(6):
        dE = expm_frechet(A, -_GENERATORS[k], compute_expm=False)
        out[k] = np.sum(upstream * dE)
    return out


def _accumulate(total, grads, scale=1.0):
    for l, g in enumerate(grads):
        for name, val in g.items():
            if name in total[l]:
                total[l][name] += scale * val
            else:
                total[l][name] = scale * val


def _zero_grads(net):
    return [{name: np.zeros_like(a) for name, a in layer.params().items()} for layer in net.layers]


def _points_to_warp_grad(d_points, P):
    """Gradient w.r.t. the 4x4 warp ``g`` of a loss depending on ``g . P``."""
    G = np.zeros((4, 4))
    G[:3, :3] = d_points.T @ P
    G[:3, 3] = d_points.sum(axis=0)
    return G


def center_pair(pair: PairSpec) -> PairSpec:
    """Both clouds moved to their centroids, ground truth adjusted to match."""
    cS, cT = pair.source.centroid(), pair.template.centroid()
    gt = se3.from_rt(np.eye(3), -cT) @ pair.gt @ se3.from_rt(np.eye(3), cS)
    return PairSpec(pair.source.with_points(pair.source.points - cS), pair.template.with_points(pair.template.points - cT), gt)


def unrolled_pair(net, pair: PairSpec, pinv, unroll: int, lam_g: float = 1.0, lam_phi: float = 1.0, need_grad=True):
    """Losses (and parameter gradients) of ``unroll`` IC iterations on one pair.

    ``pinv`` is treated as a constant. Returns ``(loss_g, loss_phi, est, grads)``.
    """
    P_T, P_S = pair.template.points, pair.source.points
    f_S, acts_S = featnet.forward(net, P_S)
    g = [np.eye(4)]
    dxs, acts_list = [], []
    for _ in range(unroll):
        f_i, acts_i = featnet.forward(net, se3.transform_points(g[-1], P_T))
        dx = pinv @ (f_S - f_i)
        dxs.append(dx)
        acts_list.append(acts_i)
        g.append(g[-1] @ se3.exp_twist(-dx))
    est = se3.inverse(g[-1])
    M = est @ se3.inverse(pair.gt) - np.eye(4)
    loss_g = float(np.sum(M * M))
    f_end, acts_end = featnet.forward(net, se3.transform_points(g[-1], P_T))
    diff = f_end - f_S
    loss_phi = float(diff @ diff)
    if not (math.isfinite(loss_g) and math.isfinite(loss_phi)):
        raise NonFiniteError(f"non-finite loss on pair {pair.source.id}")
    if not need_grad:
        return loss_g, loss_phi, est, None

    grads = _zero_grads(net)
    # rigid-transformation loss through est = g^-1
    d_est = 2.0 * lam_g * M @ se3.inverse(pair.gt).T
    est_T = est.T
    dg = -est_T @ d_est @ est_T
    # feature loss at the final warp
    u = 2.0 * lam_phi * diff
    pg, d_points = featnet.backward(net, acts_end, u)
    _accumulate(grads, pg)
    dg += _points_to_warp_grad(d_points, P_T)
    df_S = -u
    for i in range(unroll - 1, -1, -1):
        E = g[i].T @ dg  # dL/dE_i
        dg = dg @ se3.exp_twist(-dxs[i]).T
        d_dx = _exp_twist_vjp(dxs[i], E)
        d_r = pinv.T @ d_dx
        df_S += d_r
        pg, d_points = featnet.backward(net, acts_list[i], -d_r)
        _accumulate(grads, pg)
        if i > 0:
            dg += _points_to_warp_grad(d_points, P_T)
    pg, _ = featnet.backward(net, acts_S, df_S)
    _accumulate(grads, pg)
    return loss_g, loss_phi, est, grads


# --------------------------------------------------------------------------
# data and epochs
# --------------------------------------------------------------------------


def stretch_cloud(cloud, rng, low=0.4, high=1.0):
    """Random anisotropic scaling in a random frame; breaks continuous symmetries."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = se3.exp_twist(np.concatenate([axis * rng.uniform(0, math.pi), np.zeros(3)]))[:3, :3]
    scale = rng.uniform(low, high, size=3)
    return cloud.with_points(cloud.points @ R.T * scale)


def build_dataset(
    n_pairs: int,
    n_points: int = 1000,
    seed: int = 0,
    kinds=PRIMITIVES,
    max_rot_deg: float = 45.0,
    max_trans: float = 0.8,
    stretch=(0.4, 1.0),
) -> list:
    """Random primitives, normalized to the unit box, each paired with a random perturbation."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        kind = kinds[rng.integers(len(kinds))]
        cloud = generate_primitive(kind, n_points, seed=int(rng.integers(2**31)))
        if stretch is not None:
            cloud = stretch_cloud(cloud, rng, *stretch)
        cloud = normalize_unit_box(cloud)
        pairs.append(make_pair(cloud, sample_perturbation(rng, max_rot_deg, max_trans)))
    return pairs


@dataclass
class EpochStats:
    epoch: int
    loss_transform: float
    loss_feature: float
    success_ratio: float
    seconds: float


def train_epoch(net, dataset, cfg: TrainConfig, adam: AdamState, rng, epoch: int = 0) -> EpochStats:
    """One pass over ``dataset`` in shuffled mini-batches; updates ``net`` in place."""
    if not dataset:
        raise ConfigurationError("dataset is empty", field="dataset")
    if cfg.center:
        dataset = [center_pair(p) for p in dataset]
    t0 = time.perf_counter()
    order = rng.permutation(len(dataset))
    lr = cfg.lr
    wd = cfg.weight_decay
    if cfg.decay_mode == "lr":
        lr = cfg.lr / (1.0 + cfg.weight_decay * epoch)
        wd = 0.0
    totals = np.zeros(2)
    successes = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [dataset[j] for j in order[start : start + cfg.batch_size]]
        stats = featnet.batch_statistics(net, [p.template for p in batch] + [p.source for p in batch])
        step_net = featnet.with_statistics(net, stats)
        grads = _zero_grads(step_net)
        for pair in batch:
            bundle = jacobian.analytical_jacobian(step_net, pair.template.points, strict=False)
            lg, lf, est, g = unrolled_pair(
                step_net, pair, bundle.pinv, cfg.unroll, cfg.lambda_transform, cfg.lambda_feature
            )
            _accumulate(grads, g, 1.0 / len(batch))
            totals += (lg, lf)
            err = metrics.pair_error(est, pair.gt)
            successes += int(metrics.is_success(err))
        if lr > 0 or wd > 0:
            adam_step(net, grads, adam, lr, wd)
        else:
            adam.step += 1
        featnet.update_running_statistics(net, stats, cfg.bn_momentum)
    n = len(dataset)
    return EpochStats(epoch, totals[0] / n, totals[1] / n, successes / n, time.perf_counter() - t0)


def train(
    cfg: TrainConfig,
    dataset=None,
    net=None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    log_path=None,
    time_budget_s: float | None = None,
):
    """Train for ``cfg.epochs`` epochs (from ``start_epoch``); returns ``(net, adam, history)``.

    With ``time_budget_s`` training ends early once another epoch would not fit.
    """
    if dataset is None:
        dataset = build_dataset(
            cfg.n_pairs, cfg.n_points, cfg.seed, cfg.kinds, cfg.max_rot_deg, cfg.max_trans, cfg.stretch
        )
    net = net if net is not None else featnet.init_net(cfg.widths, seed=cfg.seed, mode="train")
    net.mode = "train"
    adam = adam or AdamState()
    rng = np.random.default_rng([cfg.seed, start_epoch])
    history = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        stats = train_epoch(net, dataset, cfg, adam, rng, epoch)
        history.append(stats)
        log.info(
            "epoch %d  L_G %.5f  L_phi %.5f  success %.3f  (%.1fs)",
            epoch, stats.loss_transform, stats.loss_feature, stats.success_ratio, stats.seconds,
        )
        if log_path is not None:
            append_log(log_path, stats)
        # stop when another epoch of the same length would not fit in the budget
        if time_budget_s is not None and time.perf_counter() - t0 + 1.1 * stats.seconds > time_budget_s:
            log.warning("time budget reached after epoch %d", epoch)
            break
    return net, adam, history


LOG_HEADER = ("epoch", "L_G", "L_phi", "success_ratio", "seconds")


def append_log(path, stats: EpochStats) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_HEADER)
        w.writerow(
            [stats.epoch, f"{stats.loss_transform:.9g}", f"{stats.loss_feature:.9g}",
             f"{stats.success_ratio:.6f}", f"{stats.seconds:.3f}"]
        )


def save_checkpoint(prefix, net, adam: AdamState, epoch: int, cfg: TrainConfig, rng_seed=None) -> tuple:
    """Write ``<prefix>.weights.json`` and ``<prefix>.state.json``."""
    weights = f"{prefix}.weights.json"
    state = f"{prefix}.state.json"
    featnet.save_weights(net, weights)
    with open(state, "w") as fh:
        json.dump(
            {"epoch": epoch, "adam": adam.to_dict(), "config": _cfg_dict(cfg), "rng_seed": rng_seed},
            fh,
        )
    return weights, state


def load_checkpoint(prefix):
    net = featnet.load_weights(f"{prefix}.weights.json")
    with open(f"{prefix}.state.json") as fh:
        state = json.load(fh)
    return net, AdamState.from_dict(state["adam"]), int(state["epoch"])


def _cfg_dict(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def inference_net(net):
    """The folded, inference-mode net used for registration."""
    return featnet.fold_bn(net)


# desk-scale model: 3-32-64-256 net, 500 primitive pairs, at most 30 minutes on one CPU
DESK_CONFIG = dict(widths=(3, 32, 64, 256), n_pairs=500, n_points=500, epochs=40, lambda_feature=0.0, seed=0)
DESK_TIME_BUDGET_S = 1800.0


def _code_digest() -> str:
    """Hash of the sources that determine the trained weights, so stale caches are never reused."""
    h = hashlib.sha256()
    here = os.path.dirname(os.path.abspath(__file__))
    for name in ("se3.py", "cloud.py", "featnet.py", "jacobian.py", "trainer.py"):
        with open(os.path.join(here, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def cached_model(cfg: TrainConfig, cache_dir, time_budget_s: float | None = None):
    """Train (or load a cached run of) ``cfg``; returns ``(folded_net, meta)``.

    ``meta`` records the config, wall-clock training time and epochs run. The
    cache key covers the config and the training code.
    """
    blob = json.dumps({"cfg": _cfg_dict(cfg), "budget": time_budget_s, "code": _code_digest()}, sort_keys=True)
    key = hashlib.sha256(blob.encode()).hexdigest()[:16]
    os.makedirs(cache_dir, exist_ok=True)
    weights = os.path.join(cache_dir, f"model-{key}.json")
    meta_path = os.path.join(cache_dir, f"model-{key}.meta.json")
    if os.path.exists(weights) and os.path.exists(meta_path):
        with open(meta_path) as fh:
            return featnet.load_weights(weights), json.load(fh)
    t0 = time.perf_counter()
    net, _, history = train(cfg, log_path=os.path.join(cache_dir, f"model-{key}.log.csv"), time_budget_s=time_budget_s)
    meta = {
        "config": _cfg_dict(cfg),
        "train_seconds": time.perf_counter() - t0,
        "epochs_run": len(history),
        "final_train_success": history[-1].success_ratio,
    }
    folded = inference_net(net)
    featnet.save_weights(folded, weights)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1)
    return folded, meta


def desk_model(cache_dir):
    return cached_model(TrainConfig(**DESK_CONFIG), cache_dir, DESK_TIME_BUDGET_S)
