"""Per-point MLP embedding with max pooling and hand-written derivatives.

Each layer computes ``z_l = relu(bn_l(A_l z_{l-1} + b_l))`` independently per
point; the global feature is the coordinate-wise max over points. Two kinds
of derivative are provided: with respect to the input coordinates (used to
build registration Jacobians) and with respect to the parameters (used for
training).

Conventions: the ReLU derivative at exactly zero is 0, and max-pool ties go
to the lowest point index.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .cloud import as_points
from .errors import ConfigurationError, ContractViolationError, ModeError

BN_EPS = 1e-5
FORMAT_VERSION = 1
DEFAULT_WIDTHS = (3, 64, 128, 1024)
PARAM_NAMES = ("A", "b", "bn_scale", "bn_shift")


@dataclass
class Layer:
    A: np.ndarray
    b: np.ndarray
    # None once batch-norm has been folded into (A, b)
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None

    def bn_gain(self) -> np.ndarray:
        return self.bn_scale / np.sqrt(self.bn_var + BN_EPS)

    def params(self) -> dict:
        names = PARAM_NAMES if self.has_bn else PARAM_NAMES[:2]
        return {n: getattr(self, n) for n in names}


@dataclass
class FeatureNet:
    layers: list
    mode: str = "inference"
    # bumped on every parameter/statistics change so stale activations are caught
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.mode not in ("train", "inference"):
            raise ConfigurationError(f"unknown mode {self.mode!r}", field="mode")
        if not self.layers:
            raise ConfigurationError("network needs at least one layer", field="layers")
        prev = 3
        for i, layer in enumerate(self.layers):
            A = np.asarray(layer.A, dtype=float)
            if A.ndim != 2 or A.shape[1] != prev:
                raise ConfigurationError(
                    f"expects input width {prev}, got A of shape {A.shape}", field=f"layers[{i}].A"
                )
            out = A.shape[0]
            layer.A = A
            layer.b = np.asarray(layer.b, dtype=float).reshape(out)
            if layer.has_bn:
                for name in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
                    val = np.asarray(getattr(layer, name), dtype=float).reshape(-1)
                    if val.shape != (out,):
                        raise ConfigurationError(
                            f"expected {out} entries, got {val.shape[0]}", field=f"layers[{i}].{name}"
                        )
                    setattr(layer, name, val)
                if np.any(layer.bn_var < BN_EPS):
                    raise ConfigurationError(f"variance below {BN_EPS}", field=f"layers[{i}].bn_var")
            prev = out

    @property
    def widths(self) -> tuple:
        return (3,) + tuple(layer.A.shape[0] for layer in self.layers)

    @property
    def K(self) -> int:
        return self.layers[-1].A.shape[0]

    @property
    def folded(self) -> bool:
        return not any(layer.has_bn for layer in self.layers)

    def copy(self) -> "FeatureNet":
        return copy.deepcopy(self)

    def touch(self):
        self.version += 1

    def parameters(self) -> list:
        """Flat list of ``(layer_index, name, array)`` for every trainable array."""
        return [(i, n, a) for i, layer in enumerate(self.layers) for n, a in layer.params().items()]

    def n_parameters(self) -> int:
        return sum(a.size for _, _, a in self.parameters())


def init_net(widths=DEFAULT_WIDTHS, seed: int = 0, mode: str = "inference") -> FeatureNet:
    """Kaiming-uniform (fan-in) weights, zero biases, identity batch-norm."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or widths[0] != 3 or min(widths) < 1:
        raise ConfigurationError(f"widths must start at 3 and be positive, got {widths}", field="widths")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(
            Layer(
                A=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                b=np.zeros(fan_out),
                bn_scale=np.ones(fan_out),
                bn_shift=np.zeros(fan_out),
                bn_mean=np.zeros(fan_out),
                bn_var=np.ones(fan_out),
            )
        )
    return FeatureNet(layers, mode=mode)


@dataclass
class Activations:
    """Per-point intermediate values of one forward pass.

    ``z[0]`` is the input, ``z[l]`` the output of layer ``l``; ``pre[l-1]`` is
    the affine output before normalization and ``masks[l-1]`` the ReLU
    pattern. ``argmax[k]`` is the point that wins feature ``k``.
    """

    z: list
    pre: list
    masks: list
    argmax: np.ndarray
    stats: list
    net_version: int
    points: np.ndarray


def batch_statistics(net: FeatureNet, clouds) -> list:
    """Per-layer (mean, var) of the pre-normalization activations over all points.

    Statistics of layer ``l`` are taken after layers ``< l`` were normalized
    with their own batch statistics, as in a training-mode pass.
    """
    Z = np.concatenate([as_points(c) for c in clouds])
    stats = []
    for layer in net.layers:
        a = Z @ layer.A.T + layer.b
        if layer.has_bn:
            mean, var = a.mean(axis=0), np.maximum(a.var(axis=0), BN_EPS)
            stats.append((mean, var))
            h = layer.bn_scale * (a - mean) / np.sqrt(var + BN_EPS) + layer.bn_shift
        else:
            stats.append(None)
            h = a
        Z = np.maximum(h, 0.0)
    return stats


def with_statistics(net: FeatureNet, stats) -> FeatureNet:
    """Inference-mode copy whose batch-norm uses ``stats`` as fixed statistics."""
    out = net.copy()
    for layer, st in zip(out.layers, stats):
        if st is not None and layer.has_bn:
            layer.bn_mean, layer.bn_var = np.array(st[0]), np.array(st[1])
    out.mode = "inference"
    out.touch()
    return out


def update_running_statistics(net: FeatureNet, stats, momentum: float = 0.9) -> None:
    """``running <- momentum * running + (1 - momentum) * batch``."""
    for layer, st in zip(net.layers, stats):
        if st is not None and layer.has_bn:
            layer.bn_mean = momentum * layer.bn_mean + (1 - momentum) * st[0]
            layer.bn_var = momentum * layer.bn_var + (1 - momentum) * st[1]
    net.touch()


def forward(net: FeatureNet, cloud, dtype=np.float64):
    """Global feature (K,) and the per-point activations that produced it.

    In train mode batch-norm normalizes with the statistics of this cloud.
    ``dtype`` selects the arithmetic precision of the whole pass.
    """
    P = np.asarray(as_points(cloud), dtype=dtype)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] < 1:
        raise ConfigurationError(f"expected a non-empty (N, 3) cloud, got {P.shape}", field="cloud")
    stats = batch_statistics(net, [P]) if net.mode == "train" else [None] * len(net.layers)
    Z = P
    zs, pres, masks = [Z], [], []
    for layer, st in zip(net.layers, stats):
        A, b = layer.A.astype(dtype, copy=False), layer.b.astype(dtype, copy=False)
        a = Z @ A.T + b
        if layer.has_bn:
            mean, var = st if st is not None else (layer.bn_mean, layer.bn_var)
            gain = (layer.bn_scale / np.sqrt(var + BN_EPS)).astype(dtype)
            h = gain * (a - mean.astype(dtype)) + layer.bn_shift.astype(dtype)
        else:
            h = a
        mask = h > 0
        Z = np.where(mask, h, dtype(0.0))
        pres.append(a)
        masks.append(mask)
        zs.append(Z)
    argmax = np.argmax(Z, axis=0)
    feature = Z[argmax, np.arange(Z.shape[1])]
    acts = Activations(zs, pres, masks, argmax, stats, net.version, np.array(P))
    return feature, acts


def global_feature(net: FeatureNet, cloud, dtype=np.float64) -> np.ndarray:
    return forward(net, cloud, dtype)[0]


def _layer_gain(layer: Layer) -> np.ndarray | None:
    return layer.bn_gain() if layer.has_bn else None


def _require_inference(net: FeatureNet):
    if net.mode != "inference":
        raise ModeError("input gradients need an inference-mode net (batch statistics couple points)")


def _partial_products(net: FeatureNet, acts: Activations, rows, upto: int) -> np.ndarray:
    """d z_upto / d z_0 for points ``rows``, shape (len(rows), width_upto, 3)."""
    M = None
    for l in range(upto):
        layer = net.layers[l]
        gain = _layer_gain(layer)
        scale = acts.masks[l][rows].astype(float)
        if gain is not None:
            scale = scale * gain
        M = layer.A[None] if M is None else np.einsum("oh,nhc->noc", layer.A, M)
        M = scale[:, :, None] * M
    return M


def input_gradient(net: FeatureNet, cloud, acts: Activations | None = None) -> np.ndarray:
    """Per-point Jacobian of ``z_L`` w.r.t. that point's coordinates, shape (N, 3, K).

    Cross-point blocks are zero because the network acts on points
    independently.
    """
    _require_inference(net)
    if acts is None:
        _, acts = forward(net, cloud)
    rows = np.arange(acts.z[0].shape[0])
    return np.transpose(_partial_products(net, acts, rows, len(net.layers)), (0, 2, 1))


def pooled_feature_gradient(net: FeatureNet, acts: Activations) -> np.ndarray:
    """Row ``k`` = d z_L[argmax_k, k] / d p_{argmax_k}, shape (K, 3).

    Only the winning point of each feature is differentiated, and only the
    one row it wins is formed in the last layer.
    """
    _require_inference(net)
    L = len(net.layers)
    winners, inverse = np.unique(acts.argmax, return_inverse=True)
    last = net.layers[-1]
    k = np.arange(net.K)
    if L == 1:
        inner = np.broadcast_to(np.eye(3), (len(winners), 3, 3))
    else:
        inner = _partial_products(net, acts, winners, L - 1)
    rows = np.einsum("kh,khc->kc", last.A, inner[inverse])
    scale = acts.masks[-1][acts.argmax, k].astype(float)
    gain = _layer_gain(last)
    if gain is not None:
        scale = scale * gain
    return scale[:, None] * rows


def backward(net: FeatureNet, acts: Activations, upstream):
    """Reverse pass of ``<upstream, global feature>``.

    Returns ``(grads, d_points)``: ``grads[l]`` maps parameter names of layer
    ``l`` to arrays shaped like the parameters, and ``d_points`` is the (N, 3)
    gradient w.r.t. the input coordinates. Batch-norm statistics are treated
    as constants.
    """
    if acts.net_version != net.version:
        raise ContractViolationError("activations were computed with different parameters")
    u = np.asarray(upstream, dtype=float).reshape(-1)
    if u.shape != (net.K,):
        raise ConfigurationError(f"upstream must have {net.K} entries", field="upstream")
    N = acts.z[0].shape[0]
    # only max-pool winners receive gradient; work on those rows alone
    rows, inverse = np.unique(acts.argmax, return_inverse=True)
    dZ = np.zeros((len(rows), net.K))
    np.add.at(dZ, (inverse, np.arange(net.K)), u)
    grads = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        dh = dZ * acts.masks[l][rows]
        g = {}
        if layer.has_bn:
            mean, var = acts.stats[l] if acts.stats[l] is not None else (layer.bn_mean, layer.bn_var)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (acts.pre[l][rows] - mean) * inv_std
            g["bn_scale"] = (dh * xhat).sum(axis=0)
            g["bn_shift"] = dh.sum(axis=0)
            da = dh * (layer.bn_scale * inv_std)
        else:
            da = dh
        g["A"] = da.T @ acts.z[l][rows]
        g["b"] = da.sum(axis=0)
        grads[l] = g
        dZ = da @ layer.A
    d_points = np.zeros((N, 3))
    d_points[rows] = dZ
    return grads, d_points


def param_gradient(net: FeatureNet, cloud, upstream, acts: Activations | None = None) -> list:
    """Gradients of ``<upstream, global feature>`` w.r.t. every layer parameter."""
    if acts is None:
        _, acts = forward(net, cloud)
    elif cloud is not None and not np.array_equal(np.asarray(as_points(cloud)), acts.points):
        raise ContractViolationError("activations belong to a different cloud")
    return backward(net, acts, upstream)[0]


def fold_bn(net: FeatureNet) -> FeatureNet:
    """Absorb batch-norm (running statistics) into the affine maps."""
    out = net.copy()
    for layer in out.layers:
        if not layer.has_bn:
            continue
        gain = layer.bn_gain()
        layer.A = gain[:, None] * layer.A
        layer.b = gain * (layer.b - layer.bn_mean) + layer.bn_shift
        layer.bn_scale = layer.bn_shift = layer.bn_mean = layer.bn_var = None
    out.mode = "inference"
    out.touch()
    return out


# --------------------------------------------------------------------------
# weight files
# --------------------------------------------------------------------------


def _opt_list(a):
    return None if a is None else np.asarray(a).tolist()


def to_dict(net: FeatureNet) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "widths": list(net.widths),
        "K": net.K,
        "mode": net.mode,
        "folded": net.folded,
        "layers": [
            {
                "A": layer.A.tolist(),
                "b": layer.b.tolist(),
                "bn_scale": _opt_list(layer.bn_scale),
                "bn_shift": _opt_list(layer.bn_shift),
                "bn_mean": _opt_list(layer.bn_mean),
                "bn_var": _opt_list(layer.bn_var),
            }
            for layer in net.layers
        ],
    }


def from_dict(data: dict) -> FeatureNet:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported weight format_version {version!r}", field="format_version")
    try:
        layers = [
            Layer(
                A=np.array(d["A"], dtype=float),
                b=np.array(d["b"], dtype=float),
                bn_scale=None if d.get("bn_scale") is None else np.array(d["bn_scale"], dtype=float),
                bn_shift=None if d.get("bn_shift") is None else np.array(d["bn_shift"], dtype=float),
                bn_mean=None if d.get("bn_mean") is None else np.array(d["bn_mean"], dtype=float),
                bn_var=None if d.get("bn_var") is None else np.array(d["bn_var"], dtype=float),
            )
            for d in data["layers"]
        ]
    except KeyError as exc:
        raise ConfigurationError(f"missing key {exc.args[0]!r}", field="layers") from None
    net = FeatureNet(layers, mode=data.get("mode", "inference"))
    if "widths" in data and tuple(data["widths"]) != net.widths:
        raise ConfigurationError(f"declared widths {data['widths']} do not match layers", field="widths")
    if "K" in data and int(data["K"]) != net.K:
        raise ConfigurationError(f"declared K {data['K']} does not match layers", field="K")
    return net


def save_weights(net: FeatureNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(net), fh)


def load_weights(path) -> FeatureNet:
    with open(path) as fh:
        return from_dict(json.load(fh))
