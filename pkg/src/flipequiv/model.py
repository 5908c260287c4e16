"""Sequential ReLU networks: definition, forward/backward, training, metrics, checkpoints."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from flipequiv import tensor as T

log = logging.getLogger(__name__)

CKPT_MAGIC = b"EQNT"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# Layer specifications
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    cin: int
    cout: int
    k: int
    stride: int = 1
    pad: int = 0
    has_bias: bool = True
    kind = "conv2d"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int
    pad: int = 0
    kind = "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "gap"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Linear:
    din: int
    dout: int
    kind = "linear"


@dataclass(frozen=True)
class BatchNorm2d:
    c: int
    eps: float = 1e-5
    momentum: float = 0.1
    kind = "batchnorm2d"


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool, GlobalAvgPool, Flatten, Linear, BatchNorm2d)}


def layer_to_dict(layer) -> dict:
    return {"type": layer.kind, **asdict(layer)}


def layer_from_dict(d: dict):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("type")]
    except KeyError as exc:
        raise ValueError(f"unknown layer type in {d}") from exc
    return cls(**d)


def output_shapes(layers: Sequence, input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis); raises on mismatch."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        where = f"layer {i} ({layer.kind})"
        if isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.cin:
                raise T.ShapeError(f"{where}: expects {layer.cin} input channels, gets shape {shape}")
            shape = (
                layer.cout,
                T.conv_output_size(shape[1], layer.k, layer.stride, layer.pad),
                T.conv_output_size(shape[2], layer.k, layer.stride, layer.pad),
            )
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise T.ShapeError(f"{where}: needs a spatial input, gets shape {shape}")
            shape = (
                shape[0],
                T.conv_output_size(shape[1], layer.k, layer.stride, layer.pad),
                T.conv_output_size(shape[2], layer.k, layer.stride, layer.pad),
            )
        elif isinstance(layer, BatchNorm2d):
            if len(shape) != 3 or shape[0] != layer.c:
                raise T.ShapeError(f"{where}: expects {layer.c} channels, gets shape {shape}")
        elif isinstance(layer, GlobalAvgPool):
            if len(shape) != 3:
                raise T.ShapeError(f"{where}: needs a spatial input, gets shape {shape}")
            shape = (shape[0],)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Linear):
            if shape != (layer.din,):
                raise T.ShapeError(f"{where}: expects {layer.din} features, gets shape {shape}")
            shape = (layer.dout,)
        elif not isinstance(layer, ReLU):
            raise TypeError(f"unsupported layer {layer!r}")
        shapes.append(shape)
    return shapes


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


@dataclass
class Network:
    layers: list
    input_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    constraint: Any = None  # flipequiv.symmetry.GcnnConstraint, re-applied after SGD steps
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = output_shapes(self.layers, self.input_shape)
        for name, shape in param_shapes(self.layers).items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise T.ShapeError(f"parameter {name}: expected {shape}, got {self.params[name].shape}")
        for name, value in self.params.items():
            if name.endswith("running_var") and np.any(value <= 0):
                raise ValueError(f"{name} must be positive")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def copy(self) -> "Network":
        return Network(
            self.layers,
            self.input_shape,
            {k: v.copy() for k, v in self.params.items()},
            constraint=self.constraint,
            meta=copy.deepcopy(self.meta),
        )

    def relu_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ReLU)]

    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm2d) for layer in self.layers)

    def same_architecture(self, other: "Network") -> bool:
        return self.layers == other.layers and self.input_shape == other.input_shape


def param_shapes(layers: Sequence) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            shapes[f"{i}.weight"] = (layer.cout, layer.cin, layer.k, layer.k)
            if layer.has_bias:
                shapes[f"{i}.bias"] = (layer.cout,)
        elif isinstance(layer, Linear):
            shapes[f"{i}.weight"] = (layer.dout, layer.din)
            shapes[f"{i}.bias"] = (layer.dout,)
        elif isinstance(layer, BatchNorm2d):
            for name in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{i}.{name}"] = (layer.c,)
    return shapes


BUFFER_SUFFIXES = ("running_mean", "running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def init_network(layers: Sequence, input_shape, rng: np.random.Generator) -> Network:
    """He-normal weights, zero biases, identity batch norm."""
    params = {}
    for name, shape in param_shapes(layers).items():
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return Network(list(layers), tuple(input_shape), params)


def mini_vgg(
    in_channels: int = 1,
    width: int = 16,
    num_classes: int = 4,
    stages: int = 3,
    batchnorm: bool = False,
) -> list:
    """Conv(k3,p1)-ReLU-MaxPool(k3,s2,p1) stages, global average pool, linear head.

    With a k3/s2/p1 pool an odd input width stays odd at every stage
    (33 -> 17 -> 9 -> 5), which keeps the net exactly flip-equivariant.
    """
    layers: list = []
    cin = in_channels
    for _ in range(stages):
        layers.append(Conv2d(cin, width, 3, 1, 1))
        if batchnorm:
            layers.append(BatchNorm2d(width))
        layers += [ReLU(), MaxPool(3, 2, 1)]
        cin = width
    layers += [GlobalAvgPool(), Linear(width, num_classes)]
    return layers


@dataclass(frozen=True)
class Interface:
    """A permutable channel axis: outputs of ``producer`` read by ``consumer``."""

    producer: int
    channels: int
    bn: tuple[int, ...] = ()
    relu: int | None = None
    consumer: int | None = None
    flatten: bool = False  # consumer sees channels through Flatten (blocks of H*W)


def channel_interfaces(layers: Sequence) -> list[Interface]:
    """Hidden channel axes in order; the network output is not an interface."""
    out = []
    for i, layer in enumerate(layers):
        if not isinstance(layer, (Conv2d, Linear)):
            continue
        bn, relu, flatten = [], None, False
        for j in range(i + 1, len(layers)):
            nxt = layers[j]
            if isinstance(nxt, (Conv2d, Linear)):
                channels = layer.cout if isinstance(layer, Conv2d) else layer.dout
                out.append(Interface(i, channels, tuple(bn), relu, j, flatten))
                break
            if isinstance(nxt, BatchNorm2d):
                bn.append(j)
            elif isinstance(nxt, ReLU) and relu is None:
                relu = j
            elif isinstance(nxt, Flatten):
                flatten = True
    return out


def flip_equivariance_violations(layers: Sequence, input_shape) -> list[str]:
    """Spatial layers whose windows do not cover the padded width symmetrically.

    A strided window sweep is mirror symmetric iff ``(W + 2*pad - k)`` is a
    multiple of the stride; otherwise the right edge is dropped.
    """
    problems = []
    shape = tuple(input_shape)
    for i, (layer, out_shape) in enumerate(zip(layers, output_shapes(layers, input_shape))):
        if isinstance(layer, (Conv2d, MaxPool)):
            w = shape[2]
            if (w + 2 * layer.pad - layer.k) % layer.stride:
                problems.append(f"layer {i} ({layer.kind}): padded width {w + 2 * layer.pad} leaves an edge uncovered")
        shape = out_shape
    return problems


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def bn_forward(x, gamma, beta, running_mean, running_var, eps: float, train: bool):
    """Batch norm over (N, H, W); returns ``(y, cache)``.

    In train mode the batch statistics (biased variance) normalise.
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, train, mean, var)


def bn_backward(grad_out, gamma, cache):
    xhat, inv_std, train, _, _ = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma[None, :, None, None]
    if train:
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        gx = (
            g - g.sum(axis=(0, 2, 3))[None, :, None, None] / m
            - xhat * (g * xhat).sum(axis=(0, 2, 3))[None, :, None, None] / m
        ) * inv_std[None, :, None, None]
    else:
        gx = g * inv_std[None, :, None, None]
    return gx, grad_gamma, grad_beta


def _check_batch(net: Network, x) -> np.ndarray:
    x = T.as_tensor(x)
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise T.ShapeError(f"batch shape {x.shape} does not match network input {net.input_shape}")
    return x


def _run(net: Network, x, train: bool, capture: Iterable[int] = (), keep_cache: bool = False, bn_update=False):
    x = _check_batch(net, x)
    capture = set(capture)
    captured: dict[int, np.ndarray] = {}
    caches = []
    p = net.params
    for i, layer in enumerate(net.layers):
        inp = x
        cache = None
        if isinstance(layer, Conv2d):
            bias = p[f"{i}.bias"] if layer.has_bias else np.zeros(layer.cout)
            x, cols = T.conv2d_forward(x, p[f"{i}.weight"], bias, layer.stride, layer.pad, return_cols=True)
            cache = cols if keep_cache else None
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x, cache = T.maxpool2d_forward(x, layer.k, layer.stride, layer.pad, return_argmax=True)
        elif isinstance(layer, GlobalAvgPool):
            x = x.mean(axis=(2, 3))
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Linear):
            x = x @ p[f"{i}.weight"].T + p[f"{i}.bias"]
        elif isinstance(layer, BatchNorm2d):
            x, cache = bn_forward(
                x, p[f"{i}.gamma"], p[f"{i}.beta"], p[f"{i}.running_mean"], p[f"{i}.running_var"], layer.eps, train
            )
            if train and bn_update:
                _, _, _, mean, var = cache
                m = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var * m / max(m - 1, 1)
                p[f"{i}.running_mean"] = (1 - layer.momentum) * p[f"{i}.running_mean"] + layer.momentum * mean
                p[f"{i}.running_var"] = (1 - layer.momentum) * p[f"{i}.running_var"] + layer.momentum * unbiased
        if keep_cache:
            caches.append((inp, cache))
        if i in capture:
            captured[i] = x
    return x, captured, caches


def forward(net: Network, batch, mode: str = "eval", capture: Iterable[int] = ()):
    """Logits ``[N, classes]`` plus the outputs of the layers listed in ``capture``."""
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, captured, _ = _run(net, batch, mode == "train", capture)
    return logits, captured


def logits_of(net: Network, batch, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits, computed in fixed-size chunks."""
    batch = np.asarray(batch)
    out = [forward(net, batch[s : s + batch_size])[0] for s in range(0, batch.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, net.num_classes))


def backward(net: Network, caches, grad_logits, return_input_grad: bool = False):
    """Parameter gradients (and optionally the input gradient) from ``_run`` caches."""
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    p = net.params
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        inp, cache = caches[i]
        if isinstance(layer, Conv2d):
            g, gw, gb = T.conv2d_backward(inp, p[f"{i}.weight"], g, layer.stride, layer.pad, cols=cache)
            grads[f"{i}.weight"] = gw
            if layer.has_bias:
                grads[f"{i}.bias"] = gb
        elif isinstance(layer, ReLU):
            g = np.where(inp > 0, g, 0.0)
        elif isinstance(layer, MaxPool):
            g = T.maxpool2d_backward(inp, g, layer.k, layer.stride, layer.pad, argmax=cache)
        elif isinstance(layer, GlobalAvgPool):
            g = T.global_avgpool_backward(inp, g)
        elif isinstance(layer, Flatten):
            g = g.reshape(inp.shape)
        elif isinstance(layer, Linear):
            gw, gb = g.T @ inp, g.sum(axis=0)
            g = g @ p[f"{i}.weight"]
            grads[f"{i}.weight"], grads[f"{i}.bias"] = gw, gb
        elif isinstance(layer, BatchNorm2d):
            g, gg, gbeta = bn_backward(g, p[f"{i}.gamma"], cache)
            grads[f"{i}.gamma"], grads[f"{i}.beta"] = gg, gbeta
    return (grads, g) if return_input_grad else grads


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def cross_entropy(logits, labels):
    """Mean negative log-softmax at the label; returns ``(loss, grad_logits)``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def _pair_distance(la, lb):
    diff = la - lb
    return diff, np.sqrt((diff * diff).sum(axis=1))


def invariance_loss(net: Network, batch, mode: str = "eval") -> float:
    """Mean Euclidean distance between the logits of ``x`` and of its mirror image."""
    batch = _check_batch(net, batch)
    la, _ = forward(net, batch, mode)
    lb, _ = forward(net, T.hflip(batch), mode)
    return float(_pair_distance(la, lb)[1].mean())


def objective(net: Network, x, labels, inv_weight: float = 0.0, train: bool = True, bn_update: bool = False):
    """Cross-entropy plus ``inv_weight`` times the invariance loss, with gradients.

    Returns ``(total, ce, inv, grads)``.  When the invariance term is active
    the batch and its mirror image go through the net as one stacked batch.
    """
    x = _check_batch(net, x)
    n = x.shape[0]
    if inv_weight > 0:
        stacked = np.concatenate([x, T.hflip(x)], axis=0)
        logits, _, caches = _run(net, stacked, train, keep_cache=True, bn_update=bn_update)
        ce, g_ce = cross_entropy(logits[:n], labels)
        diff, dist = _pair_distance(logits[:n], logits[n:])
        inv = float(dist.mean())
        safe = np.where(dist > 0, dist, 1.0)
        g_pair = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) * (inv_weight / n)
        grad_logits = np.concatenate([g_ce + g_pair, -g_pair], axis=0)
    else:
        logits, _, caches = _run(net, x, train, keep_cache=True, bn_update=bn_update)
        ce, grad_logits = cross_entropy(logits, labels)
        inv = 0.0
    grads = backward(net, caches, grad_logits)
    return ce + inv_weight * inv, ce, inv, grads


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _images_labels(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, getattr(dataset, "labels", None)
    if isinstance(dataset, tuple):
        return dataset
    return dataset, None


def accuracy(net: Network, dataset, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions (ties resolve to the lowest class)."""
    images, labels = _images_labels(dataset)
    if len(images) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = logits_of(net, images, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def _pairwise_mean(values: np.ndarray) -> float:
    # fixed-order tree reduction so sharded evaluation reproduces the same bits
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0]) / values.size


def invariance_error(net: Network, dataset, sample_count: int = 1024, batch_size: int = 512, return_skipped=False):
    """Mean relative flip-invariance error of the logits over the first samples.

    Per sample: ``|f(x) - f(tx)| / (0.5 |f(x)| + 0.5 |f(tx)|)``.  Samples
    with a zero denominator are skipped; if every sample is skipped the
    result is NaN.
    """
    images, _ = _images_labels(dataset)
    if sample_count > len(images):
        raise ValueError(f"sample_count {sample_count} exceeds dataset size {len(images)}")
    x = np.asarray(images[:sample_count])
    la = logits_of(net, x, batch_size)
    lb = logits_of(net, T.hflip(x), batch_size)
    _, num = _pair_distance(la, lb)
    den = 0.5 * np.linalg.norm(la, axis=1) + 0.5 * np.linalg.norm(lb, axis=1)
    ok = den > 0
    skipped = int((~ok).sum())
    if skipped:
        log.warning("invariance_error: %d of %d samples have all-zero logits and were skipped", skipped, len(x))
    value = _pairwise_mean(num[ok] / den[ok]) if ok.any() else float("nan")
    return (value, skipped) if return_skipped else value


# --------------------------------------------------------------------------
# Batch-norm statistics reset
# --------------------------------------------------------------------------


def bn_reset_stats(net: Network, dataset, batches: int = 16, batch_size: int = 64) -> Network:
    """Recompute every BN layer's running statistics from the first ``batches`` batches.

    The statistics are exact pooled averages over all observations, taken
    in train mode (each batch normalised by its own statistics); gamma and
    beta are left alone.
    """
    if batches < 1:
        raise ValueError("bn_reset_stats needs at least one batch")
    images, _ = _images_labels(dataset)
    out = net.copy()
    bn_ids = [i for i, layer in enumerate(net.layers) if isinstance(layer, BatchNorm2d)]
    if not bn_ids:
        return out
    acc = {i: (0, 0.0, 0.0) for i in bn_ids}  # count, mean, M2 per layer (Chan merge)
    for b in range(batches):
        chunk = np.asarray(images[b * batch_size : (b + 1) * batch_size])
        if len(chunk) == 0:
            break
        _, _, caches = _run(out, chunk, True, keep_cache=True)
        for i in bn_ids:
            inp = caches[i][0]
            m = inp.shape[0] * inp.shape[2] * inp.shape[3]
            mean_b = inp.mean(axis=(0, 2, 3))
            m2_b = ((inp - mean_b[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
            n_a, mean_a, m2_a = acc[i]
            n_ab = n_a + m
            delta = mean_b - mean_a
            acc[i] = (n_ab, mean_a + delta * m / n_ab, m2_a + m2_b + delta * delta * n_a * m / n_ab)
    if acc[bn_ids[0]][0] == 0:
        raise ValueError("bn_reset_stats: dataset is empty")
    for i in bn_ids:
        count, mean, m2 = acc[i]
        out.params[f"{i}.running_mean"] = np.asarray(mean, dtype=np.float64)
        out.params[f"{i}.running_var"] = np.maximum(m2 / count, net.layers[i].eps)
    return out


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hflip_aug_prob: float = 0.5
    inv_loss_weight: float = 0.0
    inv_loss_start_fraction: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.hflip_aug_prob <= 1.0:
            raise ValueError("hflip_aug_prob must lie in [0, 1]")
        if self.inv_loss_weight < 0:
            raise ValueError("inv_loss_weight must be >= 0")
        if not 0.0 <= self.inv_loss_start_fraction <= 1.0:
            raise ValueError("inv_loss_start_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def inv_loss_start_epoch(self) -> int:
        return math.ceil(self.inv_loss_start_fraction * self.epochs)


@dataclass
class Metrics:
    accuracy: float = float("nan")
    invariance_error: float = float("nan")
    loss_history: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def train(
    net: Network,
    train_set,
    cfg: TrainConfig,
    val_set=None,
    post_step: Callable[[Network], None] | None = None,
) -> tuple[Network, Metrics]:
    """SGD with momentum and weight decay.  Deterministic given ``cfg.seed``.

    The invariance term switches on (hard step) from epoch
    ``ceil(inv_loss_start_fraction * epochs)`` and is evaluated on the
    augmented batch.  If the net carries a constraint it is re-projected
    after every step, as is ``post_step`` if given.
    """
    from flipequiv.data import augment_hflip

    images, labels = _images_labels(train_set)
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != net.input_shape:
        raise T.ShapeError(f"dataset images {images.shape[1:]} do not match network input {net.input_shape}")
    rng = T.make_rng(cfg.seed)
    net = net.copy()
    if net.constraint is not None:
        net.constraint.project(net)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items() if not is_buffer(k)}
    metrics = Metrics()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lam = cfg.inv_loss_weight if epoch >= cfg.inv_loss_start_epoch else 0.0
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = augment_hflip(images[idx], cfg.hflip_aug_prob, rng)
            loss, _, _, grads = objective(net, xb, labels[idx], lam, train=True, bn_update=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b)
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v += g + cfg.weight_decay * net.params[k]
                net.params[k] = net.params[k] - cfg.lr * v
            if net.constraint is not None:
                net.constraint.project(net)
            if post_step is not None:
                post_step(net)
            total += loss * len(idx)
            seen += len(idx)
        metrics.loss_history.append(total / max(seen, 1))
        if val_set is not None:
            metrics.val_accuracy.append(accuracy(net, val_set))
        log.info("epoch %d loss %.5f", epoch, metrics.loss_history[-1])
    eval_set = val_set if val_set is not None else train_set
    metrics.accuracy = accuracy(net, eval_set)
    metrics.invariance_error = invariance_error(net, train_set, min(1024, n))
    return net, metrics


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(net: Network) -> bytes:
    names = list(param_shapes(net.layers))
    directory, blobs, offset = [], [], 0
    for name in names:
        blob = np.ascontiguousarray(net.params[name], dtype="<f4").tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(net.params[name].shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "layers": [layer_to_dict(layer) for layer in net.layers],
        "input_shape": list(net.input_shape),
        "tensors": directory,
        "gcnn": net.constraint.to_dict() if net.constraint is not None else None,
        "meta": net.meta,
    }
    hbytes = _canonical_json(header)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for blob in blobs:
        buf.write(blob)
    return buf.getvalue()


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(raw: bytes) -> Network:
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not an EQNT checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 16 + hlen > len(raw):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    base = 16 + hlen
    layers = [layer_from_dict(d) for d in header["layers"]]
    expected = param_shapes(layers)
    params = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["dtype"] != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {entry['dtype']}")
        if expected.get(name) != shape:
            raise CheckpointError(f"{name}: shape {shape} inconsistent with layer specs")
        count = int(np.prod(shape))
        start = base + entry["offset"]
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointError(f"truncated blob for {name}")
        params[name] = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)}")
    constraint = None
    if header.get("gcnn") is not None:
        from flipequiv.symmetry import GcnnConstraint

        constraint = GcnnConstraint.from_dict(header["gcnn"])
    try:
        return Network(layers, tuple(header["input_shape"]), params, constraint=constraint, meta=header.get("meta") or {})
    except (ValueError, T.ShapeError) as exc:
        raise CheckpointError(str(exc)) from exc


def load_checkpoint(path) -> Network:
    return checkpoint_from_bytes(Path(path).read_bytes())
