"""Client-side model zoo, the shared-gradient packet and BatchNorm regimes.

Architectures (``build_model`` names):

``mlp2``           flatten - dense(hidden) - relu - dense(classes)
``convnet6``       conv16 - relu - conv32 - relu - avgpool - conv64 - relu - avgpool - flatten - dense
``convnet6-bn``    as above with BatchNorm after every conv
``mini-resnet``    conv16 - bn - relu - 2 residual blocks - global avgpool - dense

BatchNorm regimes for the attacker (:class:`BNMode`): ``exact`` normalises with
the private batch's statistics taken from the packet, ``proxy`` with the
model's aggregated running statistics, ``infer`` with the candidate's own
batch statistics (which are returned so a prior can penalise them).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BNMode(str, Enum):
    NONE = "none"
    EXACT = "exact"
    PROXY = "proxy"
    INFER = "infer"


# ---------------------------------------------------------------- layers

@dataclass
class Dense:
    in_features: int
    out_features: int

    def params(self, prefix):
        return {f"{prefix}.weight": ((self.out_features, self.in_features), self.in_features),
                f"{prefix}.bias": ((self.out_features,), self.in_features)}

    def out_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def apply(self, h, p, prefix, bn):
        return ad.matmul(h, p[f"{prefix}.weight"].T) + p[f"{prefix}.bias"]


@dataclass
class Conv:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def params(self, prefix):
        fan_in = self.in_channels * self.kernel * self.kernel
        return {f"{prefix}.weight": ((self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in),
                f"{prefix}.bias": ((self.out_channels,), fan_in)}

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        k, s, pd = self.kernel, self.stride, self.padding
        return (self.out_channels, (h + 2 * pd - k) // s + 1, (w + 2 * pd - k) // s + 1)

    def apply(self, h, p, prefix, bn):
        return ad.conv2d(h, p[f"{prefix}.weight"], p[f"{prefix}.bias"], self.stride, self.padding)


@dataclass
class BatchNorm:
    channels: int

    def params(self, prefix):
        return {f"{prefix}.gamma": ((self.channels,), None),
                f"{prefix}.beta": ((self.channels,), None)}

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ValueError(f"batchnorm over {self.channels} channels got {shape}")
        return shape

    def apply(self, h, p, prefix, bn):
        return bn(prefix, h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


@dataclass
class ReLU:
    def params(self, prefix): return {}
    def out_shape(self, shape): return shape
    def apply(self, h, p, prefix, bn): return ad.relu(h)


@dataclass
class Sigmoid:
    def params(self, prefix): return {}
    def out_shape(self, shape): return shape
    def apply(self, h, p, prefix, bn): return ad.sigmoid(h)


@dataclass
class Flatten:
    def params(self, prefix): return {}
    def out_shape(self, shape): return (int(np.prod(shape)),)
    def apply(self, h, p, prefix, bn): return ad.flatten(h)


@dataclass
class AvgPool:
    k: int = 2

    def params(self, prefix): return {}

    def out_shape(self, shape):
        c, h, w = shape
        if h % self.k or w % self.k:
            raise ValueError(f"avgpool window {self.k} does not divide {(h, w)}")
        return (c, h // self.k, w // self.k)

    def apply(self, h, p, prefix, bn): return ad.avgpool2d(h, self.k)


@dataclass
class ResBlock:
    """conv-bn-relu-conv-bn plus identity skip, then relu."""
    channels: int

    def _parts(self, prefix):
        c = self.channels
        return [(f"{prefix}.conv1", Conv(c, c)), (f"{prefix}.bn1", BatchNorm(c)),
                (f"{prefix}.conv2", Conv(c, c)), (f"{prefix}.bn2", BatchNorm(c))]

    def params(self, prefix):
        out = {}
        for name, part in self._parts(prefix):
            out.update(part.params(name))
        return out

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ValueError(f"resblock over {self.channels} channels got {shape}")
        return shape

    def apply(self, h, p, prefix, bn):
        (n1, c1), (b1, bn1), (n2, c2), (b2, bn2) = self._parts(prefix)
        y = ad.relu(bn1.apply(c1.apply(h, p, n1, bn), p, b1, bn))
        y = bn2.apply(c2.apply(y, p, n2, bn), p, b2, bn)
        return ad.relu(y + h)


def _bn_names(layers) -> list[str]:
    names = []
    for i, layer in enumerate(layers):
        if isinstance(layer, BatchNorm):
            names.append(str(i))
        elif isinstance(layer, ResBlock):
            names += [f"{i}.bn1", f"{i}.bn2"]
    return names


# ---------------------------------------------------------------- model

ARCHITECTURES = ("mlp2", "convnet6", "convnet6-bn", "mini-resnet")


@dataclass
class Model:
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    seed: int
    layers: list
    params: dict[str, np.ndarray]
    running: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    hidden: int = 64

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def bn_names(self) -> list[str]:
        return _bn_names(self.layers)

    @property
    def has_batchnorm(self) -> bool:
        return bool(self.bn_names)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.arch, self.input_shape, self.num_classes, self.seed, self.layers,
                     {k: v.copy() for k, v in self.params.items()},
                     {k: (m.copy(), v.copy()) for k, (m, v) in self.running.items()},
                     self.hidden)

    def leaves(self, graph: Graph) -> dict[str, Tensor]:
        return {k: graph.leaf(v) for k, v in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}


def _layers_for(arch, input_shape, num_classes, hidden):
    c, h, w = input_shape
    if arch == "mlp2":
        d = c * h * w
        return [Flatten(), Dense(d, hidden), ReLU(), Dense(hidden, num_classes)]
    if arch in ("convnet6", "convnet6-bn"):
        bn = arch.endswith("-bn")
        layers = []
        for cin, cout, pool in ((c, 16, False), (16, 32, True), (32, 64, True)):
            layers.append(Conv(cin, cout))
            if bn:
                layers.append(BatchNorm(cout))
            layers.append(ReLU())
            if pool:
                layers.append(AvgPool(2))
        layers += [Flatten(), Dense(64 * (h // 4) * (w // 4), num_classes)]
        return layers
    if arch == "mini-resnet":
        if h != w:
            raise ValueError("mini-resnet needs square inputs")
        return [Conv(c, 16), BatchNorm(16), ReLU(), ResBlock(16), ResBlock(16),
                AvgPool(h), Flatten(), Dense(16, num_classes)]
    raise ValueError(f"unknown architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")


INITS = ("uniform", "kaiming")


def build_model(arch: str, input_shape=(1, 28, 28), num_classes: int = 10,
                seed: int = 0, hidden: int = 64, init: str = "uniform") -> Model:
    """Deterministic model from ``seed``.

    ``uniform`` draws every weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    ``kaiming`` widens the weight bound to sqrt(6/fan_in), which trains ReLU
    stacks noticeably faster from scratch.
    """
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
    input_shape = tuple(int(s) for s in input_shape)
    layers = _layers_for(arch, input_shape, num_classes, hidden)
    shape = input_shape
    for layer in layers:
        shape = layer.out_shape(shape)
    if shape != (num_classes,):
        raise ValueError(f"{arch}: layers end in {shape}, expected ({num_classes},)")
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        for name, (pshape, fan_in) in layer.params(str(i)).items():
            if fan_in is None:
                params[name] = np.ones(pshape) if name.endswith("gamma") else np.zeros(pshape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                if init == "kaiming" and name.endswith("weight"):
                    bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=pshape)
    model = Model(arch, input_shape, num_classes, seed, layers, params, hidden=hidden)
    for name in model.bn_names:
        c = params[f"{name}.gamma"].shape[0]
        model.running[name] = (np.zeros(c), np.ones(c))
    return model


# ---------------------------------------------------------------- forward passes

def forward(model: Model, x, params: dict, bn: Callable):
    h = ad.as_tensor(x)
    for i, layer in enumerate(model.layers):
        h = layer.apply(h, params, str(i), bn)
    return h


def _batch_stats_bn(collected):
    def bn(name, h, gamma, beta):
        out, mu, var = ad.batchnorm_train(h, gamma, beta, eps=BN_EPS)
        collected.append((name, mu, var))
        return out
    return bn


def _fixed_stats_bn(stats: dict):
    def bn(name, h, gamma, beta):
        mu, var = stats[name]
        out, _, _ = ad.batchnorm_train(h, gamma, beta, mu, var, eps=BN_EPS)
        return out
    return bn


def _pinned_stats_bn(stats: dict, detached: list):
    """Statistics whose value is ``stats`` but whose parameter-Jacobian is the candidate's.

    ``detached`` holds the candidate's batch statistics from a pass with
    constant parameters; subtracting them cancels every dependence except the
    one on parameters, which is what the client's training-mode gradient has.
    """
    queue = iter(detached)

    def bn(name, h, gamma, beta):
        _, mu_b, var_b = ad.batchnorm_train(h, gamma, beta, eps=BN_EPS)
        mu_c, var_c = next(queue)
        mu_p, var_p = stats[name]
        mu = mu_b - mu_c + Tensor(mu_p)
        var = var_b - var_c + Tensor(var_p)
        out, _, _ = ad.batchnorm_train(h, gamma, beta, mu, var, eps=BN_EPS)
        return out
    return bn


def _fixed_stats_recording_bn(stats: dict, collected: list):
    def bn(name, h, gamma, beta):
        _, mu_b, var_b = ad.batchnorm_train(h, gamma, beta, eps=BN_EPS)
        collected.append((mu_b, var_b))
        mu, var = stats[name]
        out, _, _ = ad.batchnorm_train(h, gamma, beta, mu, var, eps=BN_EPS)
        return out
    return bn


def _no_bn(name, h, gamma, beta):
    raise ValueError(f"model has BatchNorm layer {name} but no BatchNorm mode was chosen")


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits (running statistics), no graph."""
    outs = []
    bn = _fixed_stats_bn(model.running)
    with ad.no_record():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model, x[i:i + batch_size], model.constants(), bn).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))


@dataclass
class GradientPacket:
    """What a client shares for one step.

    ``grads`` follows the model's parameter order. ``bn_stats`` maps each
    BatchNorm layer to the private batch's (mean, var) and is only present
    when the client shares them. ``labels`` is only present when granted.
    """
    grads: dict[str, np.ndarray]
    batch_size: int
    labels: np.ndarray | None = None
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def with_grads(self, grads: dict[str, np.ndarray]) -> "GradientPacket":
        return GradientPacket(grads, self.batch_size, self.labels, self.bn_stats)


def client_step(model: Model, x: np.ndarray, y: np.ndarray, bn_sharing: bool = False,
                include_labels: bool = False, update_running: bool = True) -> GradientPacket:
    """One local training step's gradient of the softmax cross-entropy.

    BatchNorm layers use the batch's statistics; the running estimates are
    updated in place (momentum 0.1) and never leave the client.
    ``y`` is an integer label vector or a (b, classes) soft-label matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty batch")
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    if y.ndim == 1:
        if y.shape[0] != len(x):
            raise ValueError(f"{len(x)} images but {y.shape[0]} labels")
        if y.min() < 0 or y.max() >= model.num_classes:
            raise ValueError(f"label out of range [0, {model.num_classes})")
    g = Graph()
    leaves = model.leaves(g)
    collected = []
    logits = forward(model, x, leaves, _batch_stats_bn(collected))
    loss = ad.softmax_cross_entropy(logits, y)
    grads = [t.data for t in ad.backward(loss, list(leaves.values()))]
    stats = {name: (mu.data.copy(), var.data.copy()) for name, mu, var in collected}
    g.release()
    if update_running:
        for name, (mu, var) in stats.items():
            rm, rv = model.running[name]
            model.running[name] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu,
                                   (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var)
    return GradientPacket(
        grads=dict(zip(leaves, grads)),
        batch_size=len(x),
        labels=y.copy() if include_labels else None,
        bn_stats=stats if (bn_sharing and stats) else None,
    )


def batch_loss(model: Model, x, y) -> float:
    """Training-mode loss, for finite-difference checks."""
    with ad.no_record():
        logits = forward(model, x, model.constants(), _batch_stats_bn([]))
        return ad.softmax_cross_entropy(logits, y).item()


def attacker_forward(model: Model, x: Tensor, mode: BNMode | str, params: dict,
                     packet: GradientPacket | None = None):
    """Logits for candidate ``x`` under a BatchNorm regime.

    Returns ``(logits, stats)`` where ``stats`` lists the candidate's
    per-layer (mean, var) tensors in ``infer`` mode and is empty otherwise.
    """
    mode = BNMode(mode)
    collected = []
    if not model.has_batchnorm:
        bn = _no_bn
    elif mode is BNMode.EXACT:
        if packet is None or packet.bn_stats is None:
            raise ValueError("BN exact mode needs batch statistics in the gradient packet")
        detached = []
        const = {k: Tensor(v.data) for k, v in params.items()}
        forward(model, x, const, _fixed_stats_recording_bn(packet.bn_stats, detached))
        bn = _pinned_stats_bn(packet.bn_stats, detached)
    elif mode is BNMode.PROXY:
        bn = _fixed_stats_bn(model.running)
    elif mode is BNMode.INFER:
        bn = _batch_stats_bn(collected)
    else:
        bn = _no_bn
    logits = forward(model, x, params, bn)
    return logits, [(mu, var) for _, mu, var in collected]


def set_running_stats(model: Model, x: np.ndarray) -> None:
    """Replace running statistics with the exact statistics of dataset ``x``.

    Stands in for the aggregated (mu, sigma^2) a client releases at the end of training.
    """
    if not model.has_batchnorm:
        return
    collected = []
    with ad.no_record():
        forward(model, x, model.constants(), _batch_stats_bn(collected))
    for name, mu, var in collected:
        model.running[name] = (mu.data.copy(), var.data.copy())


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GSIM"
FORMAT_VERSION = 1


def _spec_string(model: Model) -> str:
    c, h, w = model.input_shape
    return f"{model.arch}|{c}x{h}x{w}|{model.num_classes}|{model.hidden}"


def save_checkpoint(model: Model, path) -> None:
    """Header (magic, version, architecture string, seed) then named little-endian f64 tensors."""
    buf = io.BytesIO()
    spec = _spec_string(model).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(spec)) + spec)
    buf.write(struct.pack("<q", model.seed))
    tensors = dict(model.params)
    for name, (m, v) in model.running.items():
        tensors[f"{name}.running_mean"] = m
        tensors[f"{name}.running_var"] = v
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic {raw[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    spec = raw[pos:pos + n].decode()
    pos += n
    (seed,) = take("<q")
    arch, shape, classes, hidden = spec.split("|")
    model = build_model(arch, tuple(int(s) for s in shape.split("x")), int(classes), seed, int(hidden))
    tensors = {}
    while pos < len(raw):
        (n,) = take("<I")
        name = raw[pos:pos + n].decode()
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}q")
        count = int(np.prod(dims)) if rank else 1
        if pos + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, "<f8", count, pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    for name in model.params:
        model.params[name] = tensors[name]
    for name in model.running:
        model.running[name] = (tensors[f"{name}.running_mean"], tensors[f"{name}.running_var"])
    return model
