"""A small CNN with hand-written reverse-mode gradients.

Layers cache what they need during ``forward`` and consume it in
``backward``. Parameters and their gradient buffers live on the layer
objects (``params`` / ``grads`` dicts keyed by ``"weight"`` and ``"bias"``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, FormatError, InputError
from .tensor import Rng, gaussian

ACTIVATIONS = ("relu", "sigmoid")
REGULARIZERS = ("none", "almost_right", "hard_ortho")


@dataclass
class LossConfig:
    """Weighting of cross-entropy against the first-layer kernel regularizer.

    ``total = alpha * CE + (1 - alpha) * regularizer`` whenever a regularizer
    is selected. With ``regularizer="none"`` the objective is plain CE.
    """

    alpha: float = 0.5
    epsilon: float = 1e-8
    regularizer: str = "almost_right"
    first_activation: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.first_activation is None:
            self.first_activation = "sigmoid" if self.regularizer == "almost_right" else "relu"
        if self.first_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.first_activation!r}")


@dataclass
class SgdConfig:
    lr0: float = 0.005
    decay_factor: float = 0.1
    decay_every: int = 12
    batch_size: int = 20
    epochs: int = 15

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    @classmethod
    def full(cls) -> "SgdConfig":
        """Full-length recipe: 50 epochs, batch 20, lr 0.005 decayed x0.1 every 12 epochs."""
        return cls(epochs=50)


def lr_at(epoch: int, cfg: SgdConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def describe(self) -> dict:
        return {"type": self.kind}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.params["weight"] = np.zeros((out_channels, in_channels, kh, kw))
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size[0] * self.kernel_size[1]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got {c}")
        kh, kw = self.kernel_size
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w}")
        return (self.out_channels, ho, wo)

    def _columns(self, x):
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, self.kernel_size, axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo, kh, kw = win.shape
        # rows are (n, ho, wo); columns follow the weight's (c, kh, kw) flattening
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        return cols, x.shape, (n, ho, wo)

    def forward(self, x):
        cols, padded_shape, (n, ho, wo) = self._columns(x)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T + self.params["bias"]
        self._cache = (cols, padded_shape, (n, ho, wo))
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad_out):
        cols, padded_shape, (n, ho, wo) = self._cache
        g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        w = self.params["weight"].reshape(self.out_channels, -1)
        self.grads["weight"] += (g.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ w).reshape(n, ho, wo, self.in_channels, *self.kernel_size)
        dx = np.zeros(padded_shape, dtype=grad_out.dtype)
        kh, kw = self.kernel_size
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx

    def describe(self):
        return {"type": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": list(self.kernel_size), "stride": self.stride, "padding": self.padding}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        if self.fn == "relu":
            self._mask = x > 0
            return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)
        y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        self._y = y
        return y

    def backward(self, grad_out):
        if self.fn == "relu":
            return grad_out * self._mask
        return grad_out * self._y * (1.0 - self._y)

    def describe(self):
        return {"type": self.kind, "fn": self.fn}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k = self.window
        if h % k or w % k:
            raise DimensionError(f"pool window {k} does not tile {h}x{w}")
        return (c, h // k, w // k)

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.window
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        # first maximum wins, so the gradient goes to exactly one input per window
        self._arg = blocks.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        n, c, h, w = self._shape
        k = self.window
        blocks = np.zeros((n, c, h // k, w // k, k * k), dtype=grad_out.dtype)
        np.put_along_axis(blocks, self._arg[..., None], grad_out[..., None], axis=-1)
        return blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def describe(self):
        return {"type": self.kind, "window": self.window}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = np.zeros((out_features, in_features))
        self.params["bias"] = np.zeros(out_features)
        self.zero_grad()

    @property
    def fan_in(self):
        return self.in_features

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise DimensionError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        self.grads["weight"] += grad_out.T @ self._x
        self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"]

    def describe(self):
        return {"type": self.kind, "in_features": self.in_features, "out_features": self.out_features}


# ---------------------------------------------------------------- network


class Network:
    """Ordered layer stack. The first layer must be a :class:`Conv2D`."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        if not layers or not isinstance(layers[0], Conv2D):
            raise ConfigError("the first layer must be Conv2D")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise DimensionError(f"network must end in a vector output, got {shape}")
        self.frozen: set[int] = set()

    @property
    def first_conv(self) -> Conv2D:
        return self.layers[0]

    @property
    def n_outputs(self) -> int:
        return self.shapes[-1][0]

    def parametric(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.params]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for l in self.layers for p in l.params.values())

    def get_params(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in l.params.items()} for l in self.layers]

    def set_params(self, params):
        for layer, p in zip(self.layers, params):
            for k, v in p.items():
                if layer.params[k].shape != v.shape:
                    raise DimensionError(f"parameter {k} shape {v.shape} != {layer.params[k].shape}")
                layer.params[k] = np.array(v, dtype=layer.params[k].dtype)

    def astype(self, dtype):
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            layer.zero_grad()
        return self

    def architecture(self) -> list[dict]:
        return [l.describe() for l in self.layers]


def forward(net: Network, batch: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Run the batch through ``net`` (or through its first ``upto`` layers)."""
    x = np.asarray(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input (N, {net.input_shape})")
    dtype = net.first_conv.params["weight"].dtype
    x = x.astype(dtype, copy=False)
    for layer in net.layers[:upto]:
        x = layer.forward(x)
    return x


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def _check_labels(labels, n, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    """Mean negative log softmax probability of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _cross_entropy_grad(logits, labels):
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def regularizer_terms(net: Network, cfg: LossConfig):
    """Value and first-layer weight gradient of the configured regularizer."""
    from . import ortho  # ortho imports nn for typing only; keep the cycle lazy

    w = net.first_conv.params["weight"].astype(np.float64)
    kb = ortho.flatten_kernels(w)
    if cfg.regularizer == "almost_right":
        value = ortho.almost_right_loss(kb, cfg.epsilon)
        grad = ortho.almost_right_grad(kb, cfg.epsilon)
    elif cfg.regularizer == "hard_ortho":
        value = ortho.hard_ortho_loss(kb, cfg.epsilon)
        grad = ortho.hard_ortho_grad(kb, cfg.epsilon)
    else:
        return 0.0, np.zeros_like(w)
    return value, ortho.unflatten_kernels(grad, w.shape)


@dataclass
class LossBreakdown:
    total: float
    ce: float
    reg: float


def backward(net: Network, batch, labels, cfg: LossConfig) -> LossBreakdown:
    """Populate every layer's ``grads`` with d(total loss)/d(param).

    Layers listed in ``net.frozen`` get zero gradients.
    """
    net.zero_grad()
    logits = forward(net, batch)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    ce = cross_entropy(logits, labels)
    ce_weight = cfg.alpha if cfg.regularizer != "none" else 1.0
    g = _cross_entropy_grad(logits.astype(np.float64), labels) * ce_weight
    g = g.astype(logits.dtype, copy=False)
    for layer in reversed(net.layers):
        g = layer.backward(g)
    reg = 0.0
    if cfg.regularizer != "none":
        reg, reg_grad = regularizer_terms(net, cfg)
        net.first_conv.grads["weight"] += ((1.0 - cfg.alpha) * reg_grad).astype(g.dtype, copy=False)
        total = cfg.alpha * ce + (1.0 - cfg.alpha) * reg
    else:
        total = ce
    for i in net.frozen:
        net.layers[i].zero_grad()
    return LossBreakdown(total=float(total), ce=ce, reg=float(reg))


def sgd_step(net: Network, lr: float, grads=None) -> Network:
    """Plain SGD: ``param -= lr * grad``. Uses the layers' own buffers unless
    ``grads`` (one dict per layer) is given."""
    grads = grads if grads is not None else [l.grads for l in net.layers]
    if len(grads) != len(net.layers):
        raise DimensionError("one gradient dict per layer is required")
    for layer, g in zip(net.layers, grads):
        for k, p in layer.params.items():
            if g[k].shape != p.shape:
                raise DimensionError(f"gradient shape {g[k].shape} != parameter shape {p.shape}")
            p -= lr * g[k]
    return net


# ---------------------------------------------------------------- construction


def small_conv_net(in_channels=1, image_size=32, n_classes=2, first_activation="relu",
                   activation="relu", k1=16, k2=32) -> Network:
    """conv5x5(k1) -> act -> pool2 -> conv3x3(k2) -> act -> pool2 -> flatten -> dense."""
    feat = image_size // 4
    layers = [
        Conv2D(in_channels, k1, 5, stride=1, padding=2),
        Activation(first_activation),
        MaxPool(2),
        Conv2D(k1, k2, 3, stride=1, padding=1),
        Activation(activation),
        MaxPool(2),
        Flatten(),
        Dense(k2 * feat * feat, n_classes),
    ]
    return Network(layers, (in_channels, image_size, image_size))


def he_init(net: Network, rng: Rng) -> Network:
    """Gaussian weights with std sqrt(2 / fan_in); zero biases."""
    for _, layer in net.parametric():
        w = layer.params["weight"]
        layer.params["weight"] = gaussian(rng, w.shape, 0.0, math.sqrt(2.0 / layer.fan_in)).astype(w.dtype)
        layer.params["bias"] = np.zeros_like(layer.params["bias"])
    return net


# ---------------------------------------------------------------- checkpoints
#
# Little-endian layout:
#   b"NOWT" | u32 version | u32 C | u32 H | u32 W | u32 layer count
#   per layer: u32 type tag | u32 n_ints | i32 * n_ints | per param (weight, bias):
#              u32 ndim | u32 * ndim | float32 payload

MAGIC = b"NOWT"
VERSION = 1
_TAGS = {"conv2d": 1, "activation": 2, "maxpool": 3, "flatten": 4, "dense": 5}
_ACT_CODES = {"relu": 0, "sigmoid": 1}


def _layer_ints(layer):
    if isinstance(layer, Conv2D):
        return [layer.out_channels, layer.in_channels, *layer.kernel_size, layer.stride, layer.padding]
    if isinstance(layer, Activation):
        return [_ACT_CODES[layer.fn]]
    if isinstance(layer, MaxPool):
        return [layer.window]
    if isinstance(layer, Dense):
        return [layer.in_features, layer.out_features]
    return []


def _layer_from(tag, ints):
    if tag == 1:
        k, c, kh, kw, s, p = ints
        return Conv2D(c, k, (kh, kw), stride=s, padding=p)
    if tag == 2:
        return Activation({v: k for k, v in _ACT_CODES.items()}[ints[0]])
    if tag == 3:
        return MaxPool(ints[0])
    if tag == 4:
        return Flatten()
    if tag == 5:
        return Dense(*ints)
    raise KeyError(tag)


def checkpoint_bytes(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<3I", *net.input_shape),
           struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        ints = _layer_ints(layer)
        out.append(struct.pack(f"<II{len(ints)}i", _TAGS[layer.kind], len(ints), *ints))
        for name in ("weight", "bias"):
            if name in layer.params:
                p = layer.params[name]
                out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
                out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, n=1, what="header"):
        vals = struct.unpack(f"<{n}I", self.take(4 * n, what))
        return vals if n > 1 else vals[0]


def checkpoint_from_bytes(buf: bytes, dtype=np.float64) -> Network:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.u32(what="version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    input_shape = r.u32(3, "input shape")
    n_layers = r.u32(what="layer count")
    layers = []
    for _ in range(n_layers):
        at = r.pos
        tag, n_ints = r.u32(2, "layer header")
        ints = struct.unpack(f"<{n_ints}i", r.take(4 * n_ints, "layer ints"))
        try:
            layer = _layer_from(tag, ints)
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"bad layer record (tag {tag})", at) from exc
        for name in ("weight", "bias"):
            if name not in layer.params:
                continue
            at = r.pos
            ndim = r.u32(what="param rank")
            shape = r.u32(ndim, "param shape") if ndim > 1 else (r.u32(what="param shape"),)
            if tuple(shape) != layer.params[name].shape:
                raise FormatError(f"{name} shape {shape} inconsistent with layer", at)
            count = math.prod(shape)
            data = np.frombuffer(r.take(4 * count, "param payload"), dtype="<f4").reshape(shape)
            layer.params[name] = data.astype(dtype)
        layer.zero_grad()
        layers.append(layer)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last layer", r.pos)
    try:
        return Network(layers, tuple(input_shape))
    except (DimensionError, ConfigError) as exc:
        raise FormatError(f"inconsistent architecture: {exc}") from exc


def load_checkpoint(path, dtype=np.float64) -> Network:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), dtype)


def round_to_checkpoint(net: Network) -> Network:
    """Round parameters in place to the float32 values a checkpoint stores."""
    for layer in net.layers:
        for k, p in layer.params.items():
            layer.params[k] = p.astype(np.float32).astype(p.dtype)
    return net

