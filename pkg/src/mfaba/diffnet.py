"""A minimal differentiable classifier core.

Tensors are plain ``float64`` numpy arrays. A :class:`Model` is a frozen
sequence of layers plus read-only parameter arrays; every computation is a
pure function of ``(model, input)``. Backpropagation is written by hand and
runs all the way to the input, which is what the attribution code needs.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

OBJECTIVE_KINDS = ("loss", "softmax", "logit")
_OBJECTIVE_ALIASES = {
    "loss": "loss",
    "cross-entropy": "loss",
    "cross-entropy-loss": "loss",
    "ce": "loss",
    "softmax": "softmax",
    "softmax-probability": "softmax",
    "prob": "softmax",
    "logit": "logit",
}


class ModelFormatError(ValueError):
    """Raised when a serialized model payload cannot be decoded."""


# ------------------------------------------------------------------ objective


@dataclass(frozen=True)
class Objective:
    """Scalar function of the logits: cross-entropy loss, softmax
    probability or raw logit of ``target``."""

    kind: str
    target: int

    def __post_init__(self):
        kind = _OBJECTIVE_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "target", int(self.target))

    @property
    def is_loss(self) -> bool:
        return self.kind == "loss"

    def retarget(self, target: int) -> Objective:
        return Objective(self.kind, target)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def objective_from_logits(logits: np.ndarray, kind: str, targets) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(B,)`` and gradients w.r.t. the logits ``(B, C)``."""
    logits = np.atleast_2d(logits)
    B, C = logits.shape
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (B,))
    if np.any(targets < 0) or np.any(targets >= C):
        raise ValueError(f"target class out of range for {C} classes: {targets}")
    rows = np.arange(B)
    onehot = np.zeros((B, C))
    onehot[rows, targets] = 1.0
    if kind == "logit":
        return logits[rows, targets].copy(), onehot
    p = softmax(logits)
    if kind == "loss":
        return -log_softmax(logits)[rows, targets], p - onehot
    if kind == "softmax":
        pt = p[rows, targets]
        return pt, pt[:, None] * (onehot - p)
    raise ValueError(f"unknown objective kind {kind!r}")


# --------------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    n_params = 0

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, in_shape: tuple, rng: np.random.Generator) -> tuple:
        return ()

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dout):
        """Return ``(dx, dparams)``."""
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"
    n_params = 2

    def __init__(self, units: int):
        self.units = int(units)

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError(f"dense layer needs a flat input, got shape {in_shape}")
        return (self.units,)

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0]
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=(fan_in, self.units)), np.zeros(self.units)

    def forward(self, params, x):
        w, b = params
        return x @ w + b, x

    def backward(self, params, cache, dout):
        w, _ = params
        return dout @ w.T, (cache.T @ dout, dout.sum(axis=0))

    def spec(self):
        return {"kind": self.kind, "units": self.units}


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, params, cache, dout):
        # subgradient at 0 is 0
        return np.where(cache, dout, 0.0), ()


class Tanh(Layer):
    kind = "tanh"

    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dout):
        return dout * (1.0 - cache * cache), ()


class Conv2D(Layer):
    kind = "conv2d"
    n_params = 2

    def __init__(self, filters: int, kernel: int = 3):
        self.filters = int(filters)
        self.kernel = int(kernel)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"conv2d needs a (C, H, W) input, got shape {in_shape}")
        c, h, w = in_shape
        k = self.kernel
        if h < k or w < k:
            raise ValueError(f"input {in_shape} smaller than kernel {k}")
        return (self.filters, h - k + 1, w - k + 1)

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0] * self.kernel * self.kernel
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(self.filters, in_shape[0], self.kernel, self.kernel))
        return w, np.zeros(self.filters)

    def forward(self, params, x):
        w, b = params
        x = np.ascontiguousarray(x)
        return kernels.conv2d_forward(x, w, b), x

    def backward(self, params, cache, dout):
        w, _ = params
        dx, dw, db = kernels.conv2d_backward(cache, w, np.ascontiguousarray(dout))
        return dx, (dw, db)

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": self.kernel}


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, size: int = 2):
        self.size = int(size)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ValueError(f"input {in_shape} smaller than pool window {self.size}")
        return (c, h // self.size, w // self.size)

    def forward(self, params, x):
        out, idx = kernels.maxpool_forward(np.ascontiguousarray(x), self.size)
        return out, (idx, x.shape)

    def backward(self, params, cache, dout):
        idx, shape = cache
        return kernels.maxpool_backward(np.ascontiguousarray(dout), idx, shape, self.size), ()

    def spec(self):
        return {"kind": self.kind, "size": self.size}


class AvgPool2D(Layer):
    kind = "avgpool2d"

    def __init__(self, size: int = 2):
        self.size = int(size)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ValueError(f"input {in_shape} smaller than pool window {self.size}")
        return (c, h // self.size, w // self.size)

    def forward(self, params, x):
        B, C, H, W = x.shape
        s = self.size
        Ho, Wo = H // s, W // s
        out = x[:, :, : Ho * s, : Wo * s].reshape(B, C, Ho, s, Wo, s).mean(axis=(3, 5))
        return out, x.shape

    def backward(self, params, cache, dout):
        B, C, H, W = cache
        s = self.size
        dx = np.zeros(cache)
        up = np.repeat(np.repeat(dout, s, axis=2), s, axis=3) / (s * s)
        dx[:, :, : up.shape[2], : up.shape[3]] = up
        return dx, ()

    def spec(self):
        return {"kind": self.kind, "size": self.size}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(int(s) for s in shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, params, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), ()

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape)}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), ()


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Tanh, Conv2D, MaxPool2D, AvgPool2D, Reshape, Flatten)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}; known: {sorted(_LAYER_TYPES)}")
    try:
        return _LAYER_TYPES[kind](**spec)
    except TypeError as exc:
        raise ValueError(f"bad arguments for layer {kind!r}: {exc}") from None


# ---------------------------------------------------------------------- model


def _freeze(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable sequential classifier.

    ``layers`` are JSON-able layer specs, ``params`` holds one tuple of
    read-only arrays per layer.
    """

    input_shape: tuple
    layers: tuple
    params: tuple
    _modules: tuple = field(init=False, repr=False)
    num_classes: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        modules = tuple(layer_from_spec(s) for s in self.layers)
        if len(self.params) != len(modules):
            raise ValueError("params must have one entry per layer")
        shape = self.input_shape
        frozen = []
        for mod, p in zip(modules, self.params):
            if len(p) != mod.n_params:
                raise ValueError(f"layer {mod.kind!r} expects {mod.n_params} parameter arrays, got {len(p)}")
            frozen.append(tuple(_freeze(a) for a in p))
            shape = mod.out_shape(shape)
        if len(shape) != 1:
            raise ValueError(f"model output must be flat logits, got shape {shape}")
        object.__setattr__(self, "layers", tuple(m.spec() for m in modules))
        object.__setattr__(self, "params", tuple(frozen))
        object.__setattr__(self, "_modules", modules)
        object.__setattr__(self, "num_classes", int(shape[0]))

    # -- validation

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("input contains NaN or Inf")
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape and x.ndim == len(self.input_shape) + 1:
            return x, False
        raise ValueError(f"input shape {x.shape} does not match model input shape {self.input_shape}")

    # -- passes

    def _forward(self, X):
        caches = []
        h = X
        for mod, p in zip(self._modules, self.params):
            h, cache = mod.forward(p, h)
            caches.append(cache)
        return h, caches

    def _backward(self, caches, dlogits, want_params=False):
        d = dlogits
        dparams = [()] * len(self._modules)
        for i in range(len(self._modules) - 1, -1, -1):
            d, dp = self._modules[i].backward(self.params[i], caches[i], d)
            dparams[i] = dp
        return (d, dparams) if want_params else d

    def logits(self, x) -> np.ndarray:
        """Logits ``(C,)`` for a single sample or ``(B, C)`` for a batch."""
        X, single = self._as_batch(x)
        out, _ = self._forward(X)
        return out[0] if single else out

    forward = logits

    def predict(self, x):
        """Predicted class; ties resolve to the smallest index."""
        z = self.logits(x)
        return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def value_and_grad(self, x, kind: str, targets):
        """Objective values, input gradients and logits in a single pass.

        Works on one sample or a batch; ``targets`` may be a scalar or one
        class per sample.
        """
        X, single = self._as_batch(x)
        kind = Objective(kind, 0).kind
        z, caches = self._forward(X)
        vals, dz = objective_from_logits(z, kind, targets)
        grads = self._backward(caches, dz)
        if single:
            return float(vals[0]), grads[0], z[0]
        return vals, grads, z

    def objective_value(self, x, obj: Objective):
        X, single = self._as_batch(x)
        vals, _ = objective_from_logits(self._forward(X)[0], obj.kind, obj.target)
        return float(vals[0]) if single else vals

    def input_gradient(self, x, obj: Objective) -> np.ndarray:
        return self.value_and_grad(x, obj.kind, obj.target)[1]

    def loss_and_param_grads(self, X, y):
        """Mean cross-entropy over a batch and its parameter gradients."""
        z, caches = self._forward(X)
        vals, dz = objective_from_logits(z, "loss", y)
        _, dparams = self._backward(caches, dz / len(X), want_params=True)
        return float(vals.mean()), dparams

    def with_params(self, params) -> Model:
        return Model(self.input_shape, self.layers, tuple(tuple(p) for p in params))

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for p in self.params for a in p))


# module-level aliases


def forward(model: Model, x) -> np.ndarray:
    return model.logits(x)


def objective_value(model: Model, x, obj: Objective):
    return model.objective_value(x, obj)


def input_gradient(model: Model, x, obj: Objective) -> np.ndarray:
    return model.input_gradient(x, obj)


# ------------------------------------------------------------- construction


def init_model(input_shape, layers: Sequence[dict], seed: int = 0) -> Model:
    """He-uniform weights scaled by fan-in, zero biases."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    params = []
    for spec in layers:
        mod = layer_from_spec(spec)
        params.append(mod.init_params(shape, rng))
        shape = mod.out_shape(shape)
    return Model(tuple(input_shape), tuple(layers), tuple(params))


def mlp(input_dim: int, hidden: Sequence[int] = (16,), num_classes: int = 2, seed: int = 0,
        activation: str = "relu") -> Model:
    layers = []
    for h in hidden:
        layers += [{"kind": "dense", "units": int(h)}, {"kind": activation}]
    layers.append({"kind": "dense", "units": int(num_classes)})
    return init_model((int(input_dim),), layers, seed)


def cnn(input_shape, filters: int = 4, kernel: int = 3, pool: int = 2, num_classes: int = 2,
        seed: int = 0, activation: str = "relu", pooling: str = "max") -> Model:
    """conv KxK -> ReLU -> max-pool -> dense. ``input_shape`` is (H, W) or (C, H, W).

    ``activation="tanh"`` with ``pooling="avg"`` gives a smooth variant.
    """
    if pooling not in ("max", "avg"):
        raise ValueError("pooling must be 'max' or 'avg'")
    input_shape = tuple(int(s) for s in input_shape)
    layers = []
    chw = input_shape
    if len(input_shape) == 2:
        chw = (1,) + input_shape
        layers.append({"kind": "reshape", "shape": list(chw)})
    elif len(input_shape) != 3:
        raise ValueError(f"cnn input must be (H, W) or (C, H, W), got {input_shape}")
    layers += [
        {"kind": "conv2d", "filters": int(filters), "kernel": int(kernel)},
        {"kind": activation},
        {"kind": pooling + "pool2d", "size": int(pool)},
        {"kind": "flatten"},
        {"kind": "dense", "units": int(num_classes)},
    ]
    return init_model(input_shape, layers, seed)


def build_model(arch: str, input_shape, num_classes: int, seed: int = 0, **options) -> Model:
    """Build from a short architecture name: ``mlp`` or ``cnn``."""
    if arch == "mlp":
        hidden = options.get("hidden", (16,))
        if isinstance(hidden, str):
            hidden = tuple(int(h) for h in hidden.split("x") if h)
        return mlp(int(np.prod(input_shape)), hidden, num_classes, seed,
                   options.get("activation", "relu"))
    if arch == "cnn":
        return cnn(input_shape, int(options.get("filters", 4)), int(options.get("kernel", 3)),
                   int(options.get("pool", 2)), num_classes, seed,
                   options.get("activation", "relu"), options.get("pooling", "max"))
    raise ValueError(f"unknown architecture {arch!r}; expected 'mlp' or 'cnn'")


# ------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatasetSplit:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "data"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim < 2 or len(inputs) != len(labels):
            raise ValueError("inputs and labels must have the same length")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, name=None) -> DatasetSplit:
        return DatasetSplit(self.inputs[idx], self.labels[idx], name or self.name)


def accuracy(model: Model, data: DatasetSplit) -> float:
    return float(np.mean(model.predict(data.inputs) == data.labels))


def train(model: Model, data: DatasetSplit, epochs: int, lr: float, seed: int = 0,
          batch_size: int = 32) -> Model:
    """Plain minibatch SGD on mean cross-entropy. Returns a new model."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if data.sample_shape != model.input_shape:
        raise ValueError(f"dataset sample shape {data.sample_shape} != model input {model.input_shape}")
    if data.labels.max() >= model.num_classes:
        raise ValueError("dataset label exceeds model class count")
    rng = np.random.default_rng(seed)
    params = [[a.copy() for a in p] for p in model.params]
    current = model
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, grads = current.loss_and_param_grads(data.inputs[idx], data.labels[idx])
            for p, g in zip(params, grads):
                for a, ga in zip(p, g):
                    a -= lr * ga
            current = model.with_params(params)
    return current if epochs > 0 else model


# ------------------------------------------------------------- serialization

_MAGIC = b"MFBNET\x00\x01"
_VERSION = 1


def save_model(model: Model) -> bytes:
    """Serialize to the versioned container documented in the README."""
    shapes = [[list(a.shape) for a in p] for p in model.params]
    header = json.dumps(
        {"input_shape": list(model.input_shape), "layers": list(model.layers), "param_shapes": shapes},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for p in model.params for a in p)
    payload = _MAGIC + struct.pack("<II", _VERSION, len(header)) + header + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def load_model(payload: bytes) -> Model:
    payload = bytes(payload)
    head = len(_MAGIC) + 8
    if len(payload) < head + 4:
        raise ModelFormatError("model payload too short")
    if payload[: len(_MAGIC)] != _MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    version, hlen = struct.unpack("<II", payload[len(_MAGIC):head])
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    (crc,) = struct.unpack("<I", payload[-4:])
    if zlib.crc32(payload[:-4]) & 0xFFFFFFFF != crc:
        raise ModelFormatError("checksum mismatch: payload truncated or corrupted")
    try:
        header = json.loads(payload[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"bad header: {exc}") from None
    body = payload[head + hlen:-4]
    offset = 0
    params = []
    for layer_shapes in header["param_shapes"]:
        arrays = []
        for shape in layer_shapes:
            n = int(np.prod(shape)) * 8
            if offset + n > len(body):
                raise ModelFormatError("parameter block truncated")
            arrays.append(np.frombuffer(body, dtype="<f8", count=n // 8, offset=offset).reshape(shape))
            offset += n
        params.append(tuple(arrays))
    if offset != len(body):
        raise ModelFormatError("trailing bytes after parameter block")
    try:
        return Model(tuple(header["input_shape"]), tuple(header["layers"]), tuple(params))
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"invalid model description: {exc}") from None


def save_model_file(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(model))


def load_model_file(path) -> Model:
    with open(path, "rb") as fh:
        return load_model(fh.read())
