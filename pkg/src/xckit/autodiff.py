"""Minimal reverse-mode differentiation engine for small feed-forward grid models.

Supports the layer set needed by the toy detectors and the meta-classifier:
dense, conv2d (stride 1, zero padding), relu, sigmoid, flatten, and a
standalone bias layer. Parameters are stored as float32; computation follows
the dtype of the input array, so tests can drive the same graph at float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    EmptyBatch,
    ShapeMismatch,
    TargetOutOfRange,
    UnknownLayerKind,
    XckitError,
)


class Tensor:
    """A float32 value grid with a fixed shape.

    Values are validated to be finite on construction. The underlying array
    is available as ``.data`` (row-major float32).
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise XckitError("tensor contains non-finite values")
        self.data = arr

    @property
    def shape(self):
        return tuple(self.data.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass
class GradientResult:
    """Gradient of one scalar model output with respect to the model input."""

    input_grad: Tensor
    output_value: float


def _as_f32(values, shape, what):
    arr = np.asarray(values, dtype=np.float32)
    if arr.shape != tuple(shape):
        # accept flat lists for convenience
        if arr.size == int(np.prod(shape)):
            arr = arr.reshape(shape)
        else:
            raise ShapeMismatch(f"{what}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise XckitError(f"{what}: non-finite parameter values")
    return arr


class _Dense:
    kind = "dense"

    def __init__(self, weight, bias):
        self.weight = weight  # (in_features, out_features)
        self.bias = bias  # (out_features,)

    def out_shape(self, in_shape):
        n_in = int(np.prod(in_shape))
        if n_in != self.weight.shape[0]:
            raise ShapeMismatch(
                f"dense expects {self.weight.shape[0]} input features, got {in_shape}"
            )
        return (self.weight.shape[1],)

    def forward(self, x):
        # x: (B, ...) flattened to (B, n_in); implicit flatten keeps
        # conv -> dense graphs composable without an explicit flatten layer
        b = x.shape[0]
        flat = x.reshape(b, -1)
        w = self.weight.astype(x.dtype, copy=False)
        y = flat @ w + self.bias.astype(x.dtype, copy=False)
        return y, (flat, x.shape)

    def backward(self, g, cache):
        flat, in_shape = cache
        w = self.weight.astype(g.dtype, copy=False)
        dx = (g @ w.T).reshape(in_shape)
        dw = flat.T @ g
        db = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return dx, {"weight": dw, "bias": db}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class _Conv2d:
    """3x3-style convolution, stride 1, zero ("same") padding, NHWC layout."""

    kind = "conv2d"

    def __init__(self, weight, bias):
        self.weight = weight  # (kh, kw, in_channels, out_channels)
        self.bias = bias  # (out_channels,)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.weight.shape[2]:
            raise ShapeMismatch(
                f"conv2d expects (H, W, {self.weight.shape[2]}) input, got {in_shape}"
            )
        return (in_shape[0], in_shape[1], self.weight.shape[3])

    def _pad(self, x):
        kh, kw = self.weight.shape[:2]
        ph, pw = kh // 2, kw // 2
        if ph == 0 and pw == 0:
            return x
        return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    def forward(self, x):
        b, h, w_, _ = x.shape
        kh, kw, _, cout = self.weight.shape
        wk = self.weight.astype(x.dtype, copy=False)
        xp = self._pad(x)
        y = np.zeros((b, h, w_, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                y += xp[:, i : i + h, j : j + w_, :] @ wk[i, j]
        y += self.bias.astype(x.dtype, copy=False)
        return y, xp

    def backward(self, g, cache):
        xp = cache
        b, h, w_, cout = g.shape
        kh, kw, cin, _ = self.weight.shape
        wk = self.weight.astype(g.dtype, copy=False)
        dxp = np.zeros_like(xp)
        dw = np.zeros((kh, kw, cin, cout), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i : i + h, j : j + w_, :]
                dxp[:, i : i + h, j : j + w_, :] += g @ wk[i, j].T
                dw[i, j] = np.einsum("bhwc,bhwo->co", xs, g)
        ph, pw = kh // 2, kw // 2
        dx = dxp[:, ph : ph + h, pw : pw + w_, :] if (ph or pw) else dxp
        db = g.sum(axis=(0, 1, 2), dtype=np.float64).astype(g.dtype)
        return dx, {"weight": dw, "bias": db}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class _ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0), x

    def backward(self, g, cache):
        # subgradient 0 at the kink
        return g * (cache > 0), {}

    def params(self):
        return {}


class _Sigmoid:
    kind = "sigmoid"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, g, cache):
        return g * cache * (1.0 - cache), {}

    def params(self):
        return {}


class _Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache):
        return g.reshape(cache), {}

    def params(self):
        return {}


class _Bias:
    """Adds a learned offset along the last axis."""

    kind = "bias"

    def __init__(self, values):
        self.values = values

    def out_shape(self, in_shape):
        if in_shape[-1] != self.values.shape[0]:
            raise ShapeMismatch(
                f"bias of size {self.values.shape[0]} cannot broadcast over {in_shape}"
            )
        return in_shape

    def forward(self, x):
        return x + self.values.astype(x.dtype, copy=False), None

    def backward(self, g, cache):
        axes = tuple(range(g.ndim - 1))
        db = g.sum(axis=axes, dtype=np.float64).astype(g.dtype)
        return g, {"values": db}

    def params(self):
        return {"values": self.values}


class ModelGraph:
    """An immutable feed-forward layer chain with named parameters."""

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = tuple(shape)

    @property
    def n_outputs(self):
        return int(np.prod(self.output_shape))

    def parameters(self):
        """Named parameter arrays (live views; do not mutate while sharing)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"layers.{i}.{name}"] = arr
        return out


def _init_array(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(spec: dict) -> ModelGraph:
    """Build a validated ModelGraph from a structured layer description.

    ``spec`` maps ``input_shape`` to a list of ``layers`` entries. Each
    parameterized entry either carries inline arrays (``weight``/``bias``/
    ``values``) or is initialized from ``spec["seed"]`` with
    uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) draws in layer order.
    """
    if "input_shape" not in spec or "layers" not in spec:
        raise XckitError("model spec needs 'input_shape' and 'layers'")
    seed = spec.get("seed")
    rng = np.random.default_rng(seed) if seed is not None else None

    def draw(shape, fan_in, what):
        if rng is None:
            raise XckitError(f"{what}: no inline parameters and no init seed given")
        return _init_array(rng, shape, fan_in)

    layers = []
    for idx, entry in enumerate(spec["layers"]):
        kind = entry.get("kind")
        tag = f"layers.{idx} ({kind})"
        if kind == "dense":
            n_in, n_out = int(entry["in_features"]), int(entry["out_features"])
            w = (
                _as_f32(entry["weight"], (n_in, n_out), tag)
                if "weight" in entry
                else draw((n_in, n_out), n_in, tag)
            )
            b = (
                _as_f32(entry["bias"], (n_out,), tag)
                if "bias" in entry
                else draw((n_out,), n_in, tag)
            )
            layers.append(_Dense(w, b))
        elif kind == "conv2d":
            cin, cout = int(entry["in_channels"]), int(entry["out_channels"])
            kh, kw = (int(k) for k in entry["kernel"])
            fan_in = kh * kw * cin
            w = (
                _as_f32(entry["weight"], (kh, kw, cin, cout), tag)
                if "weight" in entry
                else draw((kh, kw, cin, cout), fan_in, tag)
            )
            b = (
                _as_f32(entry["bias"], (cout,), tag)
                if "bias" in entry
                else draw((cout,), fan_in, tag)
            )
            layers.append(_Conv2d(w, b))
        elif kind == "relu":
            layers.append(_ReLU())
        elif kind == "sigmoid":
            layers.append(_Sigmoid())
        elif kind == "flatten":
            layers.append(_Flatten())
        elif kind == "bias":
            size = int(entry["size"])
            v = (
                _as_f32(entry["values"], (size,), tag)
                if "values" in entry
                else np.zeros(size, dtype=np.float32)
            )
            layers.append(_Bias(v))
        else:
            raise UnknownLayerKind(f"layers.{idx}: unknown kind {kind!r}")

    return ModelGraph(spec["input_shape"], layers)


def model_to_spec(model: ModelGraph) -> dict:
    """Inverse of build_model, with all parameters inlined."""
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind}
        if layer.kind == "dense":
            entry["in_features"] = int(layer.weight.shape[0])
            entry["out_features"] = int(layer.weight.shape[1])
            entry["weight"] = layer.weight.tolist()
            entry["bias"] = layer.bias.tolist()
        elif layer.kind == "conv2d":
            kh, kw, cin, cout = layer.weight.shape
            entry["in_channels"] = int(cin)
            entry["out_channels"] = int(cout)
            entry["kernel"] = [int(kh), int(kw)]
            entry["weight"] = layer.weight.tolist()
            entry["bias"] = layer.bias.tolist()
        elif layer.kind == "bias":
            entry["size"] = int(layer.values.shape[0])
            entry["values"] = layer.values.tolist()
        layers.append(entry)
    return {"input_shape": list(model.input_shape), "layers": layers}


def _check_input(model, arr):
    if tuple(arr.shape) != model.input_shape:
        raise ShapeMismatch(
            f"input shape {tuple(arr.shape)} != model input {model.input_shape}"
        )


def _forward_batch(model, x):
    """Run a (B, *input_shape) array through the graph, tracking caches."""
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def forward(model: ModelGraph, input: Tensor) -> Tensor:
    """Evaluate the model on one input tensor."""
    arr = input.data if isinstance(input, Tensor) else np.asarray(input, np.float32)
    _check_input(model, arr)
    y, _ = _forward_batch(model, arr[None])
    return Tensor(y[0])


def forward_array(model: ModelGraph, arr: np.ndarray) -> np.ndarray:
    """Evaluate the model on a raw array, preserving its dtype.

    Useful for finite-difference probing at float64.
    """
    arr = np.asarray(arr)
    _check_input(model, arr)
    y, _ = _forward_batch(model, arr[None])
    return y[0]


def forward_batch(model: ModelGraph, arr: np.ndarray) -> np.ndarray:
    """Evaluate a (B, *input_shape) array in one pass; returns (B, *output_shape)."""
    arr = np.asarray(arr)
    if tuple(arr.shape[1:]) != model.input_shape:
        raise ShapeMismatch(
            f"batch sample shape {tuple(arr.shape[1:])} != model input {model.input_shape}"
        )
    y, _ = _forward_batch(model, arr)
    return y


def relu_preactivations(model: ModelGraph, arr: np.ndarray) -> list:
    """Inputs seen by each relu layer, in layer order.

    Finite-difference probes use this to stay away from kink neighborhoods.
    """
    arr = np.asarray(arr)
    _check_input(model, arr)
    x = arr[None]
    pre = []
    for layer in model.layers:
        if layer.kind == "relu":
            pre.append(x[0].copy())
        x, _ = layer.forward(x)
    return pre


def _backward_batch(model, caches, g):
    """Backpropagate an output-space gradient; returns (dx, param grads)."""
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        g, pgrads = model.layers[i].backward(g, caches[i])
        for name, arr in pgrads.items():
            grads[f"layers.{i}.{name}"] = arr
    return g, grads


def input_gradient(model: ModelGraph, input: Tensor, target: int) -> GradientResult:
    """Exact reverse-mode gradient of output[target] w.r.t. every input element."""
    arr = input.data if isinstance(input, Tensor) else np.asarray(input, np.float32)
    _check_input(model, arr)
    if not 0 <= int(target) < model.n_outputs:
        raise TargetOutOfRange(f"target {target} outside [0, {model.n_outputs})")
    y, caches = _forward_batch(model, arr[None])
    seed = np.zeros_like(y)
    seed.reshape(1, -1)[0, int(target)] = 1.0
    dx, _ = _backward_batch(model, caches, seed)
    return GradientResult(
        input_grad=Tensor(dx[0]),
        output_value=float(y.reshape(-1)[int(target)]),
    )


def input_gradient_array(model: ModelGraph, arr: np.ndarray, target: int) -> np.ndarray:
    """Like input_gradient but dtype-preserving and without wrapping."""
    arr = np.asarray(arr)
    _check_input(model, arr)
    if not 0 <= int(target) < model.n_outputs:
        raise TargetOutOfRange(f"target {target} outside [0, {model.n_outputs})")
    y, caches = _forward_batch(model, arr[None])
    seed = np.zeros_like(y)
    seed.reshape(1, -1)[0, int(target)] = 1.0
    dx, _ = _backward_batch(model, caches, seed)
    return dx[0]


def param_gradients(model: ModelGraph, batch, loss: str = "bce_with_logits") -> dict:
    """Mean-over-batch parameter gradients for a logit-producing model.

    ``batch`` is a pair (inputs, targets): inputs of shape (B, *input_shape),
    targets in {0, 1}. The only supported loss applies the sigmoid internally,
    so the graph must end at logits with a single output per sample.
    """
    if loss not in ("bce_with_logits", "binary-cross-entropy-with-logits"):
        raise XckitError(f"unsupported loss {loss!r}")
    inputs, targets = batch
    x = np.asarray(inputs, dtype=np.float32)
    y = np.asarray(targets, dtype=np.float32).reshape(-1)
    if x.shape[0] == 0:
        raise EmptyBatch("empty training batch")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeMismatch(
            f"batch sample shape {tuple(x.shape[1:])} != model input {model.input_shape}"
        )
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("inputs and targets disagree on batch size")
    if model.n_outputs != 1:
        raise ShapeMismatch("bce_with_logits needs a single-output model")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise XckitError("targets must be 0 or 1")

    has_conv = any(layer.kind == "conv2d" for layer in model.layers)
    b = x.shape[0]
    if not has_conv:
        z, caches = _forward_batch(model, x)
        z_flat = z.reshape(b)
        dz = ((1.0 / (1.0 + np.exp(-z_flat)) - y) / b).astype(z.dtype)
        _, grads = _backward_batch(model, caches, dz.reshape(z.shape))
        return {k: v.astype(np.float32) for k, v in grads.items()}

    # conv graphs: accumulate per sample (attribution-scale images; rare path)
    total = {}
    for i in range(b):
        z, caches = _forward_batch(model, x[i : i + 1])
        dz = (1.0 / (1.0 + np.exp(-float(z.reshape(-1)[0]))) - y[i]) / b
        _, grads = _backward_batch(model, caches, np.full_like(z, dz))
        for k, v in grads.items():
            total[k] = total.get(k, 0.0) + v.astype(np.float64)
    return {k: v.astype(np.float32) for k, v in total.items()}
