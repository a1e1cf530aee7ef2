"""Dense-matrix layer library with exact manual backpropagation.

Everything is float64. A batch is a 2-D row-major numpy array, one sample
per row; image data is flattened channel-major (C, H, W) within each row.
Layers keep their forward cache and backward never consumes it, so two
different loss gradients can be pushed back through a single forward pass
(the unlearning engine relies on this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shapes do not line up."""


class StateError(RuntimeError):
    """Operation called out of order, e.g. backward before forward."""


@dataclass(frozen=True)
class Tolerances:
    """Single source of truth for the numeric tolerances used everywhere."""

    grad_check_rel: float = 1e-4
    grad_check_step: float = 1e-5
    split_match_abs: float = 1e-10
    projection_abs: float = 1e-10
    unit_norm_abs: float = 1e-12
    prob_row_sum_abs: float = 1e-9
    prob_clamp: float = 1e-12


TOL = Tolerances()


def _as_batch(x, width: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D batch, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise DimensionError(f"expected {width} columns, got {arr.shape[1]}")
    return arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base class: forward caches, backward replays the cache untouched."""

    kind = "layer"
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ([param grads in param order], grad w.r.t. the input batch)."""
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def spec(self) -> dict:
        raise NotImplementedError

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        self.in_shape = (in_dim,)
        self.out_shape = (out_dim,)
        if rng is None:
            self.W = np.zeros((in_dim, out_dim), dtype=DTYPE)
        else:
            self.W = glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim))
        self.b = np.zeros(out_dim, dtype=DTYPE)
        self._x = None

    def forward(self, x):
        x = _as_batch(x, self.in_dim)
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        if self._x is None:
            raise StateError("dense backward before forward")
        dy = _as_batch(dy, self.out_dim)
        if dy.shape[0] != self._x.shape[0]:
            raise DimensionError("upstream batch size does not match the cached forward")
        dW = self._x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.W.T
        return [dW, db], dx

    def params(self):
        return [self.W, self.b]

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Relu(Layer):
    kind = "relu"

    def __init__(self, shape: tuple[int, ...]):
        self.in_shape = tuple(shape)
        self.out_shape = tuple(shape)
        self._x = None

    def forward(self, x):
        x = _as_batch(x, self.in_dim)
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, dy):
        if self._x is None:
            raise StateError("relu backward before forward")
        dy = _as_batch(dy, self.out_dim)
        return [], dy * (self._x > 0.0)

    def spec(self):
        return {"kind": self.kind, "shape": list(self.in_shape)}


class Conv3x3(Layer):
    """3x3 convolution, valid padding, stride 1, on channel-major flat rows."""

    kind = "conv3x3"

    def __init__(self, in_channels: int, out_channels: int, in_hw: tuple[int, int],
                 rng: np.random.Generator | None = None):
        h, w = in_hw
        if h < 3 or w < 3:
            raise DimensionError(f"3x3 valid conv needs height/width >= 3, got {h}x{w}")
        self.in_shape = (in_channels, h, w)
        self.out_shape = (out_channels, h - 2, w - 2)
        fan_in = in_channels * 9
        fan_out = out_channels * 9
        if rng is None:
            self.W = np.zeros((out_channels, in_channels, 3, 3), dtype=DTYPE)
        else:
            self.W = glorot_uniform(rng, fan_in, fan_out, (out_channels, in_channels, 3, 3))
        self.b = np.zeros(out_channels, dtype=DTYPE)
        self._cols = None
        self._batch = 0

    def forward(self, x):
        x = _as_batch(x, self.in_dim)
        n = x.shape[0]
        c, h, w = self.in_shape
        co, h2, w2 = self.out_shape
        img = x.reshape(n, c, h, w)
        patches = np.empty((n, c, 3, 3, h2, w2), dtype=DTYPE)
        for di in range(3):
            for dj in range(3):
                patches[:, :, di, dj] = img[:, :, di:di + h2, dj:dj + w2]
        cols = patches.reshape(n, c * 9, h2 * w2)
        self._cols = cols
        self._batch = n
        wmat = self.W.reshape(co, c * 9)
        out = np.matmul(wmat, cols) + self.b[:, None]
        return out.reshape(n, co * h2 * w2)

    def backward(self, dy):
        if self._cols is None:
            raise StateError("conv backward before forward")
        dy = _as_batch(dy, self.out_dim)
        if dy.shape[0] != self._batch:
            raise DimensionError("upstream batch size does not match the cached forward")
        n = self._batch
        c, h, w = self.in_shape
        co, h2, w2 = self.out_shape
        dout = dy.reshape(n, co, h2 * w2)
        dW = np.einsum("ncp,nkp->ck", dout, self._cols).reshape(self.W.shape)
        db = dout.sum(axis=(0, 2))
        wmat = self.W.reshape(co, c * 9)
        dcols = np.matmul(wmat.T, dout)
        dpatch = dcols.reshape(n, c, 3, 3, h2, w2)
        dimg = np.zeros((n, c, h, w), dtype=DTYPE)
        for di in range(3):
            for dj in range(3):
                dimg[:, :, di:di + h2, dj:dj + w2] += dpatch[:, :, di, dj]
        return [dW, db], dimg.reshape(n, c * h * w)

    def params(self):
        return [self.W, self.b]

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_shape[0],
                "out_channels": self.out_shape[0], "in_hw": [self.in_shape[1], self.in_shape[2]]}


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Odd edges keep a partial window (ceil mode),
    so pooling never collapses a dimension to zero on narrow feature slices."""

    kind = "maxpool2x2"

    def __init__(self, in_shape: tuple[int, int, int]):
        c, h, w = in_shape
        self.in_shape = (c, h, w)
        self.out_shape = (c, (h + 1) // 2, (w + 1) // 2)
        self._arg = None
        self._batch = 0

    def forward(self, x):
        x = _as_batch(x, self.in_dim)
        n = x.shape[0]
        c, h, w = self.in_shape
        _, h2, w2 = self.out_shape
        img = x.reshape(n, c, h, w)
        padded = np.full((n, c, 2 * h2, 2 * w2), -np.inf, dtype=DTYPE)
        padded[:, :, :h, :w] = img
        win = padded.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._arg = arg
        self._batch = n
        return out.reshape(n, c * h2 * w2)

    def backward(self, dy):
        if self._arg is None:
            raise StateError("pool backward before forward")
        dy = _as_batch(dy, self.out_dim)
        if dy.shape[0] != self._batch:
            raise DimensionError("upstream batch size does not match the cached forward")
        n = self._batch
        c, h, w = self.in_shape
        _, h2, w2 = self.out_shape
        dwin = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(dwin, self._arg[..., None], dy.reshape(n, c, h2, w2, 1), axis=-1)
        dpad = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return [], dpad[:, :, :h, :w].reshape(n, c * h * w)

    def spec(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape)}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(int(spec["in_dim"]), int(spec["out_dim"]))
    if kind == "relu":
        return Relu(tuple(spec["shape"]))
    if kind == "conv3x3":
        return Conv3x3(int(spec["in_channels"]), int(spec["out_channels"]),
                       (int(spec["in_hw"][0]), int(spec["in_hw"][1])))
    if kind == "maxpool2x2":
        return MaxPool2x2(tuple(spec["in_shape"]))
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """An ordered stack of layers treated as one value.

    Parameters are exposed as a single flat float64 vector (layer order,
    weights before bias within a layer, C-order ravel), which is the
    currency the training protocol moves around.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise DimensionError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_shape != nxt.in_shape and prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"layer chain mismatch: {prev.kind} out {prev.out_shape} vs {nxt.kind} in {nxt.in_shape}")
        self.layers = list(layers)
        self._forward_done = False

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = _as_batch(x, self.in_dim)
        for layer in self.layers:
            out = layer.forward(out)
        self._forward_done = True
        return out

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Push an output-space gradient back; return (flat param grads, input grad)."""
        if not self._forward_done:
            raise StateError("backward before forward")
        grads_rev = []
        dcur = _as_batch(dy, self.out_dim)
        for layer in reversed(self.layers):
            pgrads, dcur = layer.backward(dcur)
            grads_rev.append(pgrads)
        pieces = []
        for pgrads in reversed(grads_rev):
            for g in pgrads:
                pieces.append(g.ravel())
        flat = np.concatenate(pieces) if pieces else np.zeros(0, dtype=DTYPE)
        return flat, dcur

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params())

    def flat_params(self) -> np.ndarray:
        pieces = [p.ravel() for layer in self.layers for p in layer.params()]
        return np.concatenate(pieces) if pieces else np.zeros(0, dtype=DTYPE)

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.ndim != 1 or vec.size != self.param_count():
            raise DimensionError(f"expected {self.param_count()} params, got shape {vec.shape}")
        pos = 0
        for layer in self.layers:
            for p in layer.params():
                p[...] = vec[pos:pos + p.size].reshape(p.shape)
                pos += p.size

    def clone(self) -> "Network":
        dup = network_from_specs([layer.spec() for layer in self.layers])
        dup.set_flat_params(self.flat_params())
        return dup

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]


def network_from_specs(specs: list[dict]) -> Network:
    return Network([layer_from_spec(s) for s in specs])


def sgd_step(net: Network, grads: np.ndarray, lr: float) -> Network:
    """Plain SGD, in place: theta <- theta - lr * grad. Returns the same net."""
    grads = np.asarray(grads, dtype=DTYPE)
    if grads.ndim != 1 or grads.size != net.param_count():
        raise DimensionError(f"expected {net.param_count()} grads, got shape {grads.shape}")
    pos = 0
    for layer in net.layers:
        for p in layer.params():
            p -= lr * grads[pos:pos + p.size].reshape(p.shape)
            pos += p.size
    return net


def softmax(logits: np.ndarray) -> np.ndarray:
    z = _as_batch(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch; returns (loss, dL/dlogits)."""
    z = _as_batch(logits)
    y = np.asarray(labels)
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise DimensionError(f"labels shape {y.shape} does not match batch of {z.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise DimensionError(f"label out of range for {z.shape[1]} classes")
    p = softmax(z)
    n = z.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), y], TOL.prob_clamp)).mean())
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over batch, sum over features; returns (loss, dL/dpred)."""
    p = _as_batch(pred)
    t = _as_batch(target)
    if p.shape != t.shape:
        raise DimensionError(f"pred shape {p.shape} vs target shape {t.shape}")
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    diff = p - t
    loss = float((diff * diff).sum() / p.shape[0])
    return loss, 2.0 * diff / p.shape[0]


def mlp_network(dims: list[int], rng: np.random.Generator | None = None) -> Network:
    """Dense stack with ReLU between hidden layers and a linear output."""
    if len(dims) < 2:
        raise DimensionError("an MLP needs at least input and output dims")
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(dims) - 2:
            layers.append(Relu((b,)))
    return Network(layers)


def conv_encoder(in_shape: tuple[int, int, int], channels: tuple[int, int] = (32, 64),
                 rng: np.random.Generator | None = None) -> Network:
    """Two conv3x3 + ReLU + pool blocks over a channel-major image slice."""
    layers: list[Layer] = []
    shape = tuple(in_shape)
    for ch in channels:
        conv = Conv3x3(shape[0], ch, (shape[1], shape[2]), rng)
        layers.append(conv)
        layers.append(Relu(conv.out_shape))
        pool = MaxPool2x2(conv.out_shape)
        layers.append(pool)
        shape = pool.out_shape
    return Network(layers)
