"""Minimal layer-level reverse-mode differentiation on numpy arrays.

Every layer caches what it needs during ``forward`` and implements
``backward(dout) -> dx``, accumulating parameter gradients additively.
Parameters are views into :class:`WeightStore` arrays, so several graphs
built over the same store alias the same weights and gradient buffers.

Arrays are NCHW. float32 is the default dtype; layers follow the dtype of
their inputs and parameters, which lets gradient checks run in float64.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an activation or gradient contains NaN or Inf."""


class GraphStateError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

def init_bound(fan_in: int, gain: float = 2.0) -> float:
    """Uniform init half-width giving weight variance gain/fan_in.

    The default gain of 2 suits a following ReLU; callers pick other gains
    to keep activation variance roughly constant through other nonlinearities.
    """
    return math.sqrt(3.0 * gain / max(fan_in, 1))


class WeightStore:
    """Named collection of full-size weight tensors with gradient buffers.

    ``version`` increments whenever weights are modified in place through
    :meth:`bump`, which lets graphs detect a stale forward cache.
    """

    def __init__(self, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self.data: dict[str, np.ndarray] = {}
        self.grad: dict[str, np.ndarray] = {}
        self.version = 0

    def create(self, name: str, shape: tuple[int, ...], fan_in: int,
               rng: np.random.Generator, kind: str = "weight", gain: float = 2.0) -> np.ndarray:
        if name in self.data:
            return self.data[name]
        if any(d <= 0 for d in shape):
            raise ValueError(f"invalid shape {shape} for {name}")
        if kind == "bias":
            arr = np.zeros(shape, dtype=self.dtype)
        else:
            bound = init_bound(fan_in, gain)
            arr = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.data[name] = arr
        self.grad[name] = np.zeros_like(arr)
        return arr

    def zero_grad(self) -> None:
        for g in self.grad.values():
            g.fill(0)

    def bump(self) -> None:
        self.version += 1

    def astype(self, dtype) -> "WeightStore":
        out = WeightStore(dtype)
        for k, v in self.data.items():
            out.data[k] = v.astype(dtype)
            out.grad[k] = np.zeros_like(out.data[k])
        return out

    def __contains__(self, name: str) -> bool:
        return name in self.data

    def __len__(self) -> int:
        return len(self.data)


class Param:
    """A (possibly prefix-sliced) view of one store tensor."""

    __slots__ = ("store", "key", "index")

    def __init__(self, store: WeightStore, key: str, index: tuple[slice, ...] | None = None):
        self.store = store
        self.key = key
        full = store.data[key].shape
        if index is None:
            index = tuple(slice(0, d) for d in full)
        for s, d in zip(index, full):
            if s.stop > d or s.stop <= 0:
                raise ValueError(f"slice {index} out of range for {key} with shape {full}")
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.store.data[self.key][self.index]

    @property
    def grad(self) -> np.ndarray:
        return self.store.grad[self.key][self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(s.stop - s.start for s in self.index)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def accumulate(self, g: np.ndarray) -> None:
        view = self.store.grad[self.key][self.index]
        view += g


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    # Multiply-accumulates of the last forward call, per example.
    macs = 0
    cost_kind = "conv"

    def params(self) -> dict[str, Param]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, dout):
        return dout


class FixedAffine(Layer):
    """Parameter-free ``(x - shift) * scale``; used to centre [0, 1] inputs."""

    def __init__(self, shift: float = 0.5, scale: float = 4.0):
        self.shift, self.scale = shift, scale

    def forward(self, x):
        return (x - x.dtype.type(self.shift)) * x.dtype.type(self.scale)

    def backward(self, dout):
        return dout * dout.dtype.type(self.scale)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class HardSwish(Layer):
    """x * clamp(x + 3, 0, 6) / 6."""

    def forward(self, x):
        self._x = x
        return x * np.clip(x + 3, 0, 6) / 6

    def backward(self, dout):
        x = self._x
        grad = (2 * x + 3) / 6
        grad[x <= -3] = 0
        grad[x >= 3] = 1
        return dout * grad


def hard_swish(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 3, 0, 6) / 6


def _hard_sigmoid(x):
    return np.clip(x + 3, 0, 6) / 6


class PointwiseConv(Layer):
    """1x1 convolution without bias. Weight shape (out, in)."""

    def __init__(self, weight: Param):
        if len(weight.shape) != 2:
            raise ValueError("pointwise weight must be 2-D")
        self.weight = weight

    def params(self):
        return {"weight": self.weight}

    def forward(self, x):
        w = self.weight.data
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"pointwise conv expects {w.shape[1]} channels, got shape {x.shape}")
        b, c, h, wd = x.shape
        self._x = x.reshape(b, c, h * wd)
        self.macs = h * wd * w.shape[0] * w.shape[1]
        return np.matmul(w, self._x).reshape(b, w.shape[0], h, wd)

    def backward(self, dout):
        x = self._x
        w = self.weight.data
        b, o, h, wd = dout.shape
        d = dout.reshape(b, o, h * wd)
        self.weight.accumulate(np.matmul(d, x.transpose(0, 2, 1)).sum(axis=0))
        return np.matmul(w.T, d).reshape(b, w.shape[1], h, wd)


@lru_cache(maxsize=None)
def _shift_basis(h: int, w: int, k: int, stride: int, dtype: str) -> np.ndarray:
    """0/1 taps: row u*k+v marks which (input pixel, output pixel) pairs tap (u, v) links."""
    p = k // 2
    ho, wo = -(-h // stride), -(-w // stride)
    basis = np.zeros((k, k, h * w, ho * wo), dtype=dtype)
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    out_idx = (oi * wo + oj).ravel()
    for u in range(k):
        for v in range(k):
            y = (oi * stride + u - p).ravel()
            x = (oj * stride + v - p).ravel()
            ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            basis[u, v, y[ok] * w + x[ok], out_idx[ok]] = 1
    basis.setflags(write=False)
    return basis.reshape(k * k, -1)


def depthwise_reference(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Plain shifted-slice depthwise convolution, used to cross-check the kernels."""
    c, k, _ = w.shape
    b, _, h, wd = x.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += w[None, :, i, j, None, None] * xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out


class DepthwiseConv(Layer):
    """Per-channel k x k convolution, 'same' zero padding, stride 1 or 2.

    Weight shape (channels, k, k). Output size is ceil(H / stride).
    """

    def __init__(self, weight: Param, stride: int = 1):
        shape = weight.shape
        if len(shape) != 3 or shape[1] != shape[2] or shape[1] % 2 == 0:
            raise ValueError(f"depthwise kernel must be (C, k, k) with k odd, got {shape}")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.weight = weight
        self.stride = stride

    def params(self):
        return {"weight": self.weight}

    def forward(self, x):
        w = self.weight.data
        c, k, _ = w.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"depthwise conv expects {c} channels, got shape {x.shape}")
        b, _, h, wd = x.shape
        s = self.stride
        ho, wo = -(-h // s), -(-wd // s)
        # each channel's convolution is a dense (H*W, Ho*Wo) Toeplitz matrix
        basis = _shift_basis(h, wd, k, s, np.result_type(x, w).str)
        toeplitz = (w.reshape(c, k * k) @ basis).reshape(c, h * wd, ho * wo)
        xt = x.reshape(b, c, h * wd).transpose(1, 0, 2)
        self._cache = (xt, toeplitz, basis, (b, c, h, wd))
        self.macs = ho * wo * c * k * k
        return np.matmul(xt, toeplitz).transpose(1, 0, 2).reshape(b, c, ho, wo)

    def backward(self, dout):
        xt, toeplitz, basis, (b, c, h, wd) = self._cache
        k = self.weight.shape[1]
        d = dout.reshape(b, c, -1).transpose(1, 0, 2)
        dx = np.matmul(d, toeplitz.transpose(0, 2, 1))
        dtoeplitz = np.matmul(xt.transpose(0, 2, 1), d)
        self.weight.accumulate((dtoeplitz.reshape(c, -1) @ basis.T).reshape(c, k, k))
        return dx.transpose(1, 0, 2).reshape(b, c, h, wd)


class GlobalAveragePool(Layer):
    """(B, C, H, W) -> (B, C)."""

    cost_kind = "pool"

    def forward(self, x):
        self._shape = x.shape
        self.macs = x.shape[1] * x.shape[2] * x.shape[3]
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._shape).copy()


class Dense(Layer):
    """y = x W^T + b with W shape (out, in)."""

    cost_kind = "dense"

    def __init__(self, weight: Param, bias: Param | None = None):
        self.weight = weight
        self.bias = bias

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x):
        w = self.weight.data
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"dense expects {w.shape[1]} features, got shape {x.shape}")
        self._x = x
        self.macs = w.shape[0] * w.shape[1]
        out = x @ w.T
        if self.bias is not None:
            out = out + self.bias.data
        return out

    def backward(self, dout):
        self.weight.accumulate(dout.T @ self._x)
        if self.bias is not None:
            self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.data


class SqueezeExcite(Layer):
    """Channel gating: pool -> dense -> relu -> dense -> hard-sigmoid -> scale."""

    cost_kind = "se"

    def __init__(self, w1: Param, b1: Param, w2: Param, b2: Param):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        if w1.shape[1] != w2.shape[0] or w1.shape[0] != w2.shape[1]:
            raise ValueError("inconsistent squeeze-excite shapes")

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x):
        c = self.w1.shape[1]
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"squeeze-excite expects {c} channels, got shape {x.shape}")
        b, _, h, w = x.shape
        pooled = x.mean(axis=(2, 3))
        z1 = pooled @ self.w1.data.T + self.b1.data
        a1 = np.maximum(z1, 0)
        z2 = a1 @ self.w2.data.T + self.b2.data
        gate = _hard_sigmoid(z2)
        self._cache = (x, pooled, z1, a1, z2, gate)
        r = self.w1.shape[0]
        # pooling + two dense layers + gating multiply
        self.macs = c * h * w + 2 * c * r + c * h * w
        return x * gate[:, :, None, None]

    def backward(self, dout):
        x, pooled, z1, a1, z2, gate = self._cache
        h, w = x.shape[2], x.shape[3]
        dx = dout * gate[:, :, None, None]
        dgate = np.einsum("bchw,bchw->bc", dout, x)
        dz2 = dgate * ((z2 > -3) & (z2 < 3)) / 6
        self.w2.accumulate(dz2.T @ a1)
        self.b2.accumulate(dz2.sum(axis=0))
        da1 = dz2 @ self.w2.data
        dz1 = da1 * (z1 > 0)
        self.w1.accumulate(dz1.T @ pooled)
        self.b1.accumulate(dz1.sum(axis=0))
        dpooled = dz1 @ self.w1.data
        dx += dpooled[:, :, None, None] / (h * w)
        return dx


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def iter_layers(self):
        for layer in self.layers:
            if isinstance(layer, Sequential):
                yield from layer.iter_layers()
            else:
                yield layer


class Residual(Sequential):
    """x + body(x); shapes must agree."""

    def forward(self, x):
        out = super().forward(x)
        if out.shape != x.shape:
            raise ValueError("residual body changed the shape")
        return x + out

    def backward(self, dout):
        return dout + super().backward(dout)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (B, C) with one label per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

class ComputeGraph:
    """A fixed feed-forward network over a weight store.

    ``input_shape`` is (C, H, W). Parameter names are stable for a given
    construction; ``parameters()`` returns views that alias the store.
    """

    def __init__(self, body: Sequential, input_shape: tuple[int, ...], store: WeightStore):
        self.body = body
        self.input_shape = tuple(input_shape)
        self.store = store
        self._forward_version: int | None = None

    def parameters(self) -> dict[str, Param]:
        return self.body.params()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input (B, {self.input_shape}), got {x.shape}")
        out = _check_finite(self.body.forward(x), "forward activations")
        self._forward_version = self.store.version
        return out

    def backward(self, loss_grad: np.ndarray) -> np.ndarray:
        if self._forward_version is None:
            raise GraphStateError("backward called before forward")
        if self._forward_version != self.store.version:
            raise GraphStateError("weights changed since the last forward")
        dx = self.body.backward(np.asarray(loss_grad))
        for name, p in self.parameters().items():
            _check_finite(p.grad, f"gradient of {name}")
        return dx

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad.fill(0)

    def layers(self) -> list[Layer]:
        return list(self.body.iter_layers())

    def runtime_macs(self) -> dict[str, int]:
        """MACs per example by cost kind, as measured during the last forward."""
        out: dict[str, int] = {}
        for layer in self.layers():
            if layer.macs:
                out[layer.cost_kind] = out.get(layer.cost_kind, 0) + int(layer.macs)
        return out


# ---------------------------------------------------------------------------
# Scalar reverse-mode values, used for the loss-balancing objective
# ---------------------------------------------------------------------------

class Scalar:
    """Tiny scalar autodiff node: value, gradient and local derivatives."""

    __slots__ = ("value", "grad", "_parents")

    def __init__(self, value: float, parents: tuple = ()):
        self.value = float(value)
        self.grad = 0.0
        self._parents = parents  # (node, local derivative) pairs

    def __add__(self, other):
        other = other if isinstance(other, Scalar) else Scalar(other)
        return Scalar(self.value + other.value, ((self, 1.0), (other, 1.0)))

    __radd__ = __add__

    def __mul__(self, other):
        other = other if isinstance(other, Scalar) else Scalar(other)
        return Scalar(self.value * other.value, ((self, other.value), (other, self.value)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Scalar):
            inv = 1.0 / other.value
            return Scalar(self.value * inv, ((self, inv), (other, -self.value * inv * inv)))
        return self * (1.0 / other)

    def exp(self):
        v = math.exp(self.value)
        return Scalar(v, ((self, v),))

    def square(self):
        return Scalar(self.value ** 2, ((self, 2 * self.value),))

    def backward(self) -> None:
        order, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent, _ in node._parents:
                visit(parent)
            order.append(node)

        visit(self)
        self.grad = 1.0
        for node in reversed(order):
            for parent, local in node._parents:
                parent.grad += local * node.grad
