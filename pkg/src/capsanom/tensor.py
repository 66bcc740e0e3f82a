"""Dense float64 tensors with reverse-mode gradients.

A :class:`Tensor` wraps a C-contiguous ``float64`` numpy array and records
the operations applied to it. Calling ``backward()`` on a scalar result
replays the record in reverse topological order and accumulates gradients
into every reachable tensor created with ``requires_grad=True``.

The op set is exactly what the capsule network and its baselines need:
valid 2-d convolution, dense layers, relu/sigmoid/softmax, elementwise
arithmetic, reductions, reshapes, vector norms, and a numerically stable
binary cross-entropy. No GPU, no mixed precision, no broadcasting rules
beyond numpy's.

Everything here is deterministic: identical inputs produce bitwise
identical outputs and gradients on the same platform.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from capsanom.errors import ConfigError, UsageError

Array = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend gradient recording, e.g. for scoring a trained model."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a  # ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.ascontiguousarray(a)


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients.

    Attributes:
        data: The underlying numpy array (row-major, float64).
        grad: Gradient of the last backward pass, same shape as ``data``;
            ``None`` until a backward pass reaches this tensor.
        requires_grad: Whether gradients should accumulate here.
        name: Optional identifier, used to key gradient dictionaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    # Make numpy defer mixed ndarray/Tensor arithmetic to our reflected
    # operators instead of element-iterating over the Tensor object.
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ) -> None:
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph construction helpers --------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable parameters.

        Raises:
            UsageError: If this tensor has no recorded computation behind it
                or is not a scalar.
        """
        if self._backward is None and not self._parents:
            raise UsageError(
                "backward called before any forward computation was recorded"
            )
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; the recorded graphs can be a few thousand nodes deep
    # once routing is unrolled over a training batch.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: Array) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        # Copy: some closures hand out views of downstream gradient buffers.
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _lift(a)
    p = float(p)
    out_data = a.data**p

    def backward(g: Array) -> None:
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out_data.size, 1)

    def backward(g: Array) -> None:
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _make(out_data, (a,), backward)


def reshape(a, *shape) -> Tensor:
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    orig = a.shape

    def backward(g: Array) -> None:
        _accumulate(a, g.reshape(orig))

    return _make(out_data, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: Array) -> None:
        _accumulate(a, g.transpose(inverse))

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules for leading axes."""
    a, b = _lift(a), _lift(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g: Array) -> None:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- nonlinearities ----------------------------------------------------------


def relu(a) -> Tensor:
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g: Array) -> None:
        _accumulate(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # Evaluate from the side that keeps exp() small.
    out_data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: Array) -> None:
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), backward)


def vecnorm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` with a zero subgradient at the origin."""
    a = _lift(a)
    out_data = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def backward(g: Array) -> None:
        n = out_data if keepdims else np.expand_dims(out_data, axis)
        ge = g if keepdims else np.expand_dims(g, axis)
        denom = np.where(n == 0.0, 1.0, n)  # n == 0 implies the slice is all-zero
        _accumulate(a, ge * a.data / denom)

    return _make(out_data, (a,), backward)


# -- layers -------------------------------------------------------------------


def _im2col(x: Array, k: int, stride: int) -> Array:
    """Patch matrix of shape [B, H'*W', C*k*k] for a valid convolution."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, C, H', W', k, k]
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def conv2d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) batched convolution.

    Args:
        x: Tensor of shape [B, C_in, H, W].
        kernels: Tensor of shape [C_out, C_in, K, K].
        bias: Optional tensor of shape [C_out].
        stride: Step between windows; trailing rows/columns that do not fit
            a full window are dropped, so H' = (H - K) // stride + 1.

    Returns:
        Tensor of shape [B, C_out, H', W'].
    """
    x, kernels = _lift(x), _lift(kernels)
    if x.ndim != 4:
        raise ConfigError(f"conv2d: input must be 4-d [B,C,H,W], got shape {x.shape}")
    if kernels.ndim != 4:
        raise ConfigError(
            f"conv2d: kernels must be 4-d [C_out,C_in,K,K], got shape {kernels.shape}"
        )
    bsz, c_in, h, w = x.shape
    c_out, c_k, k, k2 = kernels.shape
    if k != k2:
        raise ConfigError(f"conv2d: kernels must be square, got {k}x{k2}")
    if c_k != c_in:
        raise ConfigError(
            f"conv2d: input channels ({c_in}) != kernel input channels ({c_k})"
        )
    if h < k or w < k:
        raise ConfigError(f"conv2d: input {h}x{w} smaller than kernel {k}x{k}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")

    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = _im2col(x.data, k, stride)  # [B, P, C*k*k]
    flat = kernels.data.reshape(c_out, -1)  # [C_out, C*k*k]
    out = cols @ flat.T  # [B, P, C_out]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (c_out,):
            raise ConfigError(
                f"conv2d: bias shape {bias.shape} != output channels ({c_out},)"
            )
        out = out + bias.data
    out_data = np.ascontiguousarray(out.transpose(0, 2, 1).reshape(bsz, c_out, oh, ow))

    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g: Array) -> None:
        g2 = g.reshape(bsz, c_out, oh * ow).transpose(0, 2, 1)  # [B, P, C_out]
        if bias is not None:
            _accumulate(bias, g2.sum(axis=(0, 1)))
        gk = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))  # [C_out, C*k*k]
        _accumulate(kernels, gk.reshape(kernels.shape))
        gcols = np.matmul(g2, flat)  # [B, P, C*k*k]
        gx = np.zeros((bsz, c_in, h, w))
        gc = gcols.reshape(bsz, oh, ow, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
        for ka in range(k):
            for kb in range(k):
                gx[:, :, ka : ka + stride * oh : stride,
                   kb : kb + stride * ow : stride] += gc[:, :, ka, kb]
        _accumulate(x, gx)

    return _make(out_data, parents, backward)


def dense(x, weights, bias) -> Tensor:
    """Affine layer ``x @ weights.T + bias`` over a trailing feature axis.

    Args:
        x: Tensor of shape [..., n].
        weights: Tensor of shape [m, n].
        bias: Tensor of shape [m].
    """
    x, weights, bias = _lift(x), _lift(weights), _lift(bias)
    if weights.ndim != 2:
        raise ConfigError(f"dense: weights must be 2-d [m,n], got shape {weights.shape}")
    m, n = weights.shape
    if x.shape[-1] != n:
        raise ConfigError(
            f"dense: input features ({x.shape[-1]}) != weight columns ({n})"
        )
    if bias.shape != (m,):
        raise ConfigError(f"dense: bias shape {bias.shape} != ({m},)")
    out_data = x.data @ weights.data.T + bias.data

    def backward(g: Array) -> None:
        _accumulate(x, g @ weights.data)
        gflat = g.reshape(-1, m)
        xflat = x.data.reshape(-1, n)
        _accumulate(weights, gflat.T @ xflat)
        _accumulate(bias, gflat.sum(axis=0))

    return _make(out_data, (x, weights, bias), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy computed stably from logits.

    Equivalent to ``-mean(y*log(sigmoid(z)) + (1-y)*log(1-sigmoid(z)))`` but
    never evaluates log of a quantity near zero.
    """
    logits = _lift(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ConfigError(f"bce: logits shape {z.shape} != targets shape {y.shape}")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(per.mean())

    def backward(g: Array) -> None:
        s = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accumulate(logits, g * (s - y) / z.size)

    return _make(out_data, (logits,), backward)


# -- the public single-sample layer surface ----------------------------------


def conv2d_forward(image, kernels, stride: int = 1, bias=None) -> Tensor:
    """Valid convolution of one image: [C_in,H,W] -> [C_out,H',W']."""
    image = _lift(image)
    if image.ndim != 3:
        raise ConfigError(
            f"conv2d_forward: input must be 3-d [C,H,W], got shape {image.shape}"
        )
    out = conv2d(reshape(image, (1,) + image.shape), kernels, bias=bias, stride=stride)
    return reshape(out, out.shape[1:])


def dense_forward(x, weights, bias) -> Tensor:
    """Affine map of one vector: weights @ x + bias."""
    x = _lift(x)
    if x.ndim != 1:
        raise ConfigError(f"dense_forward: input must be 1-d, got shape {x.shape}")
    return dense(x, weights, bias)


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity, ``kind`` is 'relu' or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def backward(loss: Tensor) -> dict[str, Array]:
    """Run a backward pass and collect gradients of all named parameters.

    Args:
        loss: Scalar tensor at the end of a recorded forward computation.

    Returns:
        Mapping from parameter name to its gradient array. Unnamed tensors
        still receive their ``.grad`` attribute but are not in the mapping.
    """
    loss.backward()
    grads: dict[str, Array] = {}
    for node in _toposort(loss):
        if node.requires_grad and node.name is not None and node.grad is not None:
            grads[node.name] = node.grad
    return grads
