"""
Reverse-mode automatic differentiation core for AdaFilter.

A Tensor wraps a numpy array. Every differentiable primitive is a Function
subclass with a forward() on raw arrays and a backward() that maps the
upstream gradient to one gradient per input. Function.apply() records the
application on the output tensor; Tensor.backward() walks that record in
reverse topological order.

Shape rules are strict: elementwise primitives require identical shapes and
the only broadcasting patterns are the explicit per-channel ones
(channel_affine, channel_standardize, policy_mix) and the fully connected
row bias (linear).

Primitive summary (channel axis is always axis 1):

    add, sub, mul (Hadamard)     same shape in, same shape out
    scale(x, c)                  python scalar multiply
    matmul(a[N,K], b[K,M])       -> [N,M]
    linear(x[N,I], w[O,I], b[O]) -> [N,O]
    sigmoid, tanh, relu          elementwise
    sum, mean                    -> scalar
    conv2d(x[N,C,H,W], w[O,C,k,k], stride, padding) -> [N,O,H',W']
    max_pool2d(x[N,C,H,W], k, stride)               -> [N,C,H',W']
    global_avg_pool(x[N,C,H,W])                     -> [N,C]
    channel_mean / channel_var(x[N,C,...])          -> [C] (biased variance)
    channel_standardize(x, mean[C], var[C], eps)    -> like x
    channel_affine(x, gamma[C], beta[C])            -> like x
    policy_mix(g[N,C], a, b)                        -> g*a + (1-g)*b per (n, c)
    softmax_cross_entropy(logits[N,K], labels[N])   -> scalar mean loss
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adafilter_errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

# ============================================================================
# Global engine state
# ============================================================================

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def set_default_dtype(dtype: Union[str, type]) -> None:
    """Set the dtype used for new tensors built from non-float data."""
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype {resolved}; use float32 or float64")
    _DEFAULT_DTYPE = resolved.type


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Primitives applied inside this block build no computation record."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ============================================================================
# Tensor and Function
# ============================================================================

class Function:
    """
    Base class for differentiable primitives.

    forward() receives the input arrays (plus keyword settings) and may stash
    intermediates on self for backward(). backward() receives dL/d(output)
    and returns one array (or None) per input, in input order.
    """

    name = "function"

    def __init__(self) -> None:
        self.inputs: tuple["Tensor", ...] = ()
        self.input_data: tuple[np.ndarray, ...] = ()
        self.kwargs: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls()
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            func.inputs = tensors
            func.input_data = tuple(t.data for t in tensors)
            func.kwargs = kwargs
            out._node = func
        return out


class Tensor:
    """
    Dense n-dimensional array that can take part in reverse-mode differentiation.

    Leaf tensors with requires_grad=True accumulate gradients additively in
    .grad across backward passes until zero_grad() is called.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Function] = None

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # -- operators (same-shape only) ----------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- differentiation ----------------------------------------------------

    def backward(self) -> "ComputationRecord":
        """
        Populate .grad on every requires_grad tensor reachable from this scalar.

        Returns the record that was traversed (useful for diagnostics).
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("Loss does not depend on any tensor with requires_grad=True")

        record = ComputationRecord.from_output(self)
        if self.is_leaf:
            seed = np.ones_like(self.data)
            self.grad = seed if self.grad is None else self.grad + seed
            return record
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for entry in reversed(record.entries):
            out = entry.output
            upstream = pending.pop(id(out), None)
            if upstream is None:
                continue
            out.grad = upstream
            in_grads = entry.function.backward(upstream)
            if len(in_grads) != len(entry.function.inputs):
                raise GraphError(
                    f"{entry.op} returned {len(in_grads)} gradients for "
                    f"{len(entry.function.inputs)} inputs"
                )
            for inp, g in zip(entry.function.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise GraphError(f"{entry.op} produced gradient {g.shape} for input {inp.shape}")
                if inp.is_leaf:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    key = id(inp)
                    pending[key] = g if key not in pending else pending[key] + g
        return record


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
           dtype: Optional[Union[str, type]] = None) -> Tensor:
    """Create a tensor, copying data and casting to dtype (or the default float dtype)."""
    array = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(array, requires_grad=requires_grad, name=name)


# ============================================================================
# Computation record
# ============================================================================

@dataclass
class RecordEntry:
    """One primitive application: the function (with its inputs) and its output tensor."""
    function: Function
    output: Tensor

    @property
    def op(self) -> str:
        return self.function.name


@dataclass
class ComputationRecord:
    """Topologically ordered primitive applications leading to one output."""
    entries: list[RecordEntry] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputationRecord":
        order: list[RecordEntry] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node._node is None:
                continue
            if expanded:
                order.append(RecordEntry(node._node, node))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._node.inputs):
                if parent._node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [entry.op for entry in self.entries]

    def replay(self) -> list[str]:
        """
        Re-run every primitive on its saved inputs.

        Returns the ops whose recomputed output differs bitwise from the
        recorded one (empty list means the record replays exactly).
        """
        mismatches = []
        for position, entry in enumerate(self.entries):
            fresh = type(entry.function)()
            again = fresh.forward(*entry.function.input_data, **entry.function.kwargs)
            recorded = entry.output.data
            if again.shape != recorded.shape or again.tobytes() != recorded.tobytes():
                mismatches.append(f"{position}:{entry.op}")
        return mismatches

    def first_nonfinite(self) -> Optional[RecordEntry]:
        for entry in self.entries:
            if not np.all(np.isfinite(entry.output.data)):
                return entry
        return None


# ============================================================================
# Shape helpers
# ============================================================================

def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match")


def _channel_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _check_channel_vector(op: str, x: np.ndarray, v: np.ndarray, label: str) -> None:
    if x.ndim < 2:
        raise ShapeError(f"{op}: input must have a channel axis, got shape {x.shape}")
    if v.shape != (x.shape[1],):
        raise ShapeError(f"{op}: {label} shape {v.shape} does not match channel count of input {x.shape}")


# ============================================================================
# Elementwise primitives
# ============================================================================

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _require_same_shape(self.name, a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _require_same_shape(self.name, a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "hadamard"

    def forward(self, a, b):
        _require_same_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    name = "scale"

    def forward(self, x, factor: float = 1.0):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    name = "tanh"

    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


# ============================================================================
# Reductions and dense algebra
# ============================================================================

class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad.reshape(()), dtype=grad.dtype),)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        count = int(np.prod(self.shape)) if self.shape else 1
        return (np.full(self.shape, grad.reshape(()) / count, dtype=grad.dtype),)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Linear(Function):
    """Fully connected layer: x @ w.T (+ b broadcast over rows)."""
    name = "linear"

    def forward(self, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
        self.x, self.w, self.has_bias = x, w, b is not None
        out = x @ w.T
        return out + b if b is not None else out

    def backward(self, grad):
        dx = grad @ self.w
        dw = grad.T @ self.x
        if self.has_bias:
            return dx, dw, grad.sum(axis=0)
        return dx, dw


# ============================================================================
# Convolution and pooling
# ============================================================================

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation (no filter flip), no bias."""
    name = "conv2d"

    def forward(self, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected input [N,C,H,W] and filters [O,C,k,k], got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels but filters {w.shape} expect {w.shape[1]}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: stride must be positive and padding non-negative (stride={stride}, padding={padding})")
        n, c, h, wd = x.shape
        kh, kw = w.shape[2], w.shape[3]
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d: input {x.shape} with filters {w.shape}, stride {stride}, padding {padding} "
                f"gives non-positive output size {ho}x{wo}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        self.windows, self.w = windows, w
        self.stride, self.padding = stride, padding
        self.x_shape, self.xp_shape = x.shape, xp.shape
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, ho, wo = grad.shape
        kh, kw = self.w.shape[2], self.w.shape[3]
        dw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.w[:, :, i, j], axes=([1], [0]))  # N,Ho,Wo,C
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp), dw


class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x, kernel: int = 2, stride: Optional[int] = None):
        stride = stride or kernel
        if x.ndim != 4:
            raise ShapeError(f"max_pool2d: expected [N,C,H,W], got {x.shape}")
        n, c, h, w = x.shape
        ho = conv_output_size(h, kernel, stride, 0)
        wo = conv_output_size(w, kernel, stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"max_pool2d: input {x.shape} too small for kernel {kernel}")
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        flat = windows.reshape(n, c, ho, wo, kernel * kernel)
        self.argmax = flat.argmax(axis=-1)
        self.kernel, self.stride, self.x_shape = kernel, stride, x.shape
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, ho, wo = grad.shape
        di, dj = np.divmod(self.argmax, self.kernel)
        rows = np.arange(ho)[None, None, :, None] * self.stride + di
        cols = np.arange(wo)[None, None, None, :] * self.stride + dj
        nidx = np.broadcast_to(np.arange(n)[:, None, None, None], grad.shape)
        cidx = np.broadcast_to(np.arange(c)[None, :, None, None], grad.shape)
        dx = np.zeros(self.x_shape, dtype=grad.dtype)
        np.add.at(dx, (nidx, cidx, rows, cols), grad)
        return (dx,)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected [N,C,H,W], got {x.shape}")
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        _, _, h, w = self.x_shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.x_shape).copy(),)


# ============================================================================
# Per-channel statistics (batch normalization building blocks)
# ============================================================================

class ChannelMean(Function):
    name = "channel_mean"

    def forward(self, x):
        if x.ndim < 2:
            raise ShapeError(f"channel_mean: input needs a channel axis, got {x.shape}")
        self.x_shape = x.shape
        self.count = x.size // x.shape[1]
        return x.mean(axis=_channel_axes(x))

    def backward(self, grad):
        full = np.broadcast_to(_per_channel(grad / self.count, len(self.x_shape)), self.x_shape)
        return (full.copy(),)


class ChannelVar(Function):
    """Biased (population) variance per channel."""
    name = "channel_var"

    def forward(self, x):
        if x.ndim < 2:
            raise ShapeError(f"channel_var: input needs a channel axis, got {x.shape}")
        axes = _channel_axes(x)
        self.centered = x - x.mean(axis=axes, keepdims=True)
        self.count = x.size // x.shape[1]
        return (self.centered * self.centered).mean(axis=axes)

    def backward(self, grad):
        scale_ = _per_channel(grad * (2.0 / self.count), self.centered.ndim)
        return (self.centered * scale_,)


class ChannelStandardize(Function):
    """(x - mean[c]) / sqrt(var[c] + eps), differentiable in x, mean and var."""
    name = "channel_standardize"

    def forward(self, x, mean, var, eps: float = 1e-5):
        _check_channel_vector(self.name, x, mean, "mean")
        _check_channel_vector(self.name, x, var, "var")
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.centered = x - _per_channel(mean, x.ndim)
        return self.centered * _per_channel(self.inv_std, x.ndim)

    def backward(self, grad):
        ndim = grad.ndim
        axes = _channel_axes(grad)
        r = _per_channel(self.inv_std, ndim)
        dx = grad * r
        dmean = -dx.sum(axis=axes)
        dvar = (grad * self.centered).sum(axis=axes) * (-0.5) * self.inv_std ** 3
        return dx, dmean, dvar


class ChannelAffine(Function):
    """x * gamma[c] + beta[c]."""
    name = "channel_affine"

    def forward(self, x, gamma, beta):
        _check_channel_vector(self.name, x, gamma, "gamma")
        _check_channel_vector(self.name, x, beta, "beta")
        self.x, self.gamma = x, gamma
        return x * _per_channel(gamma, x.ndim) + _per_channel(beta, x.ndim)

    def backward(self, grad):
        axes = _channel_axes(grad)
        dx = grad * _per_channel(self.gamma, grad.ndim)
        return dx, (grad * self.x).sum(axis=axes), grad.sum(axis=axes)


# ============================================================================
# Policy mixing (per-example, per-channel selection)
# ============================================================================

class PolicyMix(Function):
    """
    out[n, c] = g[n, c] * a[n, c] + (1 - g[n, c]) * b[n, c].

    For a binary g the forward is an exact per-channel select, so the result
    is bit-identical to picking channels from a or b directly.
    """
    name = "policy_mix"

    def forward(self, g, a, b):
        _require_same_shape(self.name, a, b)
        if g.ndim != 2 or g.shape != a.shape[:2]:
            raise ShapeError(f"policy_mix: policy shape {g.shape} does not match [N, C] of {a.shape}")
        self.mask = g.reshape(g.shape + (1,) * (a.ndim - 2))
        self.a, self.b = a, b
        if np.all((g == 0.0) | (g == 1.0)):
            return np.where(self.mask == 1.0, a, b)
        return self.mask * a + (1.0 - self.mask) * b

    def backward(self, grad):
        da = grad * self.mask
        db = grad * (1.0 - self.mask)
        dg = grad * (self.a - self.b)
        if dg.ndim > 2:
            dg = dg.sum(axis=tuple(range(2, dg.ndim)))
        return dg, da, db


# ============================================================================
# Loss
# ============================================================================

class SoftmaxCrossEntropy(Function):
    """Mean softmax cross-entropy over the batch. Labels are integer class ids."""
    name = "softmax_cross_entropy"

    def forward(self, logits, labels: Optional[np.ndarray] = None):
        if logits.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy: expected logits [N,K], got {logits.shape}")
        n, k = logits.shape
        if k < 1:
            raise ShapeError(f"softmax_cross_entropy: class count must be positive, got {k}")
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match batch of {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        self.probs = exp / total
        self.labels = labels.astype(np.int64)
        log_likelihood = shifted[np.arange(n), self.labels] - np.log(total[:, 0])
        return np.asarray(-log_likelihood.mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (grad.reshape(()) / n),)


# ============================================================================
# Functional API
# ============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


hadamard = mul


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, filters, stride=int(stride), padding=int(padding))


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return MaxPool2d.apply(x, kernel=int(kernel), stride=stride)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def channel_mean(x: Tensor) -> Tensor:
    return ChannelMean.apply(x)


def channel_var(x: Tensor) -> Tensor:
    return ChannelVar.apply(x)


def channel_standardize(x: Tensor, mean_: Tensor, var: Tensor, eps: float = 1e-5) -> Tensor:
    return ChannelStandardize.apply(x, mean_, var, eps=float(eps))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ChannelAffine.apply(x, gamma, beta)


def policy_mix(policy: Tensor, a: Tensor, b: Tensor) -> Tensor:
    return PolicyMix.apply(policy, a, b)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels))


# ============================================================================
# Finite-difference oracle
# ============================================================================

@dataclass
class GradCheckReport:
    """Comparison of analytic and central-difference gradients for one parameter."""
    name: str
    max_rel_error: float
    max_abs_error: float
    failing_entries: list[tuple[int, ...]]
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failing_entries


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); entries smaller than floor compare absolutely."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> list[GradCheckReport]:
    """
    Compare backward() gradients of the scalar f() against central differences.

    f is re-evaluated for every perturbed entry, so keep parameters small.
    Raises GraphError if f is not deterministic or step is not positive.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    with no_grad():
        first = f().data.copy()
        second = f().data.copy()
    if first.tobytes() != second.tobytes():
        raise GraphError("finite_diff_check: f() returned different values on repeated evaluation")

    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    reports = []
    for index, (p, a_grad) in enumerate(zip(params, analytic)):
        numeric = np.zeros_like(p.data)
        with no_grad():
            for idx in np.ndindex(p.data.shape):
                original = p.data[idx]
                p.data[idx] = original + step
                plus = float(f().data)
                p.data[idx] = original - step
                minus = float(f().data)
                p.data[idx] = original
                numeric[idx] = (plus - minus) / (2.0 * step)
        rel = relative_error(a_grad, numeric, floor)
        failing = [tuple(int(i) for i in idx) for idx in zip(*np.nonzero(rel > tol))]
        reports.append(GradCheckReport(
            name=p.name or f"param{index}",
            max_rel_error=float(rel.max()) if rel.size else 0.0,
            max_abs_error=float(np.abs(a_grad - numeric).max()) if rel.size else 0.0,
            failing_entries=failing,
            tol=tol,
        ))
        logger.debug(f"grad check {reports[-1].name}: max rel {reports[-1].max_rel_error:.3e}")
    return reports
