"""Dense-tensor reverse-mode differentiation on top of numpy.

Only the operators the autoencoder needs are provided. Each op records its
parents and a backward closure mapping the output gradient to one gradient
per parent. ``Tensor.backward`` walks the graph in reverse topological order
and accumulates into ``.grad`` of every leaf created with
``requires_grad=True``.

Data is float32 by default. Float64 arrays are kept as float64 so the same
graph can be replayed in double precision for finite-difference checks.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "zero_grads",
    "as_tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "conv1d",
    "relu",
    "batch_mean",
    "batch_var",
    "add_over_time",
    "global_avg_pool",
    "apply_mask",
    "sum_of_squares",
    "concat",
    "log_softmax",
    "softmax",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _to_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return np.ascontiguousarray(data)
    if isinstance(data, (np.float32, np.float64)):
        return np.asarray(data)
    return np.ascontiguousarray(data, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _to_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self._parents else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every grad-enabled leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar-shaped, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = np.asarray(c, dtype=a.dtype)

    def backward(g):
        return (g * c_arr,)

    return _make(a.data * c_arr, (a,), backward, "scale")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand dispatches to ``scale``."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = as_tensor(b, a.dtype)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    e = np.asarray(exponent, dtype=a.dtype)
    out = a.data ** e

    def backward(g):
        return (g * e * a.data ** (e - 1),)

    return _make(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, np.zeros((), a.dtype))

    def backward(g):
        return (g * (out > 0),)

    return _make(out, (a,), backward, "relu")


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask (no gradient flows into the mask)."""
    if mask.shape != a.shape:
        raise ValueError(f"apply_mask: mask shape {mask.shape} != input shape {a.shape}")
    m = mask.astype(a.dtype, copy=False)

    def backward(g):
        return (g * m,)

    return _make(a.data * m, (a,), backward, "mask")


# shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got {a.shape}")

    def backward(g):
        return (g.T,)

    return _make(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


def sum_of_squares(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data * a.data, dtype=a.dtype))

    def backward(g):
        return (2.0 * g * a.data,)

    return _make(out, (a,), backward, "sumsq")


def batch_mean(x: Tensor) -> Tensor:
    """Per-channel mean over batch and time: (B, C, T) -> (1, C, 1)."""
    if x.ndim != 3:
        raise ValueError(f"batch_mean: expected (B, C, T), got {x.shape}")
    n = x.shape[0] * x.shape[2]
    out = x.data.mean(axis=(0, 2), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (x,), backward, "batch_mean")


def batch_var(x: Tensor) -> Tensor:
    """Biased per-channel variance over batch and time: (B, C, T) -> (1, C, 1)."""
    if x.ndim != 3:
        raise ValueError(f"batch_var: expected (B, C, T), got {x.shape}")
    n = x.shape[0] * x.shape[2]
    centered = x.data - x.data.mean(axis=(0, 2), keepdims=True)
    out = (centered * centered).mean(axis=(0, 2), keepdims=True)

    def backward(g):
        # the mean-dependence term vanishes because centered sums to zero
        return (g * (2.0 / n) * centered,)

    return _make(out, (x,), backward, "batch_var")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing time axis: (..., C, T) -> (..., C)."""
    t = x.shape[-1]
    if t == 0:
        raise ValueError("global_avg_pool: time dimension is empty")
    out = x.data.mean(axis=-1)

    def backward(g):
        return (np.broadcast_to(g[..., None] / t, x.shape).copy(),)

    return _make(out, (x,), backward, "gap")


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (n, k) @ (k, m)."""
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def add_over_time(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel (C,) or per-sample (B, C) vector to every timestep of (B, C, T)."""
    if x.ndim != 3:
        raise ValueError(f"add_over_time: expected (B, C, T) input, got {x.shape}")
    if bias.shape == (x.shape[1],):
        b = bias.data[None, :, None]
    elif bias.shape == (x.shape[0], x.shape[1]):
        b = bias.data[:, :, None]
    else:
        raise ValueError(f"add_over_time: bias shape {bias.shape} incompatible with input {x.shape}")

    def backward(g):
        gb = g.sum(axis=2)
        if bias.ndim == 1:
            gb = gb.sum(axis=0)
        return g, gb

    return _make(x.data + b, (x, bias), backward, "add_over_time")


def _conv_padding(kernel: int, dilation: int, padding) -> tuple[int, int]:
    span = dilation * (kernel - 1)
    if padding == "causal":
        return span, 0
    if padding == "same":
        if span % 2:
            raise ValueError(f"conv1d: 'same' padding needs even dilation*(k-1), got {span}")
        return span // 2, span // 2
    left, right = padding
    return int(left), int(right)


def _im2col(xp: np.ndarray, kernel: int, dilation: int, t_out: int) -> np.ndarray:
    b, c, _ = xp.shape
    cols = np.empty((b, kernel, c, t_out), dtype=xp.dtype)
    for i in range(kernel):
        cols[:, i] = xp[:, :, i * dilation : i * dilation + t_out]
    return cols.reshape(b, kernel * c, t_out)


def conv1d(x: Tensor, w: Tensor, dilation: int = 1, padding="same") -> Tensor:
    """Dilated 1-D convolution (cross-correlation form), no bias.

    x: (B, C_in, T); w: (C_out, C_in, K). ``padding`` is ``"same"``
    (d(K-1)/2 zeros per side), ``"causal"`` (d(K-1) zeros on the left) or an
    explicit ``(left, right)`` pair. With causal padding

        out[t] = sum_i w[:, :, i] . x[t - d (K - 1 - i)]

    so tap K-1 sits at the current timestep.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d: expected input (B, C, T) and kernel (O, C, K), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d: input channels {x.shape} do not match kernel {w.shape}")
    if dilation < 1:
        raise ValueError(f"conv1d: dilation must be >= 1, got {dilation}")
    c_out, c_in, k = w.shape
    left, right = _conv_padding(k, dilation, padding)
    t = x.shape[2]
    t_out = t + left + right - dilation * (k - 1)
    if t_out < 1:
        raise ValueError(f"conv1d: input length {t} too short for kernel span {dilation * (k - 1)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if (left or right) else x.data
    w2 = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = np.matmul(w2, _im2col(xp, k, dilation, t_out))

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            cols = _im2col(xp, k, dilation, t_out)
            gw2 = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw2.reshape(c_out, k, c_in).transpose(0, 2, 1)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(g.shape[0], k, c_in, t_out)
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, :, i * dilation : i * dilation + t_out] += gcols[:, i]
            gx = gxp[:, :, left : left + t]
        return gx, gw

    return _make(out, (x, w), backward, "conv1d")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))
