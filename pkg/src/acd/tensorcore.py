"""Dense tensors with reverse-mode autodiff on a per-thread tape.

Every differentiable operation appends its output to the active Graph
(a tape). ``backward`` walks the tape in reverse creation order, which is
a reverse topological order because parents are always created before
children. The tape is meant to be reset once per training step.

All values are checked for NaN/Inf on creation; a non-finite value
anywhere is a hard error rather than a silent poison.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor value or gradient."""


_tls = threading.local()


def _state():
    if not hasattr(_tls, "graph"):
        _tls.graph = Graph()
        _tls.grad_enabled = True
    return _tls


class Graph:
    """Tape of op-output tensors in creation order (a topological order)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def reset(self):
        for node in self.nodes:
            node._parents = ()
            node._vjps = ()
        self.nodes.clear()


def active_graph() -> Graph:
    return _state().graph


def reset_graph():
    active_graph().reset()


class no_grad:
    """Context manager: ops run untracked (inference / finite differences)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def _check_finite(data: np.ndarray, where: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{where}: non-finite values encountered")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants of matching dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op suite")
        return smul(self, 1.0 / float(other))

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    """Create an op output, recording it on the tape when grads are live."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    st = _state()
    track = st.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        out._parents = tuple(p for p, _ in kept)
        out._vjps = tuple(v for _, v in kept)
        st.graph.nodes.append(out)
    else:
        out._parents = ()
        out._vjps = ()
    return out


def _accum(p: Tensor, g: np.ndarray):
    if p.grad is None:
        p.grad = g
    else:
        p.grad = p.grad + g


def backward(loss: Tensor):
    """Populate .grad on every requires_grad ancestor of a scalar loss.

    Gradients accumulate additively across fan-out and across repeated
    backward calls on the same leaves (clear with zero_grad between steps).
    Intermediate node grads are released as soon as they are consumed, so a
    later backward on the same tape never double-propagates them.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (nothing to differentiate)")
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(active_graph().nodes):
        if node.grad is None or not node._parents:
            continue
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            _accum(parent, vjp(g))
        node.grad = None
    # the loss tensor itself keeps no gradient once propagated
    if loss._parents:
        loss.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check("sub", a, b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check("mul", a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def smul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("smul", a.data * s, (a,), (lambda g: g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), (lambda g: g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def slicer(i):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(idx)]

        return vjp

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make("concat", data, tuple(tensors), tuple(slicer(i) for i in range(len(tensors))))


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections != 0:
        raise ShapeError(f"split: axis {axis} of shape {a.shape} not divisible into {sections} parts")
    step = n // sections
    outs = []
    for i in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)

        def vjp(g, idx=idx, shape=a.shape):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return full

        outs.append(_make("split", a.data[idx].copy(), (a,), (vjp,)))
    return outs


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (g - (g * y).sum(axis=axis, keepdims=True)) * y

    return _make("softmax", y, (a,), (vjp,))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape)

    return _make("sum", np.asarray(data), (a,), (vjp,))


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape) / n
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape) / n

    return _make("mean", np.asarray(data), (a,), (vjp,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).sum() / n, dtype=a.dtype)

    def vjp_a(g):
        return (2.0 / n) * d * g

    def vjp_b(g):
        return (-2.0 / n) * d * g

    return _make("mse", out, (a, b), (vjp_a, vjp_b))


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis; optional learnable per-feature gain/bias."""
    n = a.shape[axis]
    if gain is not None and gain.shape != (n,):
        raise ShapeError(f"layer_norm: gain shape {gain.shape} != ({n},)")
    if bias is not None and bias.shape != (n,):
        raise ShapeError(f"layer_norm: bias shape {bias.shape} != ({n},)")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    bshape = [1] * a.ndim
    bshape[axis] = n
    gains = gain.data.reshape(bshape) if gain is not None else None
    out = xhat if gains is None else xhat * gains
    if bias is not None:
        out = out + bias.data.reshape(bshape)

    sum_axes = tuple(i for i in range(a.ndim) if i != axis % a.ndim)

    def vjp_x(g):
        gx = g * gains if gains is not None else g
        t1 = gx.mean(axis=axis, keepdims=True)
        t2 = (gx * xhat).mean(axis=axis, keepdims=True)
        return inv * (gx - t1 - xhat * t2)

    parents: list[Tensor] = [a]
    vjps: list[Callable] = [vjp_x]
    if gain is not None:
        parents.append(gain)
        vjps.append(lambda g: (g * xhat).sum(axis=sum_axes))
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=sum_axes))
    return _make("layer_norm", np.ascontiguousarray(out), tuple(parents), tuple(vjps))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)

    return _make("gelu", out, (a,), (vjp,))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return g * s * (1.0 + a.data * (1.0 - s))

    return _make("silu", out, (a,), (vjp,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape ids.shape + (d,). Gradients scatter-add."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    d = table.shape[1]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return gt

    return _make("embedding", table.data[ids], (table,), (vjp,))


def avg_pool(a: Tensor, axis: int, stride: int) -> Tensor:
    """Non-overlapping mean pooling: window == stride along one axis."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if stride < 1 or n % stride != 0:
        raise ShapeError(f"avg_pool: axis {axis} extent {n} not divisible by stride {stride}")
    shp = a.shape
    split_shape = shp[:axis] + (n // stride, stride) + shp[axis + 1 :]
    data = a.data.reshape(split_shape).mean(axis=axis + 1)

    def vjp(g):
        gg = np.expand_dims(g, axis + 1)
        return np.broadcast_to(gg, split_shape).reshape(shp) / stride

    return _make("avg_pool", data, (a,), (vjp,))


def nn_downsample(a: Tensor, row_axis: int, col_axis: int, step: int) -> Tensor:
    """Nearest-neighbor downsample: keep the top-left element of each step x step cell."""
    row_axis, col_axis = row_axis % a.ndim, col_axis % a.ndim
    if a.shape[row_axis] % step or a.shape[col_axis] % step:
        raise ShapeError(
            f"nn_downsample: axes ({a.shape[row_axis]},{a.shape[col_axis]}) not divisible by {step}"
        )
    idx = [slice(None)] * a.ndim
    idx[row_axis] = slice(0, None, step)
    idx[col_axis] = slice(0, None, step)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return full

    return _make("nn_downsample", a.data[idx].copy(), (a,), (vjp,))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Runs at 64-bit regardless of x's dtype; f must be scalar-valued.
    Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    """
    base = np.asarray(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    st = _state()
    outer = st.graph
    st.graph = Graph()
    try:
        out = f(xt)
        if out.size != 1:
            raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        backward(out)
    finally:
        st.graph.reset()
        st.graph = outer
    analytic = np.zeros_like(base) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base.copy())).item())
            flat[i] = orig - h
            fm = float(f(Tensor(base.copy())).item())
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
