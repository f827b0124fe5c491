"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive produces a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent.  :meth:`Tensor.backward` orders the reachable graph into a
:class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GeometryError",
    "get_dtype",
    "set_precision",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "matmul",
    "add",
    "mul",
    "concat",
    "reshape",
    "permute",
    "conv2d",
    "conv2d_transpose",
    "maxpool2d",
    "global_avg_pool",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = _DTYPES[os.environ.get("RAUNET_PRECISION", "f32")]
_grad_enabled = True


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    """Select the default float type: ``"f32"`` (training) or ``"f64"``."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    global _dtype
    saved = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = saved


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        """Wrap the result of a primitive.  ``backward`` returns one gradient per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every ``requires_grad`` ancestor of this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return mul(tsum(self, axis, keepdims), 1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> Tensor:
        return permute(self, axes)

    @property
    def T(self) -> Tensor:
        return permute(self, tuple(range(self.ndim))[::-1])

    def relu(self) -> Tensor:
        return relu(self)


class Tape:
    """Topologically ordered record of the ops that produced an output."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
        return cls(order)

    def run(self, out: Tensor, grad: np.ndarray) -> None:
        if not out.requires_grad:
            return
        out.grad = grad if out.grad is None else out.grad + grad
        for node in reversed(self.ops):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {parent.shape}")
                parent.grad = g.astype(parent.data.dtype, copy=True) if parent.grad is None else parent.grad + g
            # release saved intermediates; the graph is single-use
            node._backward = None
            node._parents = ()


# -- constructors -------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "mul")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return Tensor.from_op(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the non-finite loss check
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


# -- reductions and shape ops -------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, tuple(np.atleast_1d(axis)))
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(out, (x,), backward, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out), (x,), backward, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor.from_op(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "matmul")


# -- convolution --------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, N*Ho*Wo)."""
    n, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, -1)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xp[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride].transpose(
                1, 0, 2, 3
            )
    return cols.reshape(c * k * k, -1)


def _col2im(cols: np.ndarray, out: np.ndarray, k: int, stride: int, ho: int, wo: int) -> None:
    """Adjoint of :func:`_im2col`: add (C*k*k, N*Ho*Wo) patches into out (N, C, H, W) in place."""
    n, c = out.shape[:2]
    cols = cols.reshape(c, k, k, n, ho, wo)
    for a in range(k):
        for b in range(k):
            out[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += cols[
                :, a, b
            ].transpose(1, 0, 2, 3)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _channels_first(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)"""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_channels_first(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous (N, C, H, W)"""
    return np.ascontiguousarray(a.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C_in,H,W]`` with ``weight[C_out,C_in,k,k]``, zero padded."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if k > h + 2 * padding or k > w + 2 * padding or ho < 1 or wo < 1:
        raise GeometryError(f"conv2d: kernel {k} with padding {padding} on {h}x{w} gives output {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(cout, -1)
    cols = _im2col(xp, k, stride, ho, wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_channels_first(out, n, ho, wo)

    def backward(g):
        g2 = _channels_first(g)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = wmat.T @ g2
            if k == 1 and stride == 1:
                gxp = _from_channels_first(dcols, n, ho, wo)
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                _col2im(dcols, gxp, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d")


def conv2d_transpose(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same ``weight``.

    ``weight`` has shape ``[C_in, C_out, k, k]`` where ``C_in`` matches ``x``.
    Output extent is ``(H - 1) * stride + k - 2 * padding``.
    """
    if stride < 1:
        raise GeometryError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv2d_transpose: weight {weight.shape} does not match input {x.shape}")
    n, cin, h, w = x.shape
    _, cout, k, _ = weight.shape
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv2d_transpose: kernel {k}, stride {stride}, padding {padding} gives output {ho}x{wo}")

    x2 = _channels_first(x.data)
    wmat = weight.data.reshape(cin, -1)
    full = np.zeros((n, cout, hf, wf), dtype=x.dtype)
    _col2im(wmat.T @ x2, full, k, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, w)
        gx = _from_channels_first(wmat @ gcols, n, h, w) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d_transpose")



def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first row-major maximum."""
    if size != stride:
        raise GeometryError("maxpool2d: only non-overlapping windows (size == stride) are supported")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise GeometryError(f"maxpool2d: extent {h}x{w} is not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (routed,)

    return Tensor.from_op(out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor.from_op(
        out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "global_avg_pool"
    )
