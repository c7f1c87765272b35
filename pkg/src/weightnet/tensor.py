"""Dense N-d tensors with tape-based reverse-mode differentiation.

Storage is a numpy array in row-major (C) order; image tensors use NCHW.
Every differentiable op records its parents and a closure that maps the
output gradient to input gradients. ``Tensor.backward`` walks that tape once
in reverse topological order, accumulating gradients additively across
fan-out, and then frees it.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import get_default_dtype

__all__ = [
    "DimensionError",
    "Tensor",
    "Parameter",
    "tensor",
    "no_grad",
    "backward",
    "add",
    "mul",
    "matmul",
    "bmm",
    "conv2d",
    "global_avg_pool",
    "sigmoid",
    "relu",
    "reshape",
    "transpose",
    "concat",
    "tsum",
    "mean",
    "batch_norm",
    "cross_entropy",
    "conv_output_size",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "weightnet_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus the tape entry that produced it.

    ``op`` names the producing operation, ``parents`` holds the input tensors
    and ``_backward`` maps an output gradient to one gradient per parent.
    Leaves have no parents; only leaves with ``requires_grad`` keep a
    ``grad`` after :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        for node in order:
            if not node.is_leaf:
                node.parents = ()
                node._backward = None


class Parameter(Tensor):
    """A trainable leaf. Its data is updated in place by optimizers only."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if not self.data.flags.writeable:
            self.data = self.data.copy()

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Run reverse mode from a scalar ``loss``.

    Returns the gradient for each tensor in ``wrt`` (zeros for tensors the
    loss does not depend on). Existing ``grad`` fields on those tensors are
    cleared first so the result reflects this loss only.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt or [])
    for t in wrt:
        t.grad = None
    loss.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), _bw, "mul")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)

    def _bw(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), _bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _bw(g):
        return (g * mask,)

    return _result(data, (x,), _bw, "relu")


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), _bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of (n, p, q) and (n, q, r) stacks."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def _bw(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return _result(data, (a, b), _bw, "bmm")


# shape ops ---------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def _bw(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), _bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def _bw(g):
        return (g.transpose(inverse),)

    return _result(data, (x,), _bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, _bw, "concat")


def _index(x: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    if any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts):
        raise TypeError("only basic (slice/int) indexing is differentiable")
    data = np.array(x.data[index], dtype=x.dtype, copy=True)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(data, (x,), _bw, "index")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# convolution -------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a cross-correlation along one axis (floor division)."""
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, groups: int, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (B, C, oh, ow, kh, kw) -> (g, C/g * kh * kw, B * oh * ow)
    win = win.reshape(B, groups, C // groups, oh, ow, kh, kw)
    return win.transpose(1, 2, 5, 6, 0, 3, 4).reshape(groups, (C // groups) * kh * kw, B * oh * ow)


def conv2d(x: Tensor, w: Tensor, groups: int = 1, stride: int = 1, pad: int = 0) -> Tensor:
    """Grouped 2-d cross-correlation via im2col and one batched matmul.

    ``x`` is (B, C_in, h, w) and ``w`` is (C_out, C_in/groups, kh, kw).
    Output extents follow ``conv_output_size`` (floor semantics).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or Co % groups:
        raise DimensionError(f"conv2d: channels in={C} out={Co} not divisible by groups={groups}")
    if Cg != C // groups:
        raise DimensionError(
            f"conv2d: weight {w.shape} expects {Cg * groups} input channels, input {x.shape} has {C}"
        )
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} or pad={pad}")
    oh, ow = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with pad={pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, groups, kh, kw, stride, oh, ow)
    wm = w.data.reshape(groups, Co // groups, Cg * kh * kw)
    out = np.matmul(wm, cols).reshape(groups, Co // groups, B, oh, ow)
    data = out.transpose(2, 0, 1, 3, 4).reshape(B, Co, oh, ow)

    def _bw(g):
        go = g.reshape(B, groups, Co // groups, oh, ow).transpose(1, 2, 0, 3, 4)
        go = go.reshape(groups, Co // groups, B * oh * ow)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), go).reshape(groups, Cg, kh, kw, B, oh, ow)
            gcols = gcols.transpose(4, 0, 1, 2, 3, 5, 6).reshape(B, C, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw

    return _result(data, (x, w), _bw, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, C) per-channel spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected (B, C, h, w), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    data = x.data.mean(axis=(2, 3))

    def _bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(data, (x,), _bw, "global_avg_pool")


# normalization / loss ----------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Training-mode batch norm over every axis except 1.

    Returns ``(y, batch_mean, batch_var)`` where the statistics are plain
    arrays (biased variance) for running-average bookkeeping.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: affine params {gamma.shape}/{beta.shape} vs {C} channels")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    n = x.size // C
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_b = gamma.data.reshape(bshape)
    data = xhat * g_b + beta.data.reshape(bshape)

    def _bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_b
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    y = _result(data, (x, gamma, beta), _bw, "batch_norm")
    return y, mu.reshape(C), var.reshape(C)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    data = np.asarray(-logp[np.arange(B), labels].mean(), dtype=logits.dtype)

    def _bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _result(data, (logits,), _bw, "cross_entropy")
