"""Dense float tensors with tape-based reverse-mode differentiation.

Deliberately small: just enough operator coverage to express a ViT forward
pass, the scale-shift recalibration path and the adaptation losses, with
gradients flowing only into tensors marked trainable. Values are float32 by
default; float64 is supported so the finite-difference oracle can run at a
precision where its own truncation error is negligible.

Broadcasting follows numpy's right-aligned rules for elementwise ops and for
the leading (batch) dims of matmul; anything else is a ShapeError.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

_node_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """One recorded operation: op tag, inputs, and its backward closure.

    Nodes form the tape implicitly through input links; `index` is a global
    creation counter so backward can replay them in strict reverse creation
    order.
    """

    __slots__ = ("op", "inputs", "needs", "backward_fn", "index", "output")

    def __init__(self, op, inputs, needs, backward_fn, output):
        self.op = op
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn
        self.index = next(_node_ids)
        self.output = output


class Tensor:
    """A dense float array, optionally tracked for reverse-mode gradients.

    Trainable tensors (requires_grad=True) must be leaves: they are created
    directly from data, never as op outputs. Op outputs are treated as
    immutable once produced.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        """Internal: wrap op output without the finiteness scan."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.dims}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the underlying values."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        if not math.isfinite(x):
            raise NumericError(f"non-finite scalar operand: {x!r}")
        return Tensor._wrap(np.asarray(x, dtype=dtype))
    return Tensor(x, dtype=dtype)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _common_dtype(*tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ContractError(
                f"mixed tensor dtypes {dt} and {t.data.dtype}; cast explicitly"
            )
    return dt


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            make_backward) -> Tensor:
    """Wrap `out_data`, recording a tape node when any input is tracked.

    `make_backward` is called lazily (only when recording) and must return a
    closure `fn(grad_out, needs) -> tuple[ndarray | None, ...]` aligned with
    `inputs`.
    """
    out = Tensor._wrap(out_data)
    if _grad_enabled and any(_tracked(t) for t in inputs):
        needs = tuple(_tracked(t) for t in inputs)
        out._node = TapeNode(op, inputs, needs, make_backward(), out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.dims, b.dims)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {list(a.dims)} vs {list(b.dims)}") from None


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _common_dtype(a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def make():
        def backward(g, needs):
            return (_unbroadcast(g, a.dims) if needs[0] else None,
                    _unbroadcast(g, b.dims) if needs[1] else None)
        return backward

    return _record("add", (a, b), out, make)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _common_dtype(a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def make():
        def backward(g, needs):
            return (_unbroadcast(g, a.dims) if needs[0] else None,
                    _unbroadcast(-g, b.dims) if needs[1] else None)
        return backward

    return _record("sub", (a, b), out, make)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _common_dtype(a, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def make():
        def backward(g, needs):
            return (_unbroadcast(g * bd, a.dims) if needs[0] else None,
                    _unbroadcast(g * ad, b.dims) if needs[1] else None)
        return backward

    return _record("mul", (a, b), out, make)


def div(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _common_dtype(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def make():
        def backward(g, needs):
            return (_unbroadcast(g / bd, a.dims) if needs[0] else None,
                    _unbroadcast(-g * ad / (bd * bd), b.dims) if needs[1] else None)
        return backward

    return _record("div", (a, b), out, make)


def neg(a: Tensor) -> Tensor:
    def make():
        def backward(g, needs):
            return (-g,)
        return backward

    return _record("neg", (a,), -a.data, make)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast (the only documented batching)."""
    _common_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {list(a.dims)} and {list(b.dims)}")
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {list(a.dims)} vs {list(b.dims)}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2  # [..,m,k] @ [k,n]: one plain GEMM beats the gufunc
    try:
        if flat:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        else:
            out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch dims disagree, {list(a.dims)} vs {list(b.dims)}") from None

    def make():
        def backward(g, needs):
            ga = gb = None
            if flat:
                g2 = g.reshape(-1, g.shape[-1])
                if needs[0]:
                    ga = (g2 @ bd.T).reshape(ad.shape)
                if needs[1]:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g2
                return (ga, gb)
            if needs[0]:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if needs[1]:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return (ga, gb)
        return backward

    return _record("matmul", (a, b), out, make)


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {list(a.dims)} as {list(shape)}")
    out = a.data.reshape(shape)
    src = a.dims

    def make():
        def backward(g, needs):
            return (g.reshape(src),)
        return backward

    return _record("reshape", (a,), out, make)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {list(axes)} invalid for shape {list(a.dims)}")
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def make():
        def backward(g, needs):
            return (np.transpose(g, inverse),)
        return backward

    return _record("transpose", (a,), out, make)


def swap_last(a: Tensor) -> Tensor:
    """Swap the last two axes (the matmul-transpose idiom)."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index(a: Tensor, key) -> Tensor:
    """Basic slicing/integer indexing; gradient scatters back into place."""
    try:
        out = np.ascontiguousarray(a.data[key])
    except IndexError:
        raise ShapeError(f"index {key!r} invalid for shape {list(a.dims)}") from None
    src_shape = a.dims
    src_dtype = a.data.dtype

    def make():
        def backward(g, needs):
            full = np.zeros(src_shape, dtype=src_dtype)
            full[key] = g
            return (full,)
        return backward

    return _record("index", (a,), out, make)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    _common_dtype(*parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat on axis {axis}: incompatible shapes {[list(p.dims) for p in parts]}"
        ) from None
    sizes = [p.dims[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def make():
        def backward(g, needs):
            return tuple(np.ascontiguousarray(piece)
                         for piece in np.split(g, offsets, axis=axis))
        return backward

    return _record("concat", parts, out, make)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"cannot broadcast {list(a.dims)} to {list(shape)}") from None
    src = a.dims

    def make():
        def backward(g, needs):
            return (_unbroadcast(g, src),)
        return backward

    return _record("broadcast", (a,), out, make)


# -- reductions -----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, src_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, src_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(src_shape) for ax in axes)
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
        g = g.reshape(kshape)
    return np.broadcast_to(g, src_shape)


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.dims

    def make():
        def backward(g, needs):
            return (_expand_reduced(g, src, axis, keepdims).copy(),)
        return backward

    return _record("sum", (a,), np.asarray(out), make)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src = a.dims
    count = a.data.size if axis is None else int(
        np.prod([a.dims[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)])
    )

    def make():
        def backward(g, needs):
            return (_expand_reduced(g, src, axis, keepdims) / count,)
        return backward

    return _record("mean", (a,), np.asarray(out), make)


def tensor_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties route the gradient to the first maximum."""
    axis = axis % a.ndim
    out = a.data.max(axis=axis)
    argmax = a.data.argmax(axis=axis)
    src_shape = a.dims
    src_dtype = a.data.dtype

    def make():
        def backward(g, needs):
            full = np.zeros(src_shape, dtype=src_dtype)
            np.put_along_axis(full, np.expand_dims(argmax, axis),
                              np.expand_dims(g, axis), axis)
            return (full,)
        return backward

    return _record("max", (a,), out, make)


# -- nonlinearities ----------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(k * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def make():
        def backward(g, needs):
            dinner = k * (1.0 + 0.134145 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
        return backward

    return _record("gelu", (a,), out, make)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rows along `axis` sum to one."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {list(a.dims)}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def make():
        def backward(g, needs):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)
        return backward

    return _record("softmax", (a,), out, make)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    d = x.dims[-1]
    if gamma.dims != (d,) or beta.dims != (d,):
        raise ShapeError(
            f"layernorm affine params must be shape [{d}], got {list(gamma.dims)} and {list(beta.dims)}"
        )
    _common_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    gdata = gamma.data

    def make():
        def backward(g, needs):
            gx = ggamma = gbeta = None
            lead = tuple(range(g.ndim - 1))
            if needs[1]:
                ggamma = (g * xhat).sum(axis=lead)
            if needs[2]:
                gbeta = g.sum(axis=lead)
            if needs[0]:
                dxhat = g * gdata
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                gx = inv * (dxhat - m1 - xhat * m2)
            return (gx, ggamma, gbeta)
        return backward

    return _record("layernorm", (x, gamma, beta), out, make)


def xlogx(a: Tensor) -> Tensor:
    """Elementwise x*ln(x) with the 0*ln(0) := 0 convention (needs x >= 0)."""
    x = a.data
    if np.any(x < 0):
        raise NumericError("xlogx requires nonnegative input")
    pos = x > 0
    logx = np.zeros_like(x)
    np.log(x, out=logx, where=pos)
    out = np.where(pos, x * logx, 0.0)

    def make():
        def backward(g, needs):
            return (np.where(pos, logx + 1.0, 0.0) * g,)
        return backward

    return _record("xlogx", (a,), out.astype(x.dtype), make)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log requires strictly positive input")
    out = np.log(a.data)
    ad = a.data

    def make():
        def backward(g, needs):
            return (g / ad,)
        return backward

    return _record("log", (a,), out, make)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def make():
        def backward(g, needs):
            return (g * out,)
        return backward

    return _record("exp", (a,), out, make)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt requires nonnegative input")
    out = np.sqrt(a.data)

    def make():
        def backward(g, needs):
            return (g * 0.5 / out,)
        return backward

    return _record("sqrt", (a,), out, make)


def cosine_similarity(f: Tensor) -> Tensor:
    """Pairwise cosine similarity of feature rows: [B,N,d] -> [B,N,N].

    Rows with exactly zero norm yield zero similarity against every row
    (including themselves) and receive zero gradient.
    """
    if f.ndim != 3:
        raise ShapeError(f"cosine_similarity expects [B,N,d], got {list(f.dims)}")
    x = f.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    u = x / safe
    out = np.matmul(u, np.swapaxes(u, -1, -2))

    def make():
        def backward(g, needs):
            gu = np.matmul(g + np.swapaxes(g, -1, -2), u)
            dot = (gu * u).sum(axis=-1, keepdims=True)
            gx = (gu - u * dot) / safe
            return (np.where(zero, 0.0, gx),)
        return backward

    return _record("cosine_similarity", (f,), out, make)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray,
                         label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits [B,C].

    With label smoothing, the target distribution is
    (1 - s) * onehot + s / C.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,C] logits, got {list(logits.dims)}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    y = np.asarray(labels)
    if y.shape != (logits.dims[0],):
        raise ShapeError(f"labels shape {list(y.shape)} does not match batch {logits.dims[0]}")
    x = logits.data
    b, c = x.shape
    if np.any(y < 0) or np.any(y >= c):
        raise ContractError(f"labels out of range 0..{c - 1}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    s = label_smoothing
    target_ll = (1.0 - s) * log_probs[np.arange(b), y] + (s / c) * log_probs.sum(axis=1)
    out = np.asarray(-target_ll.mean(), dtype=x.dtype)
    probs = e / z

    def make():
        def backward(g, needs):
            grad = probs.copy()
            grad[np.arange(b), y] -= 1.0 - s
            grad -= s / c
            return (grad * (g / b),)
        return backward

    return _record("cross_entropy", (logits,), out, make)


# -- backward pass -----------------------------------------------------------------


def backward(loss: Tensor):
    """Populate `.grad` on every trainable tensor reachable from `loss`.

    Visits recorded nodes in strict reverse creation order. Tensors with
    requires_grad=False never accumulate a gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.dims)}")
    root = loss._node
    if root is None:
        return
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append(t._node)
    nodes.sort(key=lambda n: n.index, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g, node.needs)
        for t, gi, needed in zip(node.inputs, input_grads, node.needs):
            if not needed or gi is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            elif t._node is not None:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi
