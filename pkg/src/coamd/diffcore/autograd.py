"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive returns a new ``Tensor``.  When gradients are enabled and
any input requires them, the output keeps a reference to its inputs and a
closure mapping the output cotangent to input cotangents.  ``backward``
walks that graph once in reverse topological order and then releases it.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")
    # make ndarray (op) Tensor defer to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32 if np.isscalar(x) else None
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(data: np.ndarray, op: str):
    if data.size and not math.isfinite(float(data.sum(dtype=np.float64))):
        raise NumericError(f"{op}: non-finite output (shape {data.shape})")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _broadcast_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):  # non-finite output raises NumericError below
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _make(out, (a,), bw, "gelu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: cannot broadcast {cond.shape}, {a.shape}, {b.shape}") from None
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        z = np.zeros((), g.dtype)
        return (_unbroadcast(np.where(cond, g, z), sa), _unbroadcast(np.where(cond, z, g), sb))

    return _make(out.reshape(shape), (a, b), bw, "where")


# -- linear algebra ----------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- reductions --------------------------------------------------------
def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,), "mean")


def max_(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    ad = a.data
    out = ad.max(axis=axis, keepdims=True)

    def bw(g):
        hit = ad == out
        hit = hit / hit.sum(axis=axis, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (hit * gk,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


# -- shape manipulation ------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Slice / gather.  Boolean-mask and integer-array indices are supported."""
    if isinstance(idx, Tensor):
        raise TypeError("index: indices must be constants, not Tensors")
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"index: {e} for shape {a.shape}") from None
    shape, dtype, basic = a.shape, a.dtype, _is_basic(idx)

    def bw(g):
        gz = np.zeros(shape, dtype)
        if basic:
            gz[idx] = g
        else:
            np.add.at(gz, idx, g)
        return (gz,)

    return _make(np.array(out, copy=basic), (a,), bw, "index")


def masked_select(a: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[: mask.ndim]:
        raise ShapeError(f"masked_select: mask shape {mask.shape} does not prefix tensor shape {a.shape}")
    return index(a, mask)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors,
                 lambda g: tuple(np.squeeze(s, axis) for s in np.split(g, n, axis=axis)), "stack")


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each element ``repeats`` times along ``axis`` (nearest upsampling)."""
    ax = axis % a.ndim
    shape = a.shape

    def bw(g):
        gs = g.reshape(shape[:ax] + (shape[ax], repeats) + shape[ax + 1:])
        return (gs.sum(axis=ax + 1),)

    return _make(np.repeat(a.data, repeats, axis=ax), (a,), bw, "repeat")


def pad_time(a: Tensor, before: int, after: int, axis: int = 1) -> Tensor:
    """Zero-pad along ``axis``."""
    ax = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[ax] = (before, after)
    n = a.shape[ax]
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(before, before + n)
    sl = tuple(sl)
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


# -- neural-network primitives ----------------------------------------
def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 1-D convolution.

    x: (B, L, Cin); w: (K, Cin, Cout); b: (Cout,) -> (B, Lout, Cout)
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    B, L, cin = x.shape
    K, _, cout = w.shape
    Lp = L + 2 * padding
    if Lp < K:
        raise ShapeError(f"conv1d: input length {L} (padded {Lp}) shorter than kernel {K}")
    lout = (Lp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    span = stride * (lout - 1) + 1
    cols = np.concatenate([xp[:, k:k + span:stride, :] for k in range(K)], axis=2)
    wr = w.data.reshape(K * cin, cout)
    out = cols @ wr
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ wr.T).reshape(B, lout, K, cin)
            gxp = np.zeros((B, Lp, cin), g.dtype)
            for k in range(K):
                gxp[:, k:k + span:stride, :] += gcols[:, :, k, :]
            gx = gxp[:, padding:padding + L, :]
        if w.requires_grad:
            gw = (cols.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        if b is not None:
            gb = g.sum(axis=(0, 1))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv1d")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis.  Rows with variance < 1e-12 map to zero."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    live = var >= 1e-12
    inv = np.where(live, 1.0 / np.sqrt(var + eps), 0.0).astype(xd.dtype)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        if gain.shape != (xd.shape[-1],):
            raise ShapeError(f"layer_norm: gain {gain.shape} vs features {xd.shape[-1]}")
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    n = xd.shape[-1]
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        gx = None
        gxhat = g * gain.data if gain is not None else g
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True) / n)
        res = [gx]
        if gain is not None:
            res.append((g * xhat).reshape(-1, n).sum(0))
        if bias is not None:
            res.append(g.reshape(-1, n).sum(0))
        return tuple(res)

    return _make(out, parents, bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax")


def l1_loss(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size
    out = np.asarray(np.abs(d).mean())

    def bw(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return _make(out.astype(a.dtype), (a, b), bw, "l1_loss")


def mse_loss(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size
    out = np.asarray((d * d).mean())

    def bw(g):
        s = d * (2 * g / n)
        return s, -s

    return _make(out.astype(a.dtype), (a, b), bw, "mse_loss")


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1)
        return (gk * xd / safe,)

    return _make(nrm if keepdims else np.squeeze(nrm, axis), (x,), bw, "l2_norm")


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``."""
    return x / (l2_norm(x, axis, keepdims=True) + eps)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a, b = as_tensor(a), _lift(b, as_tensor(a))
    _broadcast_shapes("cosine_similarity", a, b)
    return (normalize(a, axis, eps) * normalize(b, axis, eps)).sum(axis=axis)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    lp = log_softmax(logits, axis=-1)
    return -lp[np.arange(len(targets)), targets].mean()


# -- differentiation ---------------------------------------------------
def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns ``{id(leaf): grad}``.  The graph is released afterwards; a
    second call on the same loss raises ``TapeError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward: tape already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape, loss.dtype)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = np.broadcast_to(pg, p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg.astype(p.dtype, copy=False) if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True
    return leaves


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``inputs``; unused inputs get zeros."""
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    backward(loss)
    out = [np.zeros(t.shape, t.dtype) if t.grad is None else t.grad for t in inputs]
    for t, s in zip(inputs, saved):
        t.grad = s
    return out
