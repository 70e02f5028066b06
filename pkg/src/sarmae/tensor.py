"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations applied to tensors that require
gradients record their parents and a local backward rule; :func:`backward`
walks the recorded graph once in reverse topological order and frees it.

Precision is controlled globally: float32 for training, float64 for
finite-difference checks (see :func:`precision`).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphError, ShapeError

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global tensor precision."""
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

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
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def Parameter(data) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _trailing(small: tuple, big: tuple) -> bool:
    while small and small[0] == 1:
        small = small[1:]
    return not small or big[len(big) - len(small):] == small


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    """Only scalars and trailing-suffix shapes broadcast (e.g. [L,D] with [D] or [1,D])."""
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) <= len(sb) and _trailing(sa, sb) or len(sb) <= len(sa) and _trailing(sb, sa):
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed:
            raise GraphError("graph was already freed by a previous backward(); re-run the forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The graph is freed afterwards; a second call on the same loss raises
    :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("graph was already freed by a previous backward(); re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._freed = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI

    def bw(g):
        return (g * (cdf + x * pdf),)

    return _result((x * cdf).astype(x.dtype), (a,), bw, "gelu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def smooth_l1(a, beta: float) -> Tensor:
    """Elementwise smooth-L1 (Huber-style) of ``a``; quadratic inside ``|a| < beta``."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    if beta <= 0:
        return _result(ax, (a,), lambda g: (g * np.sign(x),), "smooth_l1")
    inside = ax < beta
    out = np.where(inside, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _result(out, (a,), lambda g: (g * np.where(inside, x / beta, np.sign(x)),), "smooth_l1")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / max(n, 1))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {orig} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw, "getitem")


def gather(a, index, axis: int = 0) -> Tensor:
    """Select entries of ``a`` along ``axis`` by an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError(f"gather index out of range for axis {axis} of size {a.shape[axis]}")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, index, axis=axis), (a,), bw, "gather")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def pad2d(a, pads: Sequence[int]) -> Tensor:
    """Zero-pad the last two axes by ``(top, bottom, left, right)``."""
    a = as_tensor(a)
    top, bottom, left, right = pads
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    H, W = a.shape[-2:]
    return _result(np.pad(a.data, width), (a,),
                   lambda g: (g[..., top:top + H, left:left + W],), "pad2d")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({D},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(out.astype(xd.dtype), (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, s: int, p: int, what: str) -> int:
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise ShapeError(f"{what}: input {n} with kernel {k}, stride {s}, padding {p} "
                         f"does not give an integer output size")
    return span // s + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C,H,W] with ``weight`` [O,C,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    Ho = _out_size(H, kh, stride, padding, "conv2d")
    Wo = _out_size(W, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=xp.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)
    pshape = xp.shape

    def bw(g):
        g2 = g.reshape(O, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(C, kh, kw, Ho, Wo)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _result(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution of ``x`` [C,H,W] with ``weight`` [C,O,k,k], no padding.

    Output side is ``(H - 1) * stride + k``; kernel 2 with stride 2 doubles it.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    C, H, W = x.shape
    Cw, O, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv_transpose2d: input has {C} channels, weight expects {Cw}")
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    xmat = x.data.reshape(C, H * W)
    wmat = weight.data.reshape(C, O * kh * kw)
    cols = (wmat.T @ xmat).reshape(O, kh, kw, H, W)
    out = np.zeros((O, Ho, Wo), dtype=cols.dtype)
    hs, ws = stride * (H - 1) + 1, stride * (W - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        gcols = np.empty((O, kh, kw, H, W), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, i, j] = g[:, i:i + hs:stride, j:j + ws:stride]
        gcols = gcols.reshape(O * kh * kw, H * W)
        gx = (wmat @ gcols).reshape(C, H, W)
        gw = (xmat @ gcols.T).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _result(out, parents, bw, "conv_transpose2d")


def maxpool2d(x, kernel: int = 1, stride: int = 2) -> Tensor:
    """Max pooling over [C,H,W]; output side ``floor((n - kernel) / stride) + 1``.

    With the default ``kernel=1, stride=2`` this subsamples to ``ceil(n / 2)``.
    """
    x = as_tensor(x)
    C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"maxpool2d: input {H}x{W} smaller than kernel {kernel}")
    Ho, Wo = (H - kernel) // stride + 1, (W - kernel) // stride + 1
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    windows = np.stack([x.data[:, i:i + hs:stride, j:j + ws:stride]
                        for i in range(kernel) for j in range(kernel)], axis=0)
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gx[:, i:i + hs:stride, j:j + ws:stride] += np.where(arg == k, g, 0)
        return (gx,)

    return _result(out, (x,), bw, "maxpool2d")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def scaled_dot_product_attention(q, k, v) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over [..., L, d] inputs."""
    d = q.shape[-1]
    axes = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * float(1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise ``logits`` [N,K]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    N = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(N), labels))
    return -mean(picked)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy; ``softplus(x) - x * y`` per element."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype)
    return mean(softplus(logits) - logits * y)


def mse(a, b) -> Tensor:
    diff = sub(a, b)
    return mean(diff * diff)


def roi_align(feat, boxes, spatial_scale: float, output_size: int = 7,
              sampling: int = 2, aligned: bool = True) -> Tensor:
    """Bilinear RoIAlign of image-space ``boxes`` [R,4] from ``feat`` [C,H,W].

    Returns [R,C,out,out]. Each output cell averages ``sampling**2`` bilinear
    samples; coordinates are never rounded. Differentiable w.r.t. ``feat``.
    """
    from . import kernels

    feat = as_tensor(feat)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.size and np.any((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])):
        raise ShapeError("roi_align: degenerate box (x2 <= x1 or y2 <= y1)")
    C, H, W = feat.shape
    out = kernels.roi_align_forward(feat.data, boxes, spatial_scale, output_size, output_size,
                                    sampling, aligned)

    def bw(g):
        return (kernels.roi_align_backward(np.ascontiguousarray(g), boxes, spatial_scale, H, W,
                                           sampling, aligned),)

    return _result(out, (feat,), bw, "roi_align")
