"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

``Tensor`` wraps a float64 numpy array and records, for every operation
applied to it while gradients are enabled, a closure mapping the output
gradient to the gradients of its inputs. ``Tensor.backward()`` walks that
record in reverse topological order and *accumulates* into the ``grad`` of
every leaf that requires it.

Kernels used by the encoder, decoder and CNN stacks (GeLU, layer norm,
softmax, cross-entropy, convolutions, adaptive pooling) are fused ops with
hand-written backward rules. ``grad_check`` verifies any of them against
central finite differences.
"""

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, EmptyInputError, ShapeError, TargetIndexError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-12

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, beam search)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


class Tensor:
    """Shape-typed dense array with a reverse-mode gradient record."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        track = _grad_mode.enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # --- introspection ---

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- reverse pass ---

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(self._topo_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # --- operators ---

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


TensorLike = Tensor | np.ndarray | float | int


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=DTYPE)
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    return out


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise algebra ---


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._from_op(a.data**exponent, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def where(cond: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(np.where(cond, a.data, b.data), (a, b), backward)


# --- reductions and shape ---


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, i] = x[b, index[b, i]]`` for ``x`` of shape [B, S, d]."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: index {index.shape} does not match batch of {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return Tensor._from_op(x.data[rows, index], (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TargetIndexError(
            f"embedding: ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]"
        )

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), backward)


# --- linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched row-major product; leading dims broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(y.reshape(lead + (weight.shape[1],)), parents, backward)


# --- nonlinearities and normalization ---


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._from_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: last axis {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        return gx, ggamma, g2.sum(axis=0)

    return Tensor._from_op(y, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, keep)


# --- loss ---


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-softmax over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [B, K], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows, k = logits.shape
    if targets.shape[0] != rows:
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {rows} logit rows")
    valid = np.ones(rows, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyInputError("empty loss: every target row is ignored")
    kept = targets[valid]
    if kept.min() < 0 or kept.max() >= k:
        raise TargetIndexError(f"cross_entropy: targets must lie in [0, {k}), got {kept.tolist()}")

    z = logits.data[valid]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(count), kept]
    loss = float(np.mean(lse - picked))

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(count), kept] -= 1.0
        full = np.zeros_like(logits.data)
        full[valid] = probs * (float(g) / count)
        return (full,)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


# --- convolution and pooling ---


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation; ``x`` [B, C, H, W], ``weight`` [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    _, _, h, w = x.shape
    kh, kw = weight.shape[2:]
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.einsum("bchwij,ocij->bohw", win, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("ocij,bohw->bchwij", weight.data, g, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gwin[..., i, j]
            gx = gxp[:, :, p : p + h, p : p + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, backward)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """3D cross-correlation; ``x`` [B, C, T, H, W], ``weight`` [O, C, kt, kh, kw]."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} does not match weight {weight.shape}")
    dims = x.shape[2:]
    kernel = weight.shape[2:]
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out_dims = tuple((n + 2 * q - k) // s + 1 for n, q, k, s in zip(dims, padding, kernel, stride))
    to, ho, wo = out_dims
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][:, :, :to, :ho, :wo]
    out = np.einsum("bcthwijk,ocijk->bothw", win, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.einsum("bcthwijk,bothw->ocijk", win, g, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("ocijk,bothw->bcthwijk", weight.data, g, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kernel[0]):
                for j in range(kernel[1]):
                    for k in range(kernel[2]):
                        gxp[:, :, i : i + st * to : st, j : j + sh * ho : sh, k : k + sw * wo : sw] += gwin[
                            ..., i, j, k
                        ]
            gx = gxp[:, :, pt : pt + dims[0], ph : ph + dims[1], pw : pw + dims[2]]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return Tensor._from_op(out, parents, backward)


def adaptive_pool_matrix(size: int, n: int) -> np.ndarray:
    """[n, size] averaging matrix; bin i covers [floor(i*size/n), ceil((i+1)*size/n))."""
    if n <= 0:
        raise ValueError(f"adaptive pooling needs n >= 1, got {n}")
    mat = np.zeros((n, size), dtype=DTYPE)
    for i in range(n):
        start = (i * size) // n
        stop = -((-(i + 1) * size) // n)
        mat[i, start:stop] = 1.0 / (stop - start)
    return mat


def adaptive_avg_pool2d(x: Tensor, n: int) -> Tensor:
    """Average-pool the last two axes of ``x`` [..., h, w] onto an n×n grid."""
    rows = as_tensor(adaptive_pool_matrix(x.shape[-2], n))
    cols = as_tensor(adaptive_pool_matrix(x.shape[-1], n).T)
    return matmul(rows, matmul(x, cols))


# --- gradient verification ---


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _central_difference(f: Callable[[], Tensor], flat: np.ndarray, index: int, h: float) -> float:
    orig = flat[index]
    flat[index] = orig + h
    plus = float(f().data)
    flat[index] = orig - h
    minus = float(f().data)
    flat[index] = orig
    return (plus - minus) / (2.0 * h)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, floor: float = 1e-4) -> float:
    """Compare reverse-mode d f / d x against central differences; returns max relative error."""
    if not x.requires_grad:
        x.requires_grad = True
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=DTYPE)
    with no_grad():
        for i in range(flat.size):
            numeric[i] = _central_difference(lambda: f(x), flat, i, h)
    return relative_error(analytic.reshape(-1), numeric, floor)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng=None,
    floor: float = 1e-4,
) -> dict[str, float]:
    """
    Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    Args:
        loss_fn: Zero-argument closure returning a scalar loss.
        params: Named leaf tensors (requires_grad) read by ``loss_fn``.
        h: Central-difference step.
        max_entries: If set, sample at most this many coordinates per tensor.
        rng: ``Rng`` used for sampling coordinates.
        floor: Denominator floor for the relative error.

    Returns:
        Dict mapping parameter name to its max relative error.
    """
    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.size)) for name, p in params.items()
    }
    for p in params.values():
        p.grad = None

    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            indices: Iterable[int] = range(flat.size)
            if max_entries is not None and flat.size > max_entries:
                picker = rng.child(name) if rng is not None else None
                indices = (
                    sorted(picker.permutation(flat.size)[:max_entries].tolist())
                    if picker is not None
                    else range(max_entries)
                )
            idx = list(indices)
            numeric = np.array([_central_difference(loss_fn, flat, i, h) for i in idx])
            errors[name] = relative_error(analytic[name][idx], numeric, floor)
    return errors
