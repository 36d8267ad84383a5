"""Dense float tensors with define-by-run reverse-mode autodiff.

Only the operations the document model needs are provided. Every op records a
closure that maps the upstream gradient to one gradient per parent; the graph
is walked once in reverse topological order by :meth:`Tensor.backward` and
released afterwards.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Iterator, Sequence

import numpy as np

_default_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

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
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is _released:
            raise RuntimeError("graph already released; run the forward pass again")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
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
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = _released
                node.requires_grad = False

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def _released(g):
    raise RuntimeError("graph already released")


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def permute_rows(a: Tensor, order: np.ndarray) -> Tensor:
    """Reorder axis 1 of a ``B x T x ...`` tensor per batch row; ``order[b]`` must be a permutation."""
    order = np.asarray(order, dtype=np.int64)
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        full = np.empty_like(g)
        full[rows, order] = g
        return (full,)

    return _result(a.data[rows, order], (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
            return ga, gb

    return _result(ad @ bd, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere so finite differences behave."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# fused numerical ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable bool, True = keep) zeroes entries.

    A slice with no kept entries yields all zeros instead of NaN.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        xd = np.where(mask, xd, -np.inf)
    peak = np.max(xd, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(xd - peak)
    total = e.sum(axis=axis, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    y = e / safe

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y.astype(x.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm last dim {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids, null_index: int | None = None) -> Tensor:
    """Gather rows of ``table``; rows for ``null_index`` are exact zeros and receive no gradient."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)][0]
        raise IndexError(f"embedding id {int(bad)} out of range for table with {v} rows")
    out = table.data[ids]
    keep = None
    if null_index is not None:
        keep = ids != null_index
        out = out * keep[..., None]

    def backward(g):
        full = np.zeros_like(table.data)
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.shape[1])
        if keep is not None:
            sel = keep.reshape(-1)
            flat_ids, flat_g = flat_ids[sel], flat_g[sel]
        np.add.at(full, flat_ids, flat_g)
        return (full,)

    return _result(out, (table,), backward)


def conv2x2(image: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Non-overlapping 2x2 convolution with stride 2.

    ``image`` is ``c x h x w`` or ``b x c x h x w``; ``kernel`` is ``d x c x 2 x 2``.
    """
    batched = image.ndim == 4
    x = image.data if batched else image.data[None]
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"conv2x2 needs even height and width, got {h}x{w}; resize the image first")
    d = kernel.shape[0]
    if kernel.shape != (d, c, 2, 2):
        raise ShapeError(f"kernel shape {kernel.shape} incompatible with {c}-channel image")
    h2, w2 = h // 2, w // 2
    patches = x.reshape(b, c, h2, 2, w2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(b * h2 * w2, c * 4)
    kmat = kernel.data.reshape(d, c * 4)
    out = patches @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, h2, w2, d).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        g = g if batched else g[None]
        gm = g.transpose(0, 2, 3, 1).reshape(b * h2 * w2, d)
        gk = (gm.T @ patches).reshape(kernel.shape) if kernel.requires_grad else None
        gi = None
        if image.requires_grad:
            gp = (gm @ kmat).reshape(b, h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)
            gi = gp if batched else gp[0]
        grads = [gi, gk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (image, kernel) if bias is None else (image, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    A batch with every row ignored gives a loss of exactly 0 and zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects n x c logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, c = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= c)):
        raise IndexError(f"target outside [0, {c}) and not ignore_index={ignore_index}")
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    ld = logits.data[valid]
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(count)
    tv = targets[valid]
    loss = -logp[rows, tv].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, tv] -= 1.0
        full = np.zeros_like(logits.data)
        full[valid] = p * (g / count)
        return (full,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


class AdamW:
    """AdamW with bias correction, decoupled weight decay and global-norm clipping.

    Weight decay applies to matrices and tables only (``ndim >= 2``); biases and
    layer-norm parameters are not decayed.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 5e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = 1.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.refused = 0
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        """Apply one update. Returns False (and leaves everything untouched) on non-finite grads."""
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.refused += 1
                return False
        if self.clip_norm:
            self.last_grad_norm = clip_grad_norm(self.params, self.clip_norm)
        else:
            self.last_grad_norm = global_grad_norm(self.params)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**t
        corr2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
