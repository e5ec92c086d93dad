"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure that pushes the output gradient back into them.  ``backward`` orders
the recorded graph topologically and replays the closures in reverse, so each
operation runs exactly once and gradients from several consumers add up.

The default float width is 32 bits.  Gradient checks switch the whole engine
to 64 bits with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine's float width (``np.float64`` for gradchecks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating) or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never updated in place, so aliasing an upstream buffer is safe
        g = np.asarray(g, dtype=self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through everything it was built from."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = computation_tape(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def computation_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of every grad-tracking node feeding ``root``."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if not _GRAD_ENABLED:
        return out
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: x._accumulate(g * inside))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        x._accumulate(g / (1.0 + np.exp(-x.data)))

    return _result(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _result(out, (x,), backward)


class DropoutStream:
    """Counter-based dropout masks: call ``k`` uses Philox(key=seed, counter=k).

    The mask for a given call depends only on the seed and the call index, so a
    single-threaded run replays bit-identically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.calls = 0

    def uniform(self, shape) -> np.ndarray:
        bitgen = np.random.Philox(key=self.seed, counter=self.calls)
        self.calls += 1
        return np.random.Generator(bitgen).random(shape)


def dropout(x: Tensor, p: float, train: bool, stream: DropoutStream | None) -> Tensor:
    if not train or p == 0.0:
        return x
    if stream is None:
        raise ValueError("dropout in train mode needs a DropoutStream")
    keep = (stream.uniform(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inverse)))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(x: Tensor, index) -> Tensor:
    """``x[index]`` for basic or advanced numpy indices; repeated indices accumulate."""
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)
    rows = not basic and isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu"

    def backward(g):
        if basic:
            full = np.zeros_like(x.data)
            full[index] = g
        elif rows:
            flat = scatter_rows(index, g.reshape(len(index), -1), x.shape[0])
            full = flat.reshape(x.shape)
        else:
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
        x._accumulate(full)

    return _result(out, (x,), backward)


def scatter_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Dense (n_rows, d) array with ``values`` summed into rows ``idx``."""
    full = np.zeros((n_rows, values.shape[-1]), dtype=values.dtype)
    if len(idx) == 0:
        return full
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate([[True], sidx[1:] != sidx[:-1]]))
    full[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return full


def embedding_gather(table: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``table`` at integer ``idx`` (any shape); backward scatter-adds."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def backward(g):
        table._accumulate(scatter_rows(idx.reshape(-1), g.reshape(-1, table.shape[-1]), table.shape[0]))

    return _result(out, (table,), backward)


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def log_sum_exp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m)
    total = s.sum(axis=axis, keepdims=True)
    out = np.log(total) + m

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(gk * s / total)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True)
                       - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _result(out, (x, gain, bias), backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Cosine along the last axis, broadcasting leading axes; zero vectors give 0."""
    a, b = as_tensor(a), as_tensor(b)
    na = np.sqrt((a.data * a.data).sum(-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(-1, keepdims=True))
    safe_a = np.where(na > eps, na, 1.0)
    safe_b = np.where(nb > eps, nb, 1.0)
    ua = np.where(na > eps, a.data / safe_a, 0.0)
    ub = np.where(nb > eps, b.data / safe_b, 0.0)
    out = (ua * ub).sum(-1)

    def backward(g):
        ge = g[..., None]
        c = out[..., None]
        if a.requires_grad:
            a._accumulate(_unbroadcast(ge * (ub - c * ua) / safe_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(ge * (ua - c * ub) / safe_b, b.shape))

    return _result(out, (a, b), backward)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row categorical cross-entropy; ``targets`` holds class indices."""
    targets = np.asarray(targets)
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"class index out of range for {n_classes} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        logits._accumulate(g[..., None] * p)

    return _result(out, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, coords: Iterable | None = None,
                   step: float = 1e-5) -> tuple[np.ndarray, list]:
    """Central differences of scalar ``fn()`` wrt entries of ``x`` (mutated in place)."""
    flat = x.data.reshape(-1)
    coords = list(range(flat.size)) if coords is None else list(coords)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        up = float(fn().data)
        flat[c] = orig - step
        down = float(fn().data)
        flat[c] = orig
        out[j] = (up - down) / (2 * step)
    return out, coords


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and central differences over ``inputs``.

    ``max_coords`` subsamples coordinates per input for large parameter tensors.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, ga in zip(inputs, analytic):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
            nz = np.flatnonzero(ga)
            if nz.size:
                coords = np.union1d(coords[: max_coords // 2],
                                    rng.choice(nz, size=min(nz.size, max_coords // 2), replace=False))
        num, used = numerical_grad(fn, t, coords, step)
        worst = max(worst, relative_error(ga.reshape(-1)[used], num))
    return worst


def l2_normalize(x: Tensor) -> Tensor:
    """Rows scaled to unit norm along the last axis; zero rows stay zero."""
    n = np.sqrt((x.data * x.data).sum(-1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    u = np.where(n > 0, x.data / safe, 0.0)

    def backward(g):
        x._accumulate((g - u * (g * u).sum(-1, keepdims=True)) / safe)

    return _result(u, (x,), backward)
