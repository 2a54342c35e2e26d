"""Dense tensors with a small define-by-run reverse-mode autodiff engine.

Every operation builds a fresh node that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent.  ``backward`` walks
the graph once in reverse topological order.

Broadcasting follows numpy's trailing-dimension alignment.  The single
exception is :func:`broadcast_mul`, which additionally lets a ``B x H x W``
mask gate ``B x C x H x W`` features by inserting the missing channel axis.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

LOG_EPS = 1e-8

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array of reals with optional gradient tracking.

    ``grad`` is a same-shape buffer that exists exactly when ``requires_grad``
    is set; it starts at zero and accumulates across ``backward`` calls until
    :meth:`zero_grad`.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------
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
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` ancestor of this scalar."""
        if self.data.ndim != 0:
            raise ContractError(f"backward() needs a 0-dimensional loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        self.grad[...] += 1.0
        for node in reversed(order):
            if node._backward is None:
                continue
            upstream = node._grad
            if upstream is None:
                continue
            parent_grads = node._backward(upstream)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad[...] += g

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


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


def _node(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product under trailing-dimension broadcasting."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _node(x.data * x.dtype.type(factor), (x,), lambda g: (g * factor,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument floored at ``eps`` (zero gradient below it)."""
    floored = np.maximum(x.data, eps)
    live = x.data > eps
    return _node(np.log(floored), (x,), lambda g: (np.where(live, g / floored, 0.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _node(np.where(live, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * live,))


def broadcast_mul(x: Tensor, mask: Tensor) -> Tensor:
    """Multiply ``x`` by ``mask``, inserting a channel axis when ``mask`` lacks one.

    A ``B x H x W`` mask against ``B x C x H x W`` features is treated as
    ``B x 1 x H x W``; every other combination uses trailing alignment.
    """
    if x.ndim == 4 and mask.ndim == 3:
        if mask.shape[0] != x.shape[0] or mask.shape[1:] != x.shape[2:]:
            raise DimensionError(f"broadcast_mul: mask {mask.shape} does not match features {x.shape}")
        mask = reshape(mask, (mask.shape[0], 1) + mask.shape[1:])
    return mul(x, mask)


# -- reductions and shape ---------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    lead = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(lead) or any(t.shape[d] != lead[d] for d in range(len(lead)) if d != axis % len(lead)):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {lead} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _node(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Join ``B x C_k`` blocks into ``B x sum(C_k)`` preserving order."""
    batch = {t.shape[0] for t in xs}
    if len(batch) > 1:
        raise DimensionError(f"concat_channels: batch sizes differ {[t.shape for t in xs]}")
    return concat(xs, axis=1)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        parts.append(_slice(x, tuple(index)))
        start += size
    return parts


def _slice(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(x.data[index], (x,), backward)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``x[rows]`` from a matrix; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return _node(x.data[rows], (x,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[b, index[b]]`` for every row ``b`` of a matrix."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _node(x.data[rows, index], (x,), backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``out x in``."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``B x C_in x H x W`` and ``w`` is ``C_out x C_in x k x k``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    batch, c_in, height, width = x.shape
    c_out, w_in, kh, kw = w.shape
    if w_in != c_in:
        raise DimensionError(f"conv2d: kernel {w.shape} expects {w_in} channels, input {x.shape} has {c_in}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (padding {padding})")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: B x C_in x out_h x out_w x kh x kw
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B x out_h x out_w x C_out
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # C_out x C_in x kh x kw
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # B x out_h x out_w x C_in x kh x kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + height, padding:padding + width] if padding else gxp
        return gx, gw

    conv = _node(out, (x, w), backward)
    if bias is None:
        return conv
    return add(conv, reshape(bias, (1, c_out, 1, 1)))


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``B x C x H x W -> B x C``."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"avg_pool_spatial expects B x C x H x W with H, W >= 1, got {x.shape}")
    return mean(x, axis=(2, 3))


# -- probability ------------------------------------------------------------
def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature`` (last axis)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = logits.data / logits.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _node(out, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _node(out, (logits,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    num_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"cross_entropy: label index out of range [0, {num_classes})")
    return scale(mean(pick(log_softmax(logits), labels)), -1.0)


def minmax_normalize(x: Tensor, flat_value: float = 0.5) -> Tensor:
    """Rescale each ``H x W`` map (two trailing axes) to ``[0, 1]``.

    Maps with ``max == min`` become ``flat_value`` everywhere and pass no
    gradient.  Elsewhere the gradient flows through the value and through the
    first arg-min / arg-max positions.
    """
    if x.ndim < 2:
        raise DimensionError(f"minmax_normalize expects at least 2 axes, got {x.shape}")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    lo_idx = flat.argmin(axis=-1)
    hi_idx = flat.argmax(axis=-1)
    lo = np.take_along_axis(flat, lo_idx[..., None], axis=-1)
    hi = np.take_along_axis(flat, hi_idx[..., None], axis=-1)
    span = hi - lo
    live = span > 0
    safe = np.where(live, span, 1.0)
    y = np.where(live, (flat - lo) / safe, flat_value).astype(x.dtype)

    def backward(g):
        g = g.reshape(flat.shape)
        gx = g / safe
        to_lo = (g * (y - 1.0)).sum(axis=-1, keepdims=True) / safe
        to_hi = (g * -y).sum(axis=-1, keepdims=True) / safe
        np.put_along_axis(gx, lo_idx[..., None], np.take_along_axis(gx, lo_idx[..., None], -1) + to_lo, -1)
        np.put_along_axis(gx, hi_idx[..., None], np.take_along_axis(gx, hi_idx[..., None], -1) + to_hi, -1)
        gx = np.where(live, gx, 0.0)
        return (gx.reshape(x.shape),)

    return _node(y.reshape(x.shape), (x,), backward)


# -- gradient checking ------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored.  Entries not listed in
    ``indices`` (when given) are left as NaN in the result.
    """
    result = np.full(t.shape, np.nan) if indices is not None else np.zeros(t.shape)
    positions = indices if indices is not None else np.ndindex(*t.shape)
    for pos in positions:
        original = t.data[pos]
        t.data[pos] = original + step
        up = fn().item()
        t.data[pos] = original - step
        down = fn().item()
        t.data[pos] = original
        result[pos] = (up - down) / (2 * step)
    return result


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max of ``|analytic - numeric| / max(1, |analytic|)`` over finite entries."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    diff = np.abs(analytic[mask] - numeric[mask])
    return float((diff / np.maximum(1.0, np.abs(analytic[mask]))).max())


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``."""
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, gradient_error(a, numerical_grad(fn, t, step)))
    return worst
