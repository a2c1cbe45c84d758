"""Dense tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its output array, its parent tensors and
a closure that maps the output gradient to one gradient per parent.  Calling
``backward`` on a scalar walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_node_ids = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_default_dtype = contextvars.ContextVar("default_dtype", default=np.float64)

LOG_CLAMP = 1e-7


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """A contract of the differentiation machinery was violated."""


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def default_dtype(dtype):
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def get_default_dtype():
    return _default_dtype.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype.get())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    # -- differentiation -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar output, got shape {self.shape}")
        grads = gradients(self)
        for node in _topological_order(self):
            if node.requires_grad and node._backward is None:
                g = grads.get(node.node_id)
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g if node.grad is None else node.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype.get()))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype.get()), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def gradients(root: Tensor) -> dict[int, np.ndarray]:
    """Return gradient buffers of ``root`` keyed by node id, for every reachable node."""
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def masked_zero(x: Tensor, mask) -> Tensor:
    """Zero entries where ``mask`` is false; mask broadcasts against x and is constant."""
    m = np.asarray(mask, dtype=bool)
    keep = np.broadcast_to(m, x.shape)
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0), (x,), lambda g: (np.where(active, g, 0.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of max(x, clamp); the clamped region has zero gradient."""
    inside = x.data > clamp
    safe = np.where(inside, x.data, clamp)
    return _make(np.log(safe), (x,), lambda g: (np.where(inside, g / safe, 0.0),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat rank mismatch: {[t.shape for t in tensors]}")
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def index_select(x: Tensor, index) -> Tensor:
    """Gather with numpy indexing semantics; repeated indices accumulate on backward."""
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        if isinstance(index, np.ndarray) and index.dtype.kind in "iu":
            # row gather: scatter-add through a sparse incidence matrix
            rows = index.reshape(-1)
            flat_g = g.reshape(rows.size, -1)
            incidence = sparse.csr_matrix(
                (np.ones(rows.size, dtype=g.dtype), (rows, np.arange(rows.size))),
                shape=(x.shape[0], rows.size))
            gx += (incidence @ flat_g).reshape(gx.shape)
        elif (isinstance(index, tuple) and len(index) == 2 and index[0] == slice(None)
              and isinstance(index[1], np.ndarray) and _unique(index[1])):
            gx[:, index[1]] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), backward)


def _unique(arr: np.ndarray) -> bool:
    return arr.ndim == 1 and np.unique(arr).size == arr.size


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis, keepdims), 1.0 / float(count))


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry.

    The argmax is a selection, so a surrounding ``SelectionLog`` can freeze it.
    """
    arg = select(lambda: np.argmax(x.data, axis=axis))
    arg_exp = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, arg_exp, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_exp, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward)


def max_over(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum across a set of equally shaped tensors."""
    stacked = concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)
    return reduce_max(stacked, axis=0)


def l2_norm(x: Tensor, axis: int, eps: float = 1e-8) -> Tensor:
    """sqrt(sum(x^2) + eps^2) along ``axis``, kept as a size-1 axis."""
    sq = reduce_sum(multiply(x, x), axis=axis, keepdims=True)
    return sqrt(add(sq, eps * eps))


# ---------------------------------------------------------------------------
# linear algebra and fused neural-network primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gain * xhat + bias``."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} vs last dim {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _make(out, (x, gain, bias), backward)


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = padded[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w)


def _col2im3x3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, 3, 3, h, w)
    padded = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            padded[:, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return padded[:, 1:h + 1, 1:w + 1]


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 cross-correlation of a C_in x H x W map."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 expects CxHxW input and Co x Ci x 3 x 3 weights, "
                             f"got {x.shape} and {w.shape}")
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    if w.shape[1] != c_in:
        raise DimensionError(f"conv3x3 channel mismatch: input {x.shape}, weight {w.shape}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv3x3 bias {b.shape} vs {c_out} output channels")
    cols = _im2col3x3(x.data)
    wmat = w.data.reshape(c_out, c_in * 9)
    out = (wmat @ cols + b.data[:, None]).reshape(c_out, h, wd)

    def backward(g):
        g2 = g.reshape(c_out, h * wd)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = _col2im3x3(wmat.T @ g2, c_in, h, wd)
        return gx, gw, g2.sum(axis=1)

    return _make(out, (x, w, b), backward)


def pooling_bins(length: int, n: int) -> list[tuple[int, int]]:
    """Index ranges [floor(b*L/n), ceil((b+1)*L/n)) of adaptive average pooling."""
    return [((b * length) // n, -((-(b + 1) * length) // n)) for b in range(n)]


def pooling_matrix(length: int, n: int, dtype=np.float64) -> np.ndarray:
    mat = np.zeros((length, n), dtype=dtype)
    for b, (lo, hi) in enumerate(pooling_bins(length, n)):
        mat[lo:hi, b] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool_1d(x: Tensor, n: int, allow_upsample: bool = False) -> Tensor:
    """Average ``x`` (C x L) into ``n`` bins along the last axis."""
    length = x.shape[-1]
    if n < 1 or (n > length and not allow_upsample):
        raise ValueError(f"adaptive_avg_pool_1d needs 1 <= n <= L, got n={n}, L={length}")
    mat = pooling_matrix(length, n, x.data.dtype)
    return _make(x.data @ mat, (x,), lambda g: (g @ mat.T,))


# ---------------------------------------------------------------------------
# frozen non-differentiable selections
# ---------------------------------------------------------------------------

_selection_log = contextvars.ContextVar("selection_log", default=None)


class SelectionLog:
    """Records discrete selections (top-k, masks, argmax) and replays them.

    Used so that finite-difference probes see the same discrete structure as the
    analytic pass, matching the constant-selection backward contract.
    """

    def __init__(self) -> None:
        self.records: list[np.ndarray] = []
        self.cursor = 0

    def fetch(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if self.cursor < len(self.records):
            value = self.records[self.cursor]
        else:
            value = compute()
            self.records.append(value)
        self.cursor += 1
        return value


@contextlib.contextmanager
def frozen_selections(log: SelectionLog):
    log.cursor = 0
    token = _selection_log.set(log)
    try:
        yield log
    finally:
        _selection_log.reset(token)


def select(compute: Callable[[], np.ndarray]) -> np.ndarray:
    log = _selection_log.get()
    return compute() if log is None else log.fetch(compute)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype.get()), requires_grad=requires_grad)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype.get()))


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
