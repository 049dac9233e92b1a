"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine covering exactly the operations the
encoder-decoder model needs: matmul, elementwise arithmetic, softmax and
log-softmax, GELU, layer norm, embedding gather, dropout, additive
masking, reshapes and reductions.

Every differentiable op records its inputs and a vector-Jacobian product
closure on the output tensor; ``Tensor.backward`` walks the recorded
graph once in reverse topological order and adds each node's adjoint
into ``.grad``.  Calling backward twice without zeroing grads therefore
doubles them exactly, which is what gradient accumulation relies on.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DropoutRng",
    "no_grad",
    "backward",
    "constant",
    "matmul",
    "concat",
    "gather",
    "pick",
    "softmax",
    "log_softmax",
    "gelu",
    "layer_norm",
    "masked_fill",
    "dropout",
]

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / generation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """A dense float array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- graph traversal ------------------------------------------------

    def backward(self):
        """Populate ``.grad`` of every requires_grad node reachable from here.

        The loss must be a scalar.  Gradients computed in this call are
        added to whatever is already stored in ``.grad``.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        order = _topo_order(self)
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return _add(self, other)
        return _shift(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return _scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _add(self, _scale(other, -1.0))
        return _shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes=None):
        """Permute axes; by default swap the last two."""
        return _transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _mean(self, axis, keepdims)

    def log(self):
        return _log(self)

    def exp(self):
        return _exp(self)


def backward(loss: Tensor) -> None:
    loss.backward()


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS post-order; graphs can be thousands of nodes deep.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[bool, Tensor]] = [(False, root)]
    while stack:
        expanded, node = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((True, node))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((False, parent))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce g back to the given shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _make(data, (a, b), vjp)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), vjp)


def _scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def _shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def _log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


# -- shape ops --------------------------------------------------------------


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.data.ndim < 2:
            raise ValueError("transpose needs at least 2 dimensions")
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), vjp)


# -- reductions --------------------------------------------------------------


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), vjp)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy() / n,)

    return _make(data, (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs 2-d or higher operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.data.shape:
            ga = _sum_to_shape(ga, a.data.shape)
        if gb.shape != b.data.shape:
            gb = _sum_to_shape(gb, b.data.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


# -- indexing ----------------------------------------------------------------


def gather(table: Tensor, indices) -> Tensor:
    """Select rows of ``table``; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    data = table.data[idx]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (table,), vjp)


def pick(x: Tensor, indices) -> Tensor:
    """Per-row selection: out[i] = x[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ValueError(
            f"pick expects a [n, v] tensor and n indices, got {x.data.shape} and {idx.shape}"
        )
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _make(data, (x,), vjp)


# -- nonlinearities ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, not the tanh fit)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_proj = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_proj)
        dgain = _sum_to_shape(g * xhat, gain.data.shape)
        dbias = _sum_to_shape(g, bias.data.shape)
        return dx, dgain, dbias

    return _make(data, (x, gain, bias), vjp)


# -- masking and regularization -------------------------------------------------


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; no gradient flows there."""
    m = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(m.shape, x.data.shape) != x.data.shape:
        raise ValueError(
            f"mask shape {m.shape} does not broadcast to tensor shape {x.data.shape}"
        )
    data = np.where(m, x.data.dtype.type(value), x.data)

    def vjp(g):
        return (np.where(m, 0.0, g),)

    return _make(data, (x,), vjp)


class DropoutRng:
    """Counter-addressed dropout stream.

    Draw number i is a pure function of (seed, i), so a training run replays
    bit-identically from the seed regardless of how tensors are laid out.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def keep_mask(self, shape, p_drop: float) -> np.ndarray:
        g = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return g.random(shape) >= p_drop


def dropout(x: Tensor, p: float, rng: DropoutRng | None = None, train: bool = False) -> Tensor:
    """Bernoulli dropout scaled by 1/(1-p) in train mode; identity in eval."""
    if not train or p <= 0.0:
        return x
    if not 0.0 < p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("train-mode dropout requires a DropoutRng")
    keep = rng.keep_mask(x.data.shape, p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def vjp(g):
        return (g * keep,)

    return _make(data, (x,), vjp)
