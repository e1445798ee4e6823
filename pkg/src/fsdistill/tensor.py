"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every operation builds a fresh graph node linking the output to its parents
together with a closure that turns the output gradient into parent
gradients. `backward` walks the graph once in reverse topological order and
deposits gradients on the requires-grad leaves. Graphs are never reused:
each forward pass records a new tape.

Conventions enforced throughout:
  * float64 only; any non-finite value produced by a forward op raises
    NumericalError immediately,
  * no broadcasting beyond scalar-with-tensor; shape alignment between
    tensors is always explicit,
  * calling backward when a reachable leaf already holds a gradient raises
    GradientStateError (gradients must be cleared via zero_grad between
    passes).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import relations


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (e.g. log of a non-positive)."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class GradientStateError(RuntimeError):
    """backward misuse: stale gradients, non-scalar root, detached root."""


Array = np.ndarray
_VjpFn = Callable[[Array], tuple]


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] | None = None
        self._vjp: _VjpFn | None = None

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
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self._parents is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, no graph attachment, no gradient requirement."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, "
                f"leaf={self.is_leaf()})")

    # Operator sugar: tensor-tensor ops demand identical shapes, python
    # scalars are the single permitted broadcast.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _result(data: Array, op: str, parents: tuple[Tensor, ...],
            vjp: _VjpFn) -> Tensor:
    """Wrap an op output, recording the node only when a parent needs grads."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = None
        out._vjp = None
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, "div", (a, b),
                   lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data + c, "add_scalar", (a,), lambda g: (g,))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Dispatch form of the binary same-shape ops: op in {add, sub, mul}."""
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires nonnegative inputs")
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,),
                   lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    lo, hi = float(lo), float(hi)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _result(out, "clamp", (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _result(out, "relu", (a,), lambda g: (g * (a.data > 0.0),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents {a.shape} x {b.shape} differ")
    return _result(a.data @ b.data, "matmul", (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x [n, d_in] @ w [d_in, d_out] + b [d_out]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("linear expects x [n,k], w [k,m], b [m]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.data @ w.data
    out += b.data
    return _result(out, "linear", (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product over identical leading dims: [...,m,k]@[...,k,n]."""
    if a.ndim < 3 or b.ndim < 3:
        raise ShapeError("matmul_batched expects >=3-D operands")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul_batched: shapes {a.shape} x {b.shape} differ")
    return _result(a.data @ b.data, "matmul_batched", (a, b),
                   lambda g: (g @ np.swapaxes(b.data, -1, -2),
                              np.swapaxes(a.data, -1, -2) @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _result(np.ascontiguousarray(a.data.T), "transpose", (a,),
                   lambda g: (g.T,))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(np.transpose(a.data, axes)),
                   "permute", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result(np.ascontiguousarray(a.data.reshape(shape)),
                   "reshape", (a,), lambda g: (g.reshape(old),))


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("trace expects a square matrix")
    n = a.shape[0]
    return _result(np.trace(a.data), "trace", (a,),
                   lambda g: (g * np.eye(n),))


def l2_norm(v: Tensor) -> Tensor:
    if v.ndim != 1:
        raise ShapeError("l2_norm expects a vector")
    out = np.linalg.norm(v.data)

    def vjp(g):
        if out == 0.0:
            return (np.zeros_like(v.data),)
        return (g * v.data / out,)

    return _result(np.asarray(out), "l2_norm", (v,), vjp)


# ---------------------------------------------------------------------------
# reductions


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.asarray(a.data.mean()), "mean", (a,),
                   lambda g: (np.full(a.shape, float(g) / n),))


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), "sum", (a,),
                   lambda g: (np.full(a.shape, float(g)),))


def sum_last2(a: Tensor) -> Tensor:
    """Sum over the trailing two axes: [..., n, m] -> [...]."""
    if a.ndim < 2:
        raise ShapeError("sum_last2 expects >=2-D input")
    out = a.data.sum(axis=(-1, -2))
    return _result(out, "sum_last2", (a,),
                   lambda g: (np.broadcast_to(g[..., None, None], a.shape).copy(),))


# ---------------------------------------------------------------------------
# softmax family


def _softmax_last(x: Array, tau: float) -> Array:
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax along the last axis, max-subtraction stabilised."""
    if tau <= 0:
        raise DomainError("softmax temperature must be positive")
    if a.ndim < 1:
        raise ShapeError("softmax_rows expects at least 1-D input")
    y = _softmax_last(a.data, tau)

    def vjp(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((y * (g - dot)) / tau,)

    return _result(y, "softmax_rows", (a,), vjp)


def log_softmax_rows(a: Tensor, tau: float = 1.0) -> Tensor:
    if tau <= 0:
        raise DomainError("softmax temperature must be positive")
    z = a.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def vjp(g):
        gsum = np.sum(g, axis=-1, keepdims=True)
        return ((g - y * gsum) / tau,)

    return _result(out, "log_softmax_rows", (a,), vjp)


# ---------------------------------------------------------------------------
# structured ops for the encoder


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row gather: table [v,d], integer ids [...]-shaped -> [..., d]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding ids out of range")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(out, "embedding", (table,), vjp)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a over a new leading axis: shape -> (n, *shape)."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(out, "tile_leading", (a,), lambda g: (g.sum(axis=0),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalisation over the last axis with learned gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gg = np.sum((g * xhat).reshape(-1, d), axis=0)
        gb = np.sum(g.reshape(-1, d), axis=0)
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return (gx, gg, gb)

    return _result(out, "layer_norm", (x, gain, bias), vjp)


def mean_pool(x: Tensor, counts: Array) -> Tensor:
    """Mean over axis 1 of [b,w,d] with per-sample divisor counts [b].

    Padded positions are expected to be zeroed already, so the plain sum
    divided by the unmasked count is the masked mean.
    """
    if x.ndim != 3:
        raise ShapeError("mean_pool expects [b,w,d] input")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (x.shape[0],):
        raise ShapeError("mean_pool counts must have one entry per sample")
    if np.any(counts <= 0):
        raise DomainError("mean_pool counts must be positive")
    out = x.data.sum(axis=1) / counts[:, None]

    def vjp(g):
        return (np.broadcast_to((g / counts[:, None])[:, None, :],
                                x.shape).copy(),)

    return _result(out, "mean_pool", (x,), vjp)


def apply_mask(a: Tensor, keep: Array) -> Tensor:
    """Zero entries where keep == 0; gradients only flow through kept ones.

    Uses a select rather than multiplication so masked slots become a true
    +0.0 regardless of the sign of the value they had (bit-exact masking
    invariance depends on this).
    """
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != a.shape:
        raise ShapeError("apply_mask: mask shape must match input")
    out = np.where(keep != 0.0, a.data, 0.0)
    return _result(out, "apply_mask", (a,), lambda g: (g * (keep != 0.0),))


def take_per_row(a: Tensor, cols: Array) -> Tensor:
    """a[i, cols[i]] for 2-D a -> 1-D output of length rows."""
    if a.ndim != 2:
        raise ShapeError("take_per_row expects a matrix")
    cols = np.asarray(cols)
    rows = np.arange(a.shape[0])
    out = a.data[rows, cols]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _result(out, "take_per_row", (a,), vjp)


def take_indices(a: Tensor, idx: Array) -> Tensor:
    """Gather along axis 0."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(out, "take_indices", (a,), vjp)


# ---------------------------------------------------------------------------
# similarity-oriented ops


def center_gram(k: Tensor) -> Tensor:
    """Double centering C K C over the trailing two axes (C = I - J/n).

    Written with row/column means instead of explicit matrix products; the
    map is self-adjoint, so the backward pass is the same centering applied
    to the gradient.
    """
    if k.ndim < 2 or k.shape[-1] != k.shape[-2]:
        raise ShapeError("center_gram expects square trailing axes")

    def _center(m):
        rm = m.mean(axis=-1, keepdims=True)
        cm = m.mean(axis=-2, keepdims=True)
        tm = m.mean(axis=(-1, -2), keepdims=True)
        return m - rm - cm + tm

    return _result(_center(k.data), "center_gram", (k,),
                   lambda g: (_center(g),))


def pairwise_euclidean(h: Tensor, m: Tensor) -> Tensor:
    """Distance matrix between rows of h [b,d] and m [c,d] -> [b,c]."""
    if h.ndim != 2 or m.ndim != 2 or h.shape[1] != m.shape[1]:
        raise ShapeError("pairwise_euclidean expects matching-width matrices")
    dist, diff = relations.euclidean_pairs(h.data, m.data)

    def vjp(g):
        w = g / np.maximum(dist, relations.EUCLIDEAN_GRAD_FLOOR)
        gh = np.sum(w[:, :, None] * diff, axis=1)
        gm = -np.sum(w[:, :, None] * diff, axis=0)
        return (gh, gm)

    return _result(dist, "pairwise_euclidean", (h, m), vjp)


def pairwise_cosine(h: Tensor, m: Tensor,
                    floor: float = relations.COSINE_NORM_FLOOR) -> Tensor:
    """Cosine-similarity matrix between rows of h and m, norms floored."""
    if h.ndim != 2 or m.ndim != 2 or h.shape[1] != m.shape[1]:
        raise ShapeError("pairwise_cosine expects matching-width matrices")
    nh = np.maximum(np.linalg.norm(h.data, axis=1), floor)
    nm = np.maximum(np.linalg.norm(m.data, axis=1), floor)
    dots = h.data @ m.data.T
    out = dots / (nh[:, None] * nm[None, :])

    def vjp(g):
        a = g / (nh[:, None] * nm[None, :])
        b = g * out / (nh[:, None] ** 2)
        c = g * out / (nm[None, :] ** 2)
        gh = a @ m.data - b.sum(axis=1)[:, None] * h.data
        gm = a.T @ h.data - c.sum(axis=0)[:, None] * m.data
        return (gh, gm)

    return _result(out, "pairwise_cosine", (h, m), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
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
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate d(root)/d(leaf) on every requires-grad leaf below root."""
    if root.ndim != 0:
        raise GradientStateError("backward requires a scalar root")
    if not root.requires_grad:
        raise GradientStateError("root is not attached to any trainable tensor")

    order = _toposort(root)
    for node in order:
        if node._parents is None and node.grad is not None:
            raise GradientStateError(
                "stale gradient on a leaf; call zero_grad before backward")

    grads: dict[int, Array] = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = np.array(g)
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite differences (test oracle, but part of the public surface)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-5) -> Array:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""

    def _eval(arr: Array) -> float:
        out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += h
        hi = _eval(bumped.reshape(base.shape))
        bumped[i] -= 2 * h
        lo = _eval(bumped.reshape(base.shape))
        flat[i] = (hi - lo) / (2 * h)
    return grad
