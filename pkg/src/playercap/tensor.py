"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation returns a new Tensor that records its parent tensors and a
vector-Jacobian closure. The resulting DAG is the computation graph;
``backward`` walks it once in reverse topological order and accumulates
gradients into leaf tensors that require them. Ranks 0..3 are supported;
the matrix ops below are strictly rank 2.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    DegenerateRow,
    InvalidRate,
    NonScalarLoss,
    ShapeMismatch,
)

LAYER_NORM_EPS = 1e-5
LOG_FLOOR = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self) -> None:
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeMismatch(f"rank {arr.ndim} tensors are not supported")
        self.data = arr
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through the module-level ops
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    """Build an op output, recording the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _check_2d(*tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeMismatch(f"expected rank-2 tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    _check_2d(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(g):
            return g, g
        return _make(a.data + b.data, (a, b), vjp)
    # row-broadcast bias: (m, n) + (n,)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
        return _make(a.data + b.data, (a, b), vjp)
    raise ShapeMismatch(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot subtract shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g, -g

    return _make(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot multiply shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows of a 2-d tensor, keeping a single output row."""
    _check_2d(a)
    m = a.shape[0]
    return _make(
        a.data.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g / m, m, axis=0),),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    _check_2d(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    return _make(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) via the error function."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    y = x.data * cdf

    def vjp(g):
        return (g * (cdf + x.data * pdf),)

    return _make(y, (x,), vjp)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity in infer mode and at rate 0.

    Train mode draws the keep mask from the supplied generator only, so a
    seeded generator makes masks reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate {rate} outside [0, 1)")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization: (x - mean) / sqrt(var + eps) * gain + bias."""
    _check_2d(x)
    n = x.shape[1]
    if n == 1:
        raise DegenerateRow("layer_norm over single-element rows")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match width {n}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv_std
    y = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv_std * (
                gh
                - gh.mean(axis=1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(y, (x, gain, bias), vjp)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over n_heads column groups, fused into
    one graph node.

    Per head of width d/n_heads: softmax(Q_h K_hᵀ / sqrt(d_h) + mask) V_h,
    heads concatenated. Equivalent to slicing the columns per head and
    running each separately; fused so one clip's graph stays small. The
    mask, when given, is additive and shared across heads.
    """
    _check_2d(q, k, v)
    m, d = q.shape
    n = k.shape[0]
    if k.shape[1] != d or v.shape != (n, d):
        raise ShapeMismatch(
            f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}"
        )
    if d % n_heads:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    d_h = d // n_heads
    inv = 1.0 / math.sqrt(d_h)

    qh = q.data.reshape(m, n_heads, d_h).transpose(1, 0, 2)
    kh = k.data.reshape(n, n_heads, d_h).transpose(1, 0, 2)
    vh = v.data.reshape(n, n_heads, d_h).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) * inv
    if mask is not None:
        scores = scores + mask.data
    z = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(z)
    attn = e / e.sum(axis=2, keepdims=True)
    out = (attn @ vh).transpose(1, 0, 2).reshape(m, d)

    def vjp(g):
        gh = g.reshape(m, n_heads, d_h).transpose(1, 0, 2)
        g_attn = gh @ vh.transpose(0, 2, 1)
        gv = (attn.transpose(0, 2, 1) @ gh) if v.requires_grad else None
        dot = (g_attn * attn).sum(axis=2, keepdims=True)
        g_scores = attn * (g_attn - dot) * inv
        gq = (g_scores @ kh) if q.requires_grad else None
        gk = (g_scores.transpose(0, 2, 1) @ qh) if k.requires_grad else None
        back = lambda a, rows: a.transpose(1, 0, 2).reshape(rows, d)
        return (
            back(gq, m) if gq is not None else None,
            back(gk, n) if gk is not None else None,
            back(gv, n) if gv is not None else None,
        )

    return _make(out, (q, k, v), vjp)


def embed_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table by index."""
    _check_2d(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeMismatch("embed_rows needs a nonempty flat index list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeMismatch(f"index outside table height {table.shape[0]}")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], (table,), vjp)


# ---------------------------------------------------------------------------
# shape surgery


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_rows needs at least one part")
    _check_2d(*parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) > 1:
        raise ShapeMismatch(f"row concat with differing widths {sorted(widths)}")
    counts = [p.shape[0] for p in parts]
    splits = np.cumsum(counts)[:-1]

    def vjp(g):
        return tuple(np.vsplit(g, splits))

    return _make(np.vstack([p.data for p in parts]), tuple(parts), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_cols needs at least one part")
    _check_2d(*parts)
    heights = {p.shape[0] for p in parts}
    if len(heights) > 1:
        raise ShapeMismatch(f"column concat with differing heights {sorted(heights)}")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.hsplit(g, splits))

    return _make(np.hstack([p.data for p in parts]), tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeMismatch(f"row slice [{start}:{stop}) outside height {x.shape[0]}")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop].copy(), (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeMismatch(f"column slice [{start}:{stop}) outside width {x.shape[1]}")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# the backward pass


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad slot.

    Leaves keep accumulating across calls until explicitly zeroed, which is
    what gradient accumulation over a batch of per-clip losses relies on.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] += pg
            else:
                pending[key] = pg
