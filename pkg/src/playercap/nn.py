"""Parameter storage and the shared neural building blocks.

Parameters live in a ParameterStore keyed by dotted names (one prefix per
block). Block functions take the store plus their prefix so the same code
serves every attention/MLP instance in the pipeline.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np

from .errors import OddWidth, ShapeMismatch
from .tensor import (
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    no_grad,
)


class ParameterStore:
    """Named trainable tensors with gradient slots and Adam state."""

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t = 0

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self._entries[name] = t
        return t

    def get(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if t.requires_grad]

    def zero_grads(self) -> None:
        for t in self._entries.values():
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                else:
                    t.grad.fill(0.0)

    def set_trainable(self, prefix: str, flag: bool) -> None:
        """Freeze or unfreeze every parameter under a dotted prefix."""
        hit = False
        for name, t in self._entries.items():
            if name == prefix or name.startswith(prefix + "."):
                hit = True
                t.requires_grad = flag
                t.grad = np.zeros_like(t.data) if flag else None
        if not hit:
            raise KeyError(f"no parameters under prefix {prefix!r}")

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise ShapeMismatch(
                f"parameter set mismatch: missing {sorted(missing)[:3]}, "
                f"extra {sorted(extra)[:3]}"
            )
        for name, arr in arrays.items():
            t = self._entries[name]
            if t.data.shape != arr.shape:
                raise ShapeMismatch(f"shape of {name!r} changed: "
                                    f"{t.data.shape} vs {arr.shape}")
            t.data = np.asarray(arr, dtype=np.float64).copy()

    def reset_optimizer(self) -> None:
        self._adam_m.clear()
        self._adam_v.clear()
        self._adam_t = 0


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def init_linear(
    store: ParameterStore,
    prefix: str,
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    bias: bool = True,
) -> None:
    store.add(f"{prefix}.w", xavier_uniform(rng, n_in, n_out))
    if bias:
        store.add(f"{prefix}.b", np.zeros(n_out))


def linear(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    y = matmul(x, store.get(f"{prefix}.w"))
    if f"{prefix}.b" in store:
        y = add(y, store.get(f"{prefix}.b"))
    return y


def init_layer_norm(store: ParameterStore, prefix: str, n: int) -> None:
    store.add(f"{prefix}.gain", np.ones(n))
    store.add(f"{prefix}.bias", np.zeros(n))


def layer_norm_p(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    return layer_norm(x, store.get(f"{prefix}.gain"), store.get(f"{prefix}.bias"))


def init_mlp(
    store: ParameterStore,
    prefix: str,
    d_in: int,
    d_hidden: int,
    d_out: int,
    rng: np.random.Generator,
) -> None:
    init_linear(store, f"{prefix}.fc1", d_in, d_hidden, rng)
    init_linear(store, f"{prefix}.fc2", d_hidden, d_out, rng)


def mlp(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    return linear(gelu(linear(x, store, f"{prefix}.fc1")), store, f"{prefix}.fc2")


def init_attention(store: ParameterStore, prefix: str, d: int,
                   rng: np.random.Generator) -> None:
    """Query/key/value/output projections, all d x d, no biases."""
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", xavier_uniform(rng, d, d))


# ---------------------------------------------------------------------------
# attention


def msa(x: Tensor, store: ParameterStore, prefix: str, n_heads: int,
        mask: Tensor | None = None) -> Tensor:
    """Multi-head self attention with output projection.

    Per head of width d/n_heads: softmax(Q Kᵀ / sqrt(d_h)) V; heads are
    concatenated and output-projected. With one head and an identity output
    projection this is the plain scaled-dot-product formulation.
    """
    d = x.shape[1]
    if d % n_heads:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    q = matmul(x, store.get(f"{prefix}.wq"))
    k = matmul(x, store.get(f"{prefix}.wk"))
    v = matmul(x, store.get(f"{prefix}.wv"))
    return matmul(multi_head_attention(q, k, v, n_heads, mask),
                  store.get(f"{prefix}.wo"))


def mca_attn(x_query: Tensor, x_context: Tensor, store: ParameterStore,
             prefix: str, n_heads: int) -> Tensor:
    """Multi-head cross attention: queries from one input, keys/values from
    the other. Output has as many rows as the query input."""
    d = x_query.shape[1]
    if x_context.shape[1] != d:
        raise ShapeMismatch(
            f"cross attention widths differ: {x_query.shape} vs {x_context.shape}"
        )
    if d % n_heads:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    q = matmul(x_query, store.get(f"{prefix}.wq"))
    k = matmul(x_context, store.get(f"{prefix}.wk"))
    v = matmul(x_context, store.get(f"{prefix}.wv"))
    return matmul(multi_head_attention(q, k, v, n_heads),
                  store.get(f"{prefix}.wo"))


@lru_cache(maxsize=512)
def _position_table(n: int, d: int) -> Tensor:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table)


def sinusoidal_positions(n: int, d: int) -> Tensor:
    """Standard sine/cosine position table; row 0 is [0, 1, 0, 1, ...].

    Cached constants: callers must not write to the returned tensor.
    """
    if d % 2:
        raise OddWidth(f"position width {d} must be even")
    return _position_table(n, d)


# ---------------------------------------------------------------------------
# optimization and verification


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    store._adam_t += 1
    t = store._adam_t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        m = store._adam_m.get(name)
        if m is None:
            m = store._adam_m[name] = np.zeros_like(p.data)
        v = store._adam_v.get(name)
        if v is None:
            v = store._adam_v[name] = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)


def grad_check(f: Callable[[], Tensor], store: ParameterStore,
               eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    Returns max over all trainable parameter elements of
    |autodiff - central| / max(1, |central|). The function must be
    deterministic (dropout forced to infer mode by the caller).
    """
    from .tensor import backward

    store.zero_grads()
    backward(f())
    analytic = {n: t.grad.copy() for n, t in store.trainable_items()}

    worst = 0.0
    with no_grad():
        for name, t in store.trainable_items():
            flat = t.data.reshape(-1)
            ad = analytic[name].reshape(-1)
            for idx in range(flat.size):
                x0 = flat[idx]
                flat[idx] = x0 + eps
                fp = f().item()
                flat[idx] = x0 - eps
                fm = f().item()
                flat[idx] = x0
                fd = (fp - fm) / (2.0 * eps)
                err = abs(ad[idx] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
