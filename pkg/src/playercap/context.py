"""Visual context learning: a fixed set of learnable query vectors that
summarize positional video features into a constant-shape overview.

Single-head by construction: the query self-attention and the query-to-video
cross attention are written out literally with scale sqrt(d_time), separate
from the shared multi-head blocks.
"""

from __future__ import annotations

import math

import numpy as np

from .config import HyperConfig
from .errors import ShapeMismatch
from .nn import (
    ParameterStore,
    init_mlp,
    mlp,
    sinusoidal_positions,
    xavier_uniform,
)
from .tensor import Tensor, add, matmul, scale, softmax_rows, transpose


def init_vclm_params(store: ParameterStore, cfg: HyperConfig,
                     rng: np.random.Generator) -> None:
    d = cfg.d_time
    store.add("vclm.theta", rng.normal(0.0, 0.02, size=(cfg.n_q, d)))
    for name in ("wq1", "wk1", "wv1", "wq2", "wk2", "wv2"):
        store.add(f"vclm.{name}", xavier_uniform(rng, d, d))
    init_mlp(store, "vclm.mlp", d, d * cfg.vclm_mlp_ratio, d, rng)
    init_mlp(store, "vclm.ffn", d, d * cfg.vclm_ffn_ratio, d, rng)


def vclm_forward(v_v: Tensor, store: ParameterStore, cfg: HyperConfig,
                 mode: str = "infer") -> Tensor:
    """Aggregate video context through the learned queries.

    Query self-attention, position-tagged video rows, cross attention from
    the self-enhanced queries onto the video, then MLP and FFN stages with
    no residual. Output is always (n_q, d_time) regardless of the video
    row count. ``mode`` is accepted for interface parity; the module has
    no stochastic stage.
    """
    del mode
    d = cfg.d_time
    if v_v.data.ndim != 2 or v_v.shape[1] != d:
        raise ShapeMismatch(f"video feature must be (n, {d}), got {v_v.shape}")
    n_v = v_v.shape[0]
    inv = 1.0 / math.sqrt(d)
    theta = store.get("vclm.theta")

    q1 = matmul(theta, store.get("vclm.wq1"))
    k1 = matmul(theta, store.get("vclm.wk1"))
    v1 = matmul(theta, store.get("vclm.wv1"))
    v_self = matmul(softmax_rows(scale(matmul(q1, transpose(k1)), inv)), v1)

    v_pv = add(sinusoidal_positions(n_v, d), v_v)

    q2 = matmul(v_self, store.get("vclm.wq2"))
    k2 = matmul(v_pv, store.get("vclm.wk2"))
    v2 = matmul(v_pv, store.get("vclm.wv2"))
    v_cross = matmul(softmax_rows(scale(matmul(q2, transpose(k2)), inv)), v2)

    return mlp(mlp(v_cross, store, "vclm.mlp"), store, "vclm.ffn")
