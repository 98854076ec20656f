"""Player identification and the bidirectional semantic interaction block.

The identification network is a small sequence encoder (input projection,
sine/cosine positions, one self-attention block with residual, mean pool)
followed by a softmax classification head over the player catalog. The
interaction block cross-enhances video rows and selected player rows
through a down-projected attention exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import HyperConfig
from .errors import (
    EmptyInput,
    EmptySequence,
    LabelOutOfRange,
    MissingSequences,
    ShapeMismatch,
)
from .nn import (
    ParameterStore,
    init_attention,
    init_layer_norm,
    init_linear,
    init_mlp,
    layer_norm_p,
    linear,
    mca_attn,
    mlp,
    msa,
    sinusoidal_positions,
    xavier_uniform,
)
from .tensor import (
    Tensor,
    add,
    clamp_min,
    concat_rows,
    dropout,
    gelu,
    log,
    matmul,
    mean_rows,
    mul,
    no_grad,
    scale,
    softmax_rows,
    sum_all,
)

NONE_NAME = "<none>"
LOG_FLOOR = 1e-12


@dataclass
class PlayerSequence:
    """Per-frame feature rows for one tracked or annotated player."""

    frames: Tensor                    # (t, d_in)
    player_label: int | None = None   # catalog index when known
    source: str = "dataset"           # "dataset" | "tracker-stub"

    def __post_init__(self) -> None:
        if self.frames.data.ndim != 2 or self.frames.shape[0] < 1:
            raise EmptySequence(f"sequence needs rank-2 frames, got {self.frames.shape}")


@dataclass(frozen=True)
class PlayerCatalog:
    """Ordered name <-> class-index bijection."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("catalog names must be distinct")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"player {name!r} not in catalog") from None

    def name(self, idx: int) -> str:
        return self.names[idx]


@dataclass
class IdentifiedPlayer:
    class_index: int
    name: str
    confidence: float
    feature: Tensor  # (1, d_time)


@dataclass
class BsimOutput:
    v_bsi: Tensor  # same shape as the video input
    f_bsi: Tensor  # same shape as the player input


# ---------------------------------------------------------------------------
# player identification network


def init_pin_params(store: ParameterStore, cfg: HyperConfig, d_in: int,
                    n_classes: int, rng: np.random.Generator) -> None:
    init_linear(store, "pin.in_proj", d_in, cfg.d_time, rng)
    init_attention(store, "pin.attn", cfg.d_time, rng)
    init_linear(store, "pin.head", cfg.d_time, n_classes, rng)


def encode_player_sequence(seq: PlayerSequence, store: ParameterStore,
                           cfg: HyperConfig) -> Tensor:
    """Sequence feature: project, add positions, one residual attention
    block, mean-pool to a single row."""
    t = seq.frames.shape[0]
    h = linear(seq.frames, store, "pin.in_proj")
    h = add(h, sinusoidal_positions(t, cfg.d_time))
    h = add(h, msa(h, store, "pin.attn", cfg.n_heads))
    return mean_rows(h)


def classify_player(f_p: Tensor, store: ParameterStore,
                    catalog: PlayerCatalog) -> np.ndarray:
    """Softmax probabilities over the catalog for one encoded sequence."""
    if f_p.data.ndim != 2 or f_p.shape[0] != 1:
        raise ShapeMismatch(f"expected a single feature row, got {f_p.shape}")
    head_w = store.get("pin.head.w")
    if f_p.shape[1] != head_w.shape[0]:
        raise ShapeMismatch(
            f"feature width {f_p.shape[1]} does not match head {head_w.shape}"
        )
    with no_grad():
        probs = softmax_rows(linear(f_p, store, "pin.head"))
    out = probs.data[0]
    if out.shape[0] != catalog.size:
        raise ShapeMismatch(
            f"head emits {out.shape[0]} classes, catalog has {catalog.size}"
        )
    return out


def identify_player(seq: PlayerSequence, store: ParameterStore, cfg: HyperConfig,
                    catalog: PlayerCatalog) -> IdentifiedPlayer:
    with no_grad():
        feature = encode_player_sequence(seq, store, cfg)
    probs = classify_player(feature, store, catalog)
    idx = int(np.argmax(probs))
    return IdentifiedPlayer(idx, catalog.name(idx), float(probs[idx]), feature)


def pin_loss(batch: Sequence[tuple[Tensor, int]], store: ParameterStore,
             n_classes: int) -> Tensor:
    """Mean cross entropy -(1/N) sum_n sum_i y_ni log p_ni with one-hot
    targets; the log argument is clamped at 1e-12."""
    if not batch:
        raise EmptyInput("empty training batch")
    for _, label in batch:
        if not 0 <= label < n_classes:
            raise LabelOutOfRange(f"label {label} outside [0, {n_classes})")
    feats = concat_rows([f for f, _ in batch])
    logits = linear(feats, store, "pin.head")
    probs = softmax_rows(logits)
    onehot = np.zeros((len(batch), n_classes))
    for i, (_, label) in enumerate(batch):
        onehot[i, label] = 1.0
    picked = mul(Tensor(onehot), log(clamp_min(probs, LOG_FLOOR)))
    return scale(sum_all(picked), -1.0 / len(batch))


def top_k_players(sequences: Sequence[PlayerSequence], k: int,
                  store: ParameterStore, cfg: HyperConfig,
                  catalog: PlayerCatalog) -> list[IdentifiedPlayer]:
    """Rank candidate sequences by classification confidence and keep the
    k best. Ties break on lower class index, then input order; duplicate
    predicted identities are kept."""
    if k < 1:
        raise ValueError("k must be >= 1")
    identified = [identify_player(s, store, cfg, catalog) for s in sequences]
    ranked = sorted(
        range(len(identified)),
        key=lambda i: (-identified[i].confidence, identified[i].class_index, i),
    )
    return [identified[i] for i in ranked[:k]]


def mca_mpca(preds: Sequence[int], truth: Sequence[int]) -> tuple[float, float]:
    """Overall accuracy and the unweighted mean of per-class accuracies
    over the classes that appear in the ground truth."""
    if len(preds) == 0 or len(truth) == 0:
        raise EmptyInput("no predictions to score")
    if len(preds) != len(truth):
        raise ShapeMismatch(f"length mismatch: {len(preds)} vs {len(truth)}")
    p = np.asarray(preds)
    t = np.asarray(truth)
    mca = float(np.mean(p == t))
    per_class = [float(np.mean(p[t == c] == c)) for c in np.unique(t)]
    return mca, float(np.mean(per_class))


# ---------------------------------------------------------------------------
# bidirectional semantic interaction


def init_bsim_params(store: ParameterStore, cfg: HyperConfig,
                     rng: np.random.Generator) -> None:
    d, d_dn = cfg.d_time, cfg.d_down
    init_layer_norm(store, "bsim.ln1", d)
    init_layer_norm(store, "bsim.ln2", d)
    init_attention(store, "bsim.msa_v", d, rng)
    init_attention(store, "bsim.msa_f", d, rng)
    store.add("bsim.wd1", xavier_uniform(rng, d, d_dn))
    store.add("bsim.wd2", xavier_uniform(rng, d, d_dn))
    init_layer_norm(store, "bsim.ln3", d_dn)
    init_layer_norm(store, "bsim.ln4", d_dn)
    init_attention(store, "bsim.mca_ev", d_dn, rng)
    init_attention(store, "bsim.mca_ve", d_dn, rng)
    store.add("bsim.wu1", xavier_uniform(rng, d_dn, d))
    store.add("bsim.wu2", xavier_uniform(rng, d_dn, d))
    hidden = d * cfg.bsim_mlp_ratio
    init_mlp(store, "bsim.mlp_v", d, hidden, d, rng)
    init_mlp(store, "bsim.mlp_f", d, hidden, d, rng)
    init_layer_norm(store, "bsim.ln5", d)
    init_layer_norm(store, "bsim.ln6", d)


def bsim_forward(v_v: Tensor, f_k: Tensor, store: ParameterStore,
                 cfg: HyperConfig, mode: str,
                 rng: np.random.Generator | None = None) -> BsimOutput:
    """Self-enhancement, down-projected cross exchange, and a gated MLP
    residual per branch; both outputs keep their input shapes.

    The bottleneck layer norms are shared between the two branches.
    """
    if v_v.shape[1] != cfg.d_time or f_k.shape[1] != cfg.d_time:
        raise ShapeMismatch(
            f"expected width {cfg.d_time}, got {v_v.shape} and {f_k.shape}"
        )
    nh = cfg.n_heads
    # self-enhancement
    v1 = msa(layer_norm_p(v_v, store, "bsim.ln1"), store, "bsim.msa_v", nh)
    f1 = msa(layer_norm_p(f_k, store, "bsim.ln2"), store, "bsim.msa_f", nh)
    # information exchange in the bottleneck space
    vd = layer_norm_p(matmul(v1, store.get("bsim.wd1")), store, "bsim.ln3")
    fd = layer_norm_p(matmul(f1, store.get("bsim.wd2")), store, "bsim.ln4")
    v2 = matmul(mca_attn(vd, fd, store, "bsim.mca_ev", nh), store.get("bsim.wu1"))
    f2 = matmul(mca_attn(fd, vd, store, "bsim.mca_ve", nh), store.get("bsim.wu2"))
    # output stage: norm(dropout(mlp(gelu(x))) + x)
    rng = rng or np.random.default_rng(0)
    v_out = layer_norm_p(
        add(dropout(mlp(gelu(v2), store, "bsim.mlp_v"), cfg.dropout_rate, mode, rng),
            v2),
        store, "bsim.ln5")
    f_out = layer_norm_p(
        add(dropout(mlp(gelu(f2), store, "bsim.mlp_f"), cfg.dropout_rate, mode, rng),
            f2),
        store, "bsim.ln6")
    return BsimOutput(v_out, f_out)


# ---------------------------------------------------------------------------
# identity embeddings for the prompt


def build_identity_embeddings(
    clip,
    mode: str,
    k: int,
    store: ParameterStore,
    cfg: HyperConfig,
    catalog: PlayerCatalog,
) -> tuple[Tensor, list[str]]:
    """Player feature rows plus the matching names for one clip.

    Train mode reads the annotated key-player sequences in caption order;
    infer mode ranks the clip's candidate sequences and keeps the top k.
    Short results are padded with zero rows under the sentinel name.
    """
    rows: list[Tensor] = []
    names: list[str] = []
    if mode == "train":
        if not clip.player_sequences:
            raise MissingSequences(f"clip {clip.video_id} has no annotated sequences")
        for name in clip.player_names[:k]:
            seq = clip.player_sequences.get(name)
            if seq is None:
                raise MissingSequences(
                    f"clip {clip.video_id} lacks a sequence for {name!r}"
                )
            rows.append(encode_player_sequence(seq, store, cfg))
            names.append(name)
    elif mode == "infer":
        for ident in top_k_players(clip.candidate_sequences, k, store, cfg, catalog):
            rows.append(ident.feature)
            names.append(ident.name)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    while len(rows) < k:
        rows.append(Tensor(np.zeros((1, cfg.d_time))))
        names.append(NONE_NAME)
    return concat_rows(rows), names
