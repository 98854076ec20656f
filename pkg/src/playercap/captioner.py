"""Caption decoding: vocabulary, name embeddings, multimodal prompt
assembly, a small causal transformer decoder, the caption loss, and
length-capped beam search.

The decoder consumes the prompt rows as an order-free prefix (no position
embeddings on prompt rows) followed by position-tagged token embeddings;
one causal mask covers the whole sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import HyperConfig
from .errors import (
    LengthCapExceeded,
    ShapeMismatch,
    UnknownToken,
)
from .identity import NONE_NAME
from .nn import (
    ParameterStore,
    init_attention,
    init_layer_norm,
    init_linear,
    init_mlp,
    layer_norm_p,
    linear,
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
    embed_rows,
    log,
    matmul,
    mean_rows,
    mul,
    no_grad,
    scale,
    slice_rows,
    softmax_rows,
    sum_all,
)

BOS, EOS, PAD, NONE = 0, 1, 2, 3
RESERVED_TOKENS = ("<bos>", "<eos>", "<pad>", "<none>")
LOG_FLOOR = 1e-12
MASK_NEG = -1e30


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id bijection with the four reserved ids pinned at 0..3."""

    tokens: tuple[str, ...]
    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, words) -> "Vocabulary":
        rest = sorted(set(words) - set(RESERVED_TOKENS))
        return cls(RESERVED_TOKENS + tuple(rest))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i > NONE]


@dataclass
class MultimodalPrompt:
    """Projected prompt rows plus the span bookkeeping of which rows came
    from which source, in assembly order."""

    rows: Tensor
    spans: tuple[tuple[str, int, int], ...]

    def span(self, name: str) -> tuple[int, int]:
        for span_name, lo, hi in self.spans:
            if span_name == name:
                return lo, hi
        raise KeyError(f"no span named {name!r}")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


@dataclass
class CaptionHypothesis:
    tokens: tuple[int, ...]       # includes the leading <bos>
    log_prob: float
    finished: bool = False


@dataclass
class DecoderBatch:
    prompt: MultimodalPrompt
    targets: tuple[int, ...]      # <bos>, caption ids..., <eos>; may contain <pad>

    def __post_init__(self) -> None:
        if not self.targets or self.targets[0] != BOS:
            raise ValueError("targets must start with <bos>")


# ---------------------------------------------------------------------------
# parameters


def init_prompt_params(store: ParameterStore, cfg: HyperConfig,
                       rng: np.random.Generator) -> None:
    """The four projections into decoder space, pure matrices.

    The name projection starts 50x larger than Xavier: its inputs are
    mean-pooled token embeddings drawn at std 0.02, and without the
    compensation the name span enters the prompt orders of magnitude
    quieter than the visual spans.
    """
    store.add("proj.w_c", xavier_uniform(rng, cfg.d_time, cfg.d_llm))
    store.add("proj.w_v", xavier_uniform(rng, cfg.d_time, cfg.d_llm))
    store.add("proj.w_f", xavier_uniform(rng, cfg.d_time, cfg.d_llm))
    store.add("proj.w_n", 50.0 * xavier_uniform(rng, cfg.d_llm, cfg.d_llm))


def init_decoder_params(store: ParameterStore, cfg: HyperConfig,
                        vocab_size: int, rng: np.random.Generator) -> None:
    d = cfg.d_llm
    store.add("dec.tok_emb", rng.normal(0.0, 0.02, size=(vocab_size, d)))
    for b in range(cfg.decoder_blocks):
        init_layer_norm(store, f"dec.b{b}.ln_a", d)
        init_attention(store, f"dec.b{b}.attn", d, rng)
        init_layer_norm(store, f"dec.b{b}.ln_f", d)
        init_mlp(store, f"dec.b{b}.ffn", d, d * cfg.decoder_ffn_ratio, d, rng)
    init_layer_norm(store, "dec.ln_out", d)
    init_linear(store, "dec.head", d, vocab_size, rng)


# ---------------------------------------------------------------------------
# name embeddings and prompt assembly


def embed_tokens(ids: Sequence[int], store: ParameterStore) -> Tensor:
    return embed_rows(store.get("dec.tok_emb"), ids)


def embed_names(names: Sequence[str], vocab: Vocabulary,
                store: ParameterStore, cfg: HyperConfig) -> Tensor:
    """One row per name: mean of the name tokens' embeddings; the sentinel
    maps to a zero row."""
    rows = []
    for name in names:
        if name == NONE_NAME:
            rows.append(Tensor(np.zeros((1, cfg.d_llm))))
            continue
        ids = [vocab.id(tok) for tok in name.split()]
        rows.append(mean_rows(embed_tokens(ids, store)))
    if not rows:
        raise ShapeMismatch("embed_names needs at least one name")
    return concat_rows(rows)


def build_prompt(parts: Sequence[tuple[str, Tensor, str]],
                 store: ParameterStore) -> MultimodalPrompt:
    """Project each (span_name, rows, projection_name) part and stack them
    in order, recording span offsets."""
    projected = []
    spans = []
    offset = 0
    for span_name, rows, proj_name in parts:
        w = store.get(proj_name)
        if rows.shape[1] != w.shape[0]:
            raise ShapeMismatch(
                f"span {span_name!r} width {rows.shape[1]} does not match "
                f"projection {proj_name!r} {w.shape}"
            )
        p = matmul(rows, w)
        projected.append(p)
        spans.append((span_name, offset, offset + p.shape[0]))
        offset += p.shape[0]
    return MultimodalPrompt(concat_rows(projected), tuple(spans))


def assemble_prompt(v_c: Tensor, v_bsi: Tensor, f_bsi: Tensor, e_k: Tensor,
                    store: ParameterStore) -> MultimodalPrompt:
    """Full prompt [context, video, player, names] in that fixed order."""
    return build_prompt(
        [
            ("context", v_c, "proj.w_c"),
            ("video", v_bsi, "proj.w_v"),
            ("player", f_bsi, "proj.w_f"),
            ("names", e_k, "proj.w_n"),
        ],
        store,
    )


# ---------------------------------------------------------------------------
# decoder


@lru_cache(maxsize=128)
def _causal_mask(n: int) -> Tensor:
    return Tensor(np.triu(np.full((n, n), MASK_NEG), k=1))


def decoder_hidden_logits(prompt: MultimodalPrompt, tokens: Sequence[int],
                          store: ParameterStore, cfg: HyperConfig) -> Tensor:
    """Next-token logits at every token position, (len(tokens), vocab).

    Token rows attend to all prompt rows and to earlier tokens only; prompt
    rows attend causally among themselves.
    """
    n_tok = len(tokens)
    if n_tok < 1:
        raise ValueError("token prefix must contain at least <bos>")
    if n_tok > cfg.max_caption_len + 1:
        raise LengthCapExceeded(
            f"prefix of {n_tok} tokens exceeds cap {cfg.max_caption_len + 1}"
        )
    tok = add(embed_tokens(tokens, store), sinusoidal_positions(n_tok, cfg.d_llm))
    x = concat_rows([prompt.rows, tok])
    mask = _causal_mask(x.shape[0])
    for b in range(cfg.decoder_blocks):
        x = add(x, msa(layer_norm_p(x, store, f"dec.b{b}.ln_a"), store,
                       f"dec.b{b}.attn", cfg.n_heads, mask=mask))
        x = add(x, mlp(layer_norm_p(x, store, f"dec.b{b}.ln_f"), store,
                       f"dec.b{b}.ffn"))
    x = layer_norm_p(x, store, "dec.ln_out")
    logits = linear(x, store, "dec.head")
    return slice_rows(logits, prompt.n_rows, prompt.n_rows + n_tok)


def decoder_forward(prompt: MultimodalPrompt, tokens: Sequence[int],
                    store: ParameterStore, cfg: HyperConfig) -> Tensor:
    """Logits over the vocabulary for the next token after the prefix."""
    logits = decoder_hidden_logits(prompt, tokens, store, cfg)
    return slice_rows(logits, len(tokens) - 1, len(tokens))


def caption_loss(batch: DecoderBatch, store: ParameterStore,
                 cfg: HyperConfig) -> Tensor:
    """Summed negative log-likelihood of the target tokens given the prompt,
    teacher-forced; <pad> positions contribute nothing."""
    targets = batch.targets
    if len(targets) < 2:
        raise ValueError("need at least one target token after <bos>")
    logits = decoder_hidden_logits(batch.prompt, targets[:-1], store, cfg)
    probs = softmax_rows(logits)
    vocab_size = probs.shape[1]
    pick = np.zeros((len(targets) - 1, vocab_size))
    for i, t in enumerate(targets[1:]):
        if t != PAD:
            pick[i, t] = 1.0
    chosen = mul(Tensor(pick), log(clamp_min(probs, LOG_FLOOR)))
    return scale(sum_all(chosen), -1.0)


# ---------------------------------------------------------------------------
# generation


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - math.log(np.exp(z).sum())


def generate(prompt: MultimodalPrompt, store: ParameterStore, cfg: HyperConfig,
             beam_size: int | None = None, max_len: int | None = None) -> list[int]:
    """Length-capped beam search by cumulative log-probability.

    Ties break lexicographically on token ids; beam size 1 is exactly the
    greedy argmax rollout. Returns the caption body ids, without <bos> and
    without the terminating <eos>.
    """
    beam_size = cfg.beam_size if beam_size is None else beam_size
    max_len = cfg.max_caption_len if max_len is None else max_len
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")

    beams = [CaptionHypothesis((BOS,), 0.0)]
    done: list[CaptionHypothesis] = []
    with no_grad():
        for _ in range(max_len):
            candidates: list[CaptionHypothesis] = []
            for hyp in beams:
                logits = decoder_forward(prompt, hyp.tokens, store, cfg).data[0]
                logp = _log_softmax(logits)
                for tid in range(logp.shape[0]):
                    candidates.append(CaptionHypothesis(
                        hyp.tokens + (tid,), hyp.log_prob + float(logp[tid])))
            candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
            survivors = candidates[:beam_size]
            beams = []
            for hyp in survivors:
                if hyp.tokens[-1] == EOS:
                    done.append(CaptionHypothesis(hyp.tokens, hyp.log_prob, True))
                else:
                    beams.append(hyp)
            if not beams:
                break
        # anything still alive at the cap counts as finished
        done.extend(CaptionHypothesis(h.tokens, h.log_prob, True) for h in beams)

    best = min(done, key=lambda h: (-h.log_prob, h.tokens))
    body = list(best.tokens[1:])
    if body and body[-1] == EOS:
        body.pop()
    return body
