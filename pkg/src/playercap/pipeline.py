"""End-to-end wiring: model assembly, per-clip prompt construction,
training loops for the identification network and the captioner,
generation, and the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .captioner import (
    BOS,
    EOS,
    DecoderBatch,
    MultimodalPrompt,
    Vocabulary,
    build_prompt,
    caption_loss,
    embed_names,
    generate,
    init_decoder_params,
    init_prompt_params,
)
from .config import HyperConfig
from .context import init_vclm_params, vclm_forward
from .data import ClipRecord, build_player_centric_set, label_sequences
from .errors import DataError, InconsistentFlags
from .identity import (
    IdentifiedPlayer,
    PlayerCatalog,
    build_identity_embeddings,
    classify_player,
    encode_player_sequence,
    init_bsim_params,
    init_pin_params,
    bsim_forward,
    mca_mpca,
    pin_loss,
    top_k_players,
)
from .metrics import tokenize
from .nn import ParameterStore, adam_step, init_linear, linear
from .tensor import Tensor, add, backward, no_grad, scale


@dataclass(frozen=True)
class AblationFlags:
    no_vclm: bool = False
    no_pin: bool = False
    no_bsim: bool = False
    bsim_output: str = "both"  # both | video | player

    def __post_init__(self) -> None:
        if self.bsim_output not in ("both", "video", "player"):
            raise InconsistentFlags(f"bsim_output {self.bsim_output!r}")
        if self.bsim_output != "both" and (self.no_bsim or self.no_pin):
            raise InconsistentFlags(
                "bsim_output selection requires the interaction module on"
            )


FULL = AblationFlags()


@dataclass
class PipelineModel:
    cfg: HyperConfig
    catalog: PlayerCatalog
    vocab: Vocabulary
    d_in: int
    store: ParameterStore = field(default_factory=ParameterStore)

    def dropout_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((self.cfg.seed, 7)))


def init_model(cfg: HyperConfig, catalog: PlayerCatalog, vocab: Vocabulary,
               d_in: int) -> PipelineModel:
    """Build every parameter group in a fixed order from the config seed."""
    model = PipelineModel(cfg, catalog, vocab, d_in)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    store = model.store
    init_linear(store, "video_proj", d_in, cfg.d_time, rng)
    init_pin_params(store, cfg, d_in, catalog.size, rng)
    init_bsim_params(store, cfg, rng)
    init_vclm_params(store, cfg, rng)
    init_prompt_params(store, cfg, rng)
    init_decoder_params(store, cfg, vocab.size, rng)
    return model


def caption_target_ids(caption: str, vocab: Vocabulary) -> tuple[int, ...]:
    return (BOS, *vocab.encode(tokenize(caption)), EOS)


# ---------------------------------------------------------------------------
# prompt construction


def clip_prompt(
    model: PipelineModel,
    clip: ClipRecord,
    identity_source: str = "annotated",   # annotated | tracked
    stage: str = "infer",                 # dropout mode
    flags: AblationFlags = FULL,
    rng: np.random.Generator | None = None,
) -> tuple[MultimodalPrompt, dict]:
    """Run the visual side of the pipeline for one clip.

    Returns the assembled prompt plus auxiliary info (selected names and,
    for tracked identities, the ranked identifications).
    """
    cfg, store = model.cfg, model.store
    rng = rng or model.dropout_rng()
    v_time = linear(clip.video_features, store, "video_proj")

    aux: dict = {"names": None, "identified": None}
    f_k = None
    if not flags.no_pin:
        if identity_source == "tracked":
            identified = top_k_players(clip.candidate_sequences, cfg.k_players,
                                       store, cfg, model.catalog)
            aux["identified"] = identified
            f_k, names = build_identity_embeddings(
                clip, "infer", cfg.k_players, store, cfg, model.catalog)
        elif identity_source == "annotated":
            f_k, names = build_identity_embeddings(
                clip, "train", cfg.k_players, store, cfg, model.catalog)
        else:
            raise ValueError(f"identity_source {identity_source!r}")
        aux["names"] = names

    video_rows = v_time
    player_rows = f_k
    if f_k is not None and not flags.no_bsim:
        out = bsim_forward(v_time, f_k, store, cfg, stage, rng)
        if flags.bsim_output in ("both", "video"):
            video_rows = out.v_bsi
        if flags.bsim_output in ("both", "player"):
            player_rows = out.f_bsi

    parts = []
    if not flags.no_vclm:
        parts.append(("context", vclm_forward(v_time, store, cfg, stage),
                      "proj.w_c"))
    parts.append(("video", video_rows, "proj.w_v"))
    if f_k is not None:
        parts.append(("player", player_rows, "proj.w_f"))
        parts.append(("names",
                      embed_names(aux["names"], model.vocab, store, cfg),
                      "proj.w_n"))
    return build_prompt(parts, store), aux


def run_ablation_variant(model: PipelineModel, clip: ClipRecord,
                         flags: AblationFlags,
                         identity_source: str = "annotated",
                         stage: str = "infer",
                         rng: np.random.Generator | None = None
                         ) -> MultimodalPrompt:
    """Prompt for one clip under the given module on/off flags."""
    prompt, _ = clip_prompt(model, clip, identity_source, stage, flags, rng)
    return prompt


# ---------------------------------------------------------------------------
# identification network training


def _pin_examples(records: Sequence[ClipRecord], catalog: PlayerCatalog
                  ) -> list[tuple]:
    pcset = build_player_centric_set(records)
    examples = []
    for name in pcset.players():
        label = catalog.index(name)
        for _, seq in pcset.clips_of(name):
            examples.append((seq, label))
    return examples


def pin_holdout_scores(model: PipelineModel, examples: Sequence[tuple]
                       ) -> tuple[float, float]:
    preds, truth = [], []
    with no_grad():
        for seq, label in examples:
            feat = encode_player_sequence(seq, model.store, model.cfg)
            probs = classify_player(feat, model.store, model.catalog)
            preds.append(int(np.argmax(probs)))
            truth.append(label)
    return mca_mpca(preds, truth)


def train_pin(
    model: PipelineModel,
    records: Sequence[ClipRecord],
    epochs: int,
    lr: float,
    batch_size: int = 16,
    holdout_frac: float = 0.1,
    early_stop_mca: float | None = None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Optimize the identification network with Adam; returns per-epoch
    loss and held-out MCA/MPCA."""
    if not records:
        raise DataError("no training records")
    label_sequences(records, model.catalog)
    examples = _pin_examples(records, model.catalog)
    if not examples:
        raise DataError("no labeled sequences in the training split")
    rng = np.random.default_rng(np.random.SeedSequence((model.cfg.seed, 2)))
    order = rng.permutation(len(examples))
    n_hold = max(1, int(len(examples) * holdout_frac))
    holdout = [examples[i] for i in order[:n_hold]]
    train = [examples[i] for i in order[n_hold:]]

    history = []
    store = model.store
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        total_loss = 0.0
        for start in range(0, len(perm), batch_size):
            batch_idx = perm[start:start + batch_size]
            batch = []
            for i in batch_idx:
                seq, label = train[i]
                batch.append((encode_player_sequence(seq, store, model.cfg), label))
            store.zero_grads()
            loss = pin_loss(batch, store, model.catalog.size)
            backward(loss)
            adam_step(store, lr)
            total_loss += loss.item() * len(batch_idx)
        mca, mpca = pin_holdout_scores(model, holdout)
        entry = {"epoch": epoch + 1, "loss": total_loss / len(train),
                 "mca": mca, "mpca": mpca}
        history.append(entry)
        if log:
            log(f"pin epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}  "
                f"mca {mca:.3f}  mpca {mpca:.3f}")
        if early_stop_mca is not None and mca >= early_stop_mca:
            break
    return history


# ---------------------------------------------------------------------------
# captioner training


def reconstruction_rate(model: PipelineModel, records: Sequence[ClipRecord],
                        beam_size: int = 1) -> float:
    """Fraction of clips whose greedy decode reproduces the caption tokens
    exactly, with annotated identities."""
    hits = 0
    for clip in records:
        prompt, _ = clip_prompt(model, clip, "annotated", "infer")
        ids = generate(prompt, model.store, model.cfg, beam_size=beam_size)
        want = list(caption_target_ids(clip.caption, model.vocab)[1:-1])
        hits += ids == want
    return hits / len(records)


def train_captioner(
    model: PipelineModel,
    records: Sequence[ClipRecord],
    epochs: int,
    lr: float,
    batch_size: int = 16,
    freeze_pin: bool = True,
    flags: AblationFlags = FULL,
    early_stop_reconstruction: float | None = None,
    reconstruction_every: int = 10,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Optimize the captioning loss end to end over train clips.

    Identity features come from each clip's annotated key players. With
    freeze_pin the identification parameters are excluded from updates.
    """
    if not records:
        raise DataError("no training records")
    store, cfg = model.store, model.cfg
    if freeze_pin:
        store.set_trainable("pin", False)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3)))
    drop_rng = model.dropout_rng()

    targets = [caption_target_ids(c.caption, model.vocab) for c in records]
    history = []
    try:
        for epoch in range(epochs):
            perm = rng.permutation(len(records))
            total = 0.0
            for start in range(0, len(perm), batch_size):
                batch = perm[start:start + batch_size]
                store.zero_grads()
                batch_loss = None
                for i in batch:
                    prompt, _ = clip_prompt(model, records[i], "annotated",
                                            "train", flags, drop_rng)
                    loss = caption_loss(DecoderBatch(prompt, targets[i]),
                                        store, cfg)
                    batch_loss = loss if batch_loss is None else add(batch_loss, loss)
                batch_loss = scale(batch_loss, 1.0 / len(batch))
                backward(batch_loss)
                adam_step(store, lr)
                total += batch_loss.item() * len(batch)
            entry = {"epoch": epoch + 1, "loss": total / len(records)}
            done = (epoch + 1) % reconstruction_every == 0 or epoch + 1 == epochs
            if early_stop_reconstruction is not None and done:
                entry["reconstruction"] = reconstruction_rate(model, records)
            history.append(entry)
            if log:
                extra = (f"  exact {entry['reconstruction']:.3f}"
                         if "reconstruction" in entry else "")
                log(f"captioner epoch {entry['epoch']:3d}  "
                    f"loss {entry['loss']:.4f}{extra}")
            if (early_stop_reconstruction is not None
                    and entry.get("reconstruction", 0.0)
                    >= early_stop_reconstruction):
                break
    finally:
        if freeze_pin:
            store.set_trainable("pin", True)
    return history


# ---------------------------------------------------------------------------
# generation


def generate_captions(
    model: PipelineModel,
    records: Sequence[ClipRecord],
    beam_size: int | None = None,
    flags: AblationFlags = FULL,
) -> list[dict]:
    """Tracked-identity decoding for a list of clips, in input order."""
    outputs = []
    for clip in records:
        prompt, aux = clip_prompt(model, clip, "tracked" if not flags.no_pin
                                  else "annotated", "infer", flags)
        ids = generate(prompt, model.store, model.cfg, beam_size=beam_size)
        caption = " ".join(model.vocab.decode(ids))
        players = []
        if aux["identified"] is not None:
            players = [
                {"name": p.name, "confidence": p.confidence}
                for p in aux["identified"]
            ]
        outputs.append({
            "video_id": clip.video_id,
            "caption": caption,
            "identified_players": players,
        })
    return outputs
