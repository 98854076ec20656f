"""Annotation IO, tensor archive, splits, synthetic corpus, checkpoints."""

import json

import numpy as np
import pytest

from playercap.captioner import Vocabulary
from playercap.config import HyperConfig
from playercap.data import (
    Checkpoint,
    ClipRecord,
    SplitSpec,
    SynthConfig,
    build_player_centric_set,
    corpus_stats_summary,
    default_split,
    derive_catalog,
    derive_vocabulary,
    extract_player_names,
    load_annotations,
    load_checkpoint,
    load_tensor_sidecar,
    save_annotations,
    save_checkpoint,
    save_tensor_sidecar,
    split_by_game,
    synth_generate,
)
from playercap.errors import (
    ConfigError,
    CorruptFile,
    DuplicateVideoId,
    MissingSequence,
    SchemaError,
    UncoveredGame,
    VersionMismatch,
)
from playercap.identity import PlayerCatalog, PlayerSequence
from playercap.metrics import tokenize
from playercap.tensor import Tensor


def _tiny_synth(**kw):
    base = dict(n_games=4, clips_per_game=5, n_players=6, seed=3)
    base.update(kw)
    return synth_generate(SynthConfig(**base))


# ---------------------------------------------------------------------------
# tensor archive


def test_sidecar_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "a.v": rng.normal(size=(4, 7)),
        "b.p0": rng.normal(size=(2, 3)),
        "c.flat": rng.normal(size=5),
    }
    path = tmp_path / "x.tensors"
    save_tensor_sidecar(path, entries)
    loaded = load_tensor_sidecar(path)
    assert set(loaded) == set(entries)
    for k in entries:
        assert np.array_equal(loaded[k], entries[k])
        assert loaded[k].dtype == np.float64


def test_sidecar_bad_magic(tmp_path):
    path = tmp_path / "x.tensors"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CorruptFile):
        load_tensor_sidecar(path)


def test_sidecar_truncation(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "x.tensors"
    save_tensor_sidecar(path, {"a": rng.normal(size=(3, 3))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(CorruptFile):
        load_tensor_sidecar(path)


# ---------------------------------------------------------------------------
# annotations


def test_annotations_round_trip(tmp_path):
    records, _, _ = _tiny_synth()
    path = tmp_path / "clips.jsonl"
    save_annotations(records, path)
    loaded = load_annotations(path)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.video_id == b.video_id
        assert a.caption == b.caption
        assert a.player_names == b.player_names
        assert np.array_equal(a.video_features.data, b.video_features.data)
        for name in a.player_names:
            assert np.array_equal(a.player_sequences[name].frames.data,
                                  b.player_sequences[name].frames.data)
        assert len(a.candidate_sequences) == len(b.candidate_sequences)
        for sa, sb in zip(a.candidate_sequences, b.candidate_sequences):
            assert np.array_equal(sa.frames.data, sb.frames.data)
            assert sb.source == "tracker-stub"


def test_loader_missing_field(tmp_path):
    records, _, _ = _tiny_synth()
    path = tmp_path / "clips.jsonl"
    save_annotations(records, path)
    lines = path.read_text().splitlines()
    obj = json.loads(lines[0])
    del obj["caption"]
    lines[0] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_annotations(path)


def test_loader_three_players_rejected(tmp_path):
    records, _, _ = _tiny_synth()
    path = tmp_path / "clips.jsonl"
    save_annotations(records, path)
    lines = path.read_text().splitlines()
    obj = json.loads(lines[0])
    obj["players"] = obj["players"] * 3
    lines[0] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_annotations(path)


def test_loader_duplicate_video_id(tmp_path):
    records, _, _ = _tiny_synth()
    path = tmp_path / "clips.jsonl"
    save_annotations(records, path)
    lines = path.read_text().splitlines()
    lines.append(lines[0])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DuplicateVideoId):
        load_annotations(path)


def test_loader_unresolved_ref(tmp_path):
    records, _, _ = _tiny_synth()
    path = tmp_path / "clips.jsonl"
    save_annotations(records, path)
    lines = path.read_text().splitlines()
    obj = json.loads(lines[0])
    obj["video_ref"] = "missing.entry"
    lines[0] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_annotations(path)


# ---------------------------------------------------------------------------
# grouping and splits


def test_player_centric_set_small_case():
    records, catalog, _ = _tiny_synth()
    two = next(r for r in records if len(r.player_names) == 2)
    pcs = build_player_centric_set([two])
    for name in two.player_names:
        assert [v for v, _ in pcs.clips_of(name)] == [two.video_id]


def test_player_centric_set_empty():
    assert build_player_centric_set([]).players() == []


def test_player_centric_set_coverage_random():
    records, _, _ = _tiny_synth(n_games=10, clips_per_game=10)
    pcs = build_player_centric_set(records)
    # brute force: membership agrees with a direct scan both ways
    seen = {}
    for rec in records:
        for name in rec.player_names:
            seen.setdefault(name, set()).add(rec.video_id)
    assert set(pcs.players()) == set(seen)
    for name in pcs.players():
        assert {v for v, _ in pcs.clips_of(name)} == seen[name]
    union = {v for name in pcs.players() for v, _ in pcs.clips_of(name)}
    assert union == {r.video_id for r in records}


def test_player_centric_set_missing_sequence():
    rec = ClipRecord("v1", "g1", "cap", "layup", ("a. smith",), {},
                     Tensor(np.zeros((4, 8))))
    with pytest.raises(MissingSequence):
        build_player_centric_set([rec])


def test_split_spec_rejects_overlap():
    with pytest.raises(ConfigError):
        SplitSpec(frozenset({"g1"}), frozenset({"g1"}))


def test_split_by_game_clean_partition():
    records, _, _ = _tiny_synth()
    spec = SplitSpec(frozenset({"g000", "g001"}), frozenset({"g002", "g003"}))
    train, test = split_by_game(records, spec)
    assert len(train) + len(test) == len(records)
    assert {r.game_id for r in train} <= spec.train_games
    assert {r.game_id for r in test} <= spec.test_games


def test_split_uncovered_game():
    records, _, _ = _tiny_synth()
    spec = SplitSpec(frozenset({"g000"}), frozenset({"g001"}))
    with pytest.raises(UncoveredGame):
        split_by_game(records, spec)


def test_split_random_specs_never_leak():
    records, _, _ = _tiny_synth(n_games=8, clips_per_game=6)
    games = sorted({r.game_id for r in records})
    rng = np.random.default_rng(4)
    for _ in range(25):
        mask = rng.integers(0, 2, size=len(games)).astype(bool)
        spec = SplitSpec(
            frozenset(g for g, m in zip(games, mask) if m),
            frozenset(g for g, m in zip(games, mask) if not m),
        )
        train, test = split_by_game(records, spec)
        assert len(train) + len(test) == len(records)
        assert not ({r.video_id for r in train} & {r.video_id for r in test})
        assert not ({r.game_id for r in train} & {r.game_id for r in test})


def test_default_split_ratio():
    records, _, _ = _tiny_synth(n_games=40, clips_per_game=2)
    spec = default_split(records, n_test_games=5)
    assert len(spec.train_games) == 35
    assert len(spec.test_games) == 5


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synth_deterministic():
    a, cat_a, vocab_a = _tiny_synth()
    b, cat_b, vocab_b = _tiny_synth()
    assert cat_a.names == cat_b.names
    assert vocab_a.tokens == vocab_b.tokens
    for ra, rb in zip(a, b):
        assert ra.caption == rb.caption
        assert np.array_equal(ra.video_features.data, rb.video_features.data)
        for name in ra.player_names:
            assert np.array_equal(ra.player_sequences[name].frames.data,
                                  rb.player_sequences[name].frames.data)


def test_synth_zero_noise_identical_sequences():
    records, catalog, _ = _tiny_synth(noise_sigma=0.0)
    by_player = {}
    for rec in records:
        for name, seq in rec.player_sequences.items():
            by_player.setdefault(name, []).append(seq.frames.data)
    for name, frames in by_player.items():
        for f in frames:
            assert np.array_equal(f, frames[0])
            assert np.array_equal(f[0], f[-1])


def test_synth_nearest_centroid_oracle():
    # 16 players, sigma 0.1, ~40 sequences per player: the identity task
    # must be solvable before any training is attempted
    records, catalog, _ = _tiny_synth(
        n_games=40, clips_per_game=13, n_players=16, noise_sigma=0.1, seed=0)
    feats, labels = [], []
    for rec in records:
        for name, seq in rec.player_sequences.items():
            feats.append(seq.frames.data.mean(axis=0))
            labels.append(catalog.index(name))
    feats = np.asarray(feats)
    labels = np.asarray(labels)
    assert len(labels) >= 16 * 30
    centroids = np.stack([feats[labels == c].mean(axis=0)
                          for c in range(catalog.size)])
    d = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assert np.mean(np.argmin(d, axis=1) == labels) == 1.0


def test_synth_caption_names_round_trip():
    records, catalog, _ = _tiny_synth(n_games=12, clips_per_game=8)
    for rec in records:
        assert extract_player_names(rec.caption, catalog) == \
            list(rec.player_names)


def test_synth_vocab_covers_captions():
    records, _, vocab = _tiny_synth()
    for rec in records:
        for tok in tokenize(rec.caption):
            vocab.id(tok)


def test_synth_rejects_too_few_players():
    with pytest.raises(ConfigError):
        SynthConfig(n_players=1, k_players=2)


def test_synth_candidates_and_frame_counts():
    records, _, _ = _tiny_synth(n_candidates=5)
    for rec in records:
        assert len(rec.candidate_sequences) == 5
        assert 12 <= rec.video_features.shape[0] <= 15
        assert 1 <= len(rec.player_names) <= 2


def test_corpus_stats_summary():
    records, catalog, vocab = _tiny_synth()
    stats = corpus_stats_summary(records)
    assert stats["n_clips"] == len(records)
    assert stats["n_games"] == 4
    assert stats["vocab_size"] == vocab.size
    assert sum(stats["events"].values()) == len(records)


# ---------------------------------------------------------------------------
# checkpoints


def _dummy_checkpoint():
    rng = np.random.default_rng(5)
    return Checkpoint(
        version=1,
        hyper=HyperConfig(d_time=8, d_down=4, d_llm=8, n_q=2, n_heads=2),
        catalog=PlayerCatalog(("a. smith", "b. jones")),
        vocab=Vocabulary.from_tokens(("makes", "layup")),
        tensors={
            "pin.head.w": rng.normal(size=(8, 2)),
            "dec.tok_emb": rng.normal(size=(6, 8)),
        },
        meta={"d_in": 5, "kind": "test"},
    )


def test_checkpoint_round_trip_bitwise(tmp_path):
    ckpt = _dummy_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.hyper == ckpt.hyper
    assert loaded.catalog.names == ckpt.catalog.names
    assert loaded.vocab.tokens == ckpt.vocab.tokens
    assert set(loaded.tensors) == set(ckpt.tensors)
    for k in ckpt.tensors:
        assert np.array_equal(loaded.tensors[k], ckpt.tensors[k])
    assert loaded.meta["d_in"] == 5


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _dummy_checkpoint())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_checkpoint_bitflip_fails_checksum(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _dummy_checkpoint())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    import zlib

    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _dummy_checkpoint())
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    body = bytes(blob[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_derive_catalog_and_vocab_are_stable():
    records, catalog, vocab = _tiny_synth()
    assert derive_catalog(records).names == catalog.names
    assert derive_vocabulary(records).tokens == vocab.tokens
