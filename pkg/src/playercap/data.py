"""Dataset model and persistence.

Annotations are JSON Lines; frame features live in a flat binary sidecar
archive keyed by name. Checkpoints reuse the same tensor container with a
JSON header and a CRC-32 trailer. The synthetic generator produces a
desk-scale corpus whose captions, player sequences, and video features are
jointly learnable by construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .captioner import Vocabulary
from .config import HyperConfig
from .errors import (
    ConfigError,
    CorruptFile,
    DuplicateVideoId,
    MissingSequence,
    SchemaError,
    UncoveredGame,
    VersionMismatch,
)
from .identity import PlayerCatalog, PlayerSequence
from .metrics import tokenize
from .tensor import Tensor

MAGIC = b"IAVC"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# clip records


@dataclass
class ClipRecord:
    video_id: str
    game_id: str
    caption: str
    event_type: str
    player_names: tuple[str, ...]
    player_sequences: dict  # name -> PlayerSequence
    video_features: Tensor  # (n_v, d_in)
    candidate_sequences: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 1 <= len(self.player_names) <= 2:
            raise SchemaError(
                f"clip {self.video_id}: {len(self.player_names)} player names"
            )


@dataclass
class PlayerCentricSet:
    """Every player mapped to all clips whose captions name them."""

    by_player: dict  # name -> list[(video_id, PlayerSequence)]

    def players(self) -> list[str]:
        return sorted(self.by_player)

    def clips_of(self, name: str) -> list:
        return self.by_player.get(name, [])


@dataclass(frozen=True)
class SplitSpec:
    train_games: frozenset
    test_games: frozenset

    def __post_init__(self) -> None:
        overlap = self.train_games & self.test_games
        if overlap:
            raise ConfigError(f"games on both sides of the split: {sorted(overlap)}")


@dataclass
class Checkpoint:
    version: int
    hyper: HyperConfig
    catalog: PlayerCatalog
    vocab: Vocabulary
    tensors: dict  # name -> np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# tensor archive container


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptFile(f"{self.path}: truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.blob)


def _read_entry(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    if rank > 3:
        raise CorruptFile(f"{r.path}: entry {name!r} has rank {rank}")
    shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
    count = 1
    for extent in shape:
        if extent < 1:
            raise CorruptFile(f"{r.path}: entry {name!r} has extent {extent}")
        count *= extent
    data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_tensor_sidecar(path: str | Path, entries: dict) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in entries.items():
        parts.append(_pack_entry(name, arr))
    Path(path).write_bytes(b"".join(parts))


def load_tensor_sidecar(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4) != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}")
    entries = {}
    while not r.exhausted:
        name, arr = _read_entry(r)
        entries[name] = arr
    return entries


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "hyper": ckpt.hyper.to_dict(),
        "catalog": list(ckpt.catalog.names),
        "vocab": list(ckpt.vocab.tokens),
        "meta": ckpt.meta,
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(raw_header)),
        raw_header,
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name, arr in ckpt.tensors.items():
        parts.append(_pack_entry(name, arr))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        from .errors import MissingCheckpoint
        raise MissingCheckpoint(f"no checkpoint at {path}")
    blob = p.read_bytes()
    if len(blob) < 16:
        raise CorruptFile(f"{path}: too short")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CorruptFile(f"{path}: checksum mismatch")
    r = _Reader(body, str(path))
    if r.take(4) != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    n_entries = r.u32()
    tensors = {}
    for _ in range(n_entries):
        name, arr = _read_entry(r)
        tensors[name] = arr
    if not r.exhausted:
        raise CorruptFile(f"{path}: trailing bytes")
    return Checkpoint(
        version=header["format_version"],
        hyper=HyperConfig.from_dict(header["hyper"]),
        catalog=PlayerCatalog(tuple(header["catalog"])),
        vocab=Vocabulary(tuple(header["vocab"])),
        tensors=tensors,
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# annotations


_REQUIRED_FIELDS = ("video_id", "game_id", "caption", "event_type",
                    "players", "video_ref")


def _sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".tensors")


def save_annotations(records: Sequence[ClipRecord], path: str | Path) -> None:
    """Write JSON Lines plus the sidecar tensor archive next to it."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    lines = []
    for rec in records:
        video_ref = f"{rec.video_id}.v"
        tensors[video_ref] = rec.video_features.data
        players = []
        for j, name in enumerate(rec.player_names):
            ref = f"{rec.video_id}.p{j}"
            tensors[ref] = rec.player_sequences[name].frames.data
            players.append({"name": name, "sequence_ref": ref})
        obj = {
            "video_id": rec.video_id,
            "game_id": rec.game_id,
            "caption": rec.caption,
            "event_type": rec.event_type,
            "players": players,
            "video_ref": video_ref,
        }
        if rec.candidate_sequences:
            refs = []
            for j, seq in enumerate(rec.candidate_sequences):
                ref = f"{rec.video_id}.c{j}"
                tensors[ref] = seq.frames.data
                refs.append(ref)
            obj["candidates"] = refs
        lines.append(json.dumps(obj))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_tensor_sidecar(_sidecar_path(path), tensors)


def load_annotations(path: str | Path, sidecar: str | Path | None = None
                     ) -> list[ClipRecord]:
    """Parse and validate annotation records, resolving feature references
    against the sidecar archive."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"annotation file {path} does not exist")
    tensors = load_tensor_sidecar(sidecar or _sidecar_path(path))

    def fetch(ref, line_no: int, rank: int) -> np.ndarray:
        if not isinstance(ref, str) or ref not in tensors:
            raise SchemaError(f"{path}:{line_no}: unresolved tensor ref {ref!r}")
        arr = tensors[ref]
        if arr.ndim != rank:
            raise SchemaError(f"{path}:{line_no}: ref {ref!r} has rank {arr.ndim}, "
                              f"expected {rank}")
        return arr

    records: list[ClipRecord] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{line_no}: invalid JSON: {e}") from None
        for key in _REQUIRED_FIELDS:
            if key not in obj:
                raise SchemaError(f"{path}:{line_no}: missing field {key!r}")
        if not isinstance(obj["players"], list) or not 1 <= len(obj["players"]) <= 2:
            raise SchemaError(
                f"{path}:{line_no}: players must list 1-2 entries, "
                f"got {len(obj.get('players', []))}"
            )
        vid = obj["video_id"]
        if vid in seen_ids:
            raise DuplicateVideoId(f"{path}:{line_no}: duplicate video_id {vid!r}")
        seen_ids.add(vid)

        names = []
        sequences = {}
        for p in obj["players"]:
            if "name" not in p or "sequence_ref" not in p:
                raise SchemaError(f"{path}:{line_no}: malformed player entry {p!r}")
            names.append(p["name"])
            sequences[p["name"]] = PlayerSequence(
                Tensor(fetch(p["sequence_ref"], line_no, 2)), source="dataset")
        candidates = [
            PlayerSequence(Tensor(fetch(ref, line_no, 2)), source="tracker-stub")
            for ref in obj.get("candidates", [])
        ]
        records.append(ClipRecord(
            video_id=vid,
            game_id=obj["game_id"],
            caption=obj["caption"],
            event_type=obj["event_type"],
            player_names=tuple(names),
            player_sequences=sequences,
            video_features=Tensor(fetch(obj["video_ref"], line_no, 2)),
            candidate_sequences=candidates,
        ))
    return records


# ---------------------------------------------------------------------------
# grouping and splits


def build_player_centric_set(records: Sequence[ClipRecord]) -> PlayerCentricSet:
    by_player: dict[str, list] = {}
    for rec in records:
        for name in rec.player_names:
            seq = rec.player_sequences.get(name)
            if seq is None:
                raise MissingSequence(
                    f"clip {rec.video_id} names {name!r} without a sequence"
                )
            by_player.setdefault(name, []).append((rec.video_id, seq))
    return PlayerCentricSet({k: by_player[k] for k in sorted(by_player)})


def split_by_game(records: Sequence[ClipRecord], spec: SplitSpec
                  ) -> tuple[list[ClipRecord], list[ClipRecord]]:
    present = {rec.game_id for rec in records}
    uncovered = present - (spec.train_games | spec.test_games)
    if uncovered:
        raise UncoveredGame(f"split spec misses games {sorted(uncovered)}")
    train = [r for r in records if r.game_id in spec.train_games]
    test = [r for r in records if r.game_id in spec.test_games]
    return train, test


def default_split(records: Sequence[ClipRecord], n_test_games: int = 5) -> SplitSpec:
    games = sorted({r.game_id for r in records})
    if n_test_games >= len(games):
        raise ConfigError(f"cannot hold out {n_test_games} of {len(games)} games")
    return SplitSpec(frozenset(games[:-n_test_games]), frozenset(games[-n_test_games:]))


# ---------------------------------------------------------------------------
# synthetic corpus


_SURNAMES = (
    "smith", "jones", "brown", "davis", "miller", "wilson", "moore", "taylor",
    "lee", "clark", "hall", "allen", "young", "king", "walker", "scott",
    "green", "adams", "baker", "hill", "nelson", "carter", "perez", "turner",
    "gray", "ward", "cox", "diaz", "reed", "kim", "cruz", "ramos", "wood",
    "long", "ross", "bell", "gomez", "cole", "west", "fox",
)
_INITIALS = "abcdefghijklmnopqrstuvwxyz"

# (event type, template, distance range or None, has make/miss outcome);
# {m} is a shot-style modifier and {s} an event subtype, both carried only
# by the action payload rows of the video features
EVENT_TEMPLATES: tuple[tuple[str, str, tuple[int, int] | None, bool], ...] = (
    ("2pt-shot", "{A} {o} 2-pt {m} jump shot from {d} ft", (4, 22), True),
    ("3pt-shot", "{A} {o} 3-pt {m} jump shot from {d} ft", (23, 30), True),
    ("layup", "{A} {o} {m} layup from {d} ft", (1, 6), True),
    ("assist", "{A} makes 2-pt {m} layup from {d} ft , assist by {B}",
     (1, 8), False),
    ("block", "{A} blocks the {m} shot by {B}", None, False),
    ("defensive-rebound", "{A} gets the defensive rebound", None, False),
    ("offensive-rebound", "{A} gets the offensive rebound", None, False),
    ("turnover", "turnover by {A} , {s} , steal by {B}", None, False),
    ("foul", "{s} foul by {A}", None, False),
)

SHOT_MODIFIERS = ("pullup", "stepback", "running", "turnaround", "fadeaway",
                  "driving")

# event-local subtype phrases; indices into one shared signature table
EVENT_SUBTYPES: dict[str, tuple[tuple[str, int], ...]] = {
    "turnover": (("bad pass", 0), ("lost ball", 1)),
    "foul": (("shooting", 2), ("personal", 3), ("offensive", 4),
             ("loose ball", 5)),
}

# shot-heavy mix, mirroring how often each event shows up in play-by-play
_EVENT_WEIGHTS = (0.20, 0.14, 0.14, 0.12, 0.04, 0.12, 0.06, 0.10, 0.08)

MAX_DISTANCE_FT = 30


@dataclass
class SynthConfig:
    n_games: int = 40
    clips_per_game: int = 13
    n_players: int = 16
    n_event_types: int = 9
    d_in: int = 48
    noise_sigma: float = 0.1
    seed: int = 0
    k_players: int = 2
    seq_len: int = 5
    n_frames_min: int = 12
    n_frames_max: int = 15
    n_candidates: int = 4
    distractor_sigma: float = 0.6
    video_sigma: float = 0.05
    decoys: bool = True
    # focal scaling: the acting player fills the frame, the second named
    # player slightly less, background tracks much less; identification
    # confidence then carries real ranking signal
    second_scale: float = 0.9
    distractor_scale: float = 0.2
    # action payload structure inside the video rows
    payload_rows: int = 2
    mark_gain: float = 0.25

    def __post_init__(self) -> None:
        if self.n_players < self.k_players:
            raise ConfigError(
                f"n_players ({self.n_players}) must be >= k_players "
                f"({self.k_players})"
            )
        if not 1 <= self.n_event_types <= len(EVENT_TEMPLATES):
            raise ConfigError(f"n_event_types must be in 1..{len(EVENT_TEMPLATES)}")
        for name in ("n_games", "clips_per_game", "n_players", "d_in", "seq_len",
                     "n_frames_min", "n_frames_max", "n_candidates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_frames_min > self.n_frames_max:
            raise ConfigError("n_frames_min > n_frames_max")
        if self.n_frames_min < 4:
            raise ConfigError("need at least 4 video rows per clip")
        if self.noise_sigma < 0 or self.video_sigma < 0 or self.distractor_sigma < 0:
            raise ConfigError("noise levels must be nonnegative")


def _player_names(n: int, rng: np.random.Generator) -> list[str]:
    pool = [f"{i}. {s}" for s in _SURNAMES for i in _INITIALS]
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx)]


class _FeatureSpace:
    """Fixed random linear mixing from source one-hots into feature space.

    Video-space signature vectors are unit-norm so signal rows stay
    comparable to the other prompt spans; sequence-space identity vectors
    are full scale.
    """

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        d = cfg.d_in
        n_events = cfg.n_event_types
        s = 1.0 / np.sqrt(d)
        self.event = rng.normal(0.0, s, (n_events, d))
        self.dist = rng.normal(0.0, s, (MAX_DISTANCE_FT + 1, d))
        self.outcome = rng.normal(0.0, s, (2, d))
        self.modifier = rng.normal(0.0, s, (len(SHOT_MODIFIERS), d))
        self.subtype = rng.normal(0.0, s, (6, d))
        self.identity = rng.normal(0.0, 1.0, (cfg.n_players, d))
        # in-frame appearance marks are the unit-scaled identities: the same
        # appearance drives the tracked sequence and the in-frame pixels,
        # so matching the two is a basis alignment, not a lookup table
        self.player_mark = self.identity / np.linalg.norm(
            self.identity, axis=1, keepdims=True)


def _video_rows(cfg: SynthConfig, space: _FeatureSpace, rng: np.random.Generator,
                event_idx: int, named: tuple[int, ...], dist: int | None,
                outcome: int | None, modifier: int | None,
                subtype: int | None) -> np.ndarray:
    """Compose one clip's video feature rows.

    The live action (event signature plus its payload of distance, style,
    and subtype, marked with the acting player) occupies the late half of
    the rows; a fully self-consistent decoy play occupies the early half.
    Row content alone cannot separate the two; frame order can.
    """
    n_v = int(rng.integers(cfg.n_frames_min, cfg.n_frames_max + 1))
    rows = np.zeros((n_v, cfg.d_in))
    half = n_v // 2
    actor_idx = named[0]

    def bundle(ev: int, mark: int, d: int | None, o: int | None,
               m: int | None, s: int | None) -> tuple[np.ndarray, np.ndarray]:
        sig = space.event[ev].copy()
        if o is not None:
            sig += space.outcome[o]
        pay = cfg.mark_gain * space.player_mark[mark]
        if d is not None:
            pay = pay + space.dist[d]
        if m is not None:
            pay = pay + space.modifier[m]
        if s is not None:
            pay = pay + space.subtype[s]
        return sig, pay

    def place(sig: np.ndarray, pay: np.ndarray, lo: int, hi: int) -> None:
        span = hi - lo
        n_sig = min(2, span)
        n_pay = min(cfg.payload_rows, span)
        for p in lo + rng.choice(span, size=n_sig, replace=False):
            rows[p] += sig
        for p in lo + rng.choice(span, size=n_pay, replace=False):
            rows[p] += pay

    true_sig, true_pay = bundle(event_idx, actor_idx, dist, outcome,
                                modifier, subtype)
    if not cfg.decoys:
        place(true_sig, true_pay, 0, n_v)
        rows += rng.normal(0.0, cfg.video_sigma, rows.shape)
        return rows

    # decoys: fully self-consistent bundles for other events by uninvolved
    # players, shown in earlier frames like replays of previous plays; only
    # frame order separates them from the live action in the final third
    def decoy_bundle() -> tuple[np.ndarray, np.ndarray]:
        decoy_event = int(rng.integers(cfg.n_event_types - 1))
        if decoy_event >= event_idx:
            decoy_event += 1
        ev_type, template, d_range, has_outcome = EVENT_TEMPLATES[decoy_event]
        others = [i for i in range(cfg.n_players) if i not in named]
        decoy_mark = others[int(rng.integers(len(others)))]
        decoy_dist = (int(rng.integers(d_range[0], d_range[1] + 1))
                      if d_range is not None else None)
        decoy_outcome = int(rng.integers(2)) if has_outcome else None
        decoy_mod = (int(rng.integers(len(SHOT_MODIFIERS)))
                     if "{m}" in template else None)
        decoy_sub = None
        if "{s}" in template:
            pool = EVENT_SUBTYPES[ev_type]
            decoy_sub = pool[int(rng.integers(len(pool)))][1]
        return bundle(decoy_event, decoy_mark, decoy_dist, decoy_outcome,
                      decoy_mod, decoy_sub)

    cuts = [0, n_v // 3, 2 * n_v // 3, n_v]
    sig_a, pay_a = decoy_bundle()
    sig_b, pay_b = decoy_bundle()
    place(sig_a, pay_a, cuts[0], cuts[1])
    place(sig_b, pay_b, cuts[1], cuts[2])
    place(true_sig, true_pay, cuts[2], cuts[3])
    rows += rng.normal(0.0, cfg.video_sigma, rows.shape)
    return rows


def _sequence(space: _FeatureSpace, idx: int, seq_len: int, sigma: float,
              rng: np.random.Generator, source: str,
              scale: float = 1.0) -> PlayerSequence:
    frames = scale * space.identity[idx][None, :] + rng.normal(
        0.0, sigma, (seq_len, space.identity.shape[1]))
    return PlayerSequence(Tensor(frames), player_label=idx, source=source)


def synth_generate(cfg: SynthConfig
                   ) -> tuple[list[ClipRecord], PlayerCatalog, Vocabulary]:
    """Deterministic synthetic corpus: records, catalog, vocabulary.

    Each player owns a latent identity vector; sequences are that vector
    plus Gaussian noise. Captions come from the event templates with
    quantized distances, and the video rows embed event, distance, outcome,
    and actor identity through fixed random mixing.
    """
    rng = np.random.default_rng(cfg.seed)
    names = _player_names(cfg.n_players, rng)
    catalog = PlayerCatalog(tuple(sorted(names)))
    space = _FeatureSpace(cfg, rng)
    weights = np.asarray(_EVENT_WEIGHTS[:cfg.n_event_types])
    weights = weights / weights.sum()

    records: list[ClipRecord] = []
    clip_no = 0
    for g in range(cfg.n_games):
        game_id = f"g{g:03d}"
        for _ in range(cfg.clips_per_game):
            event_idx = int(rng.choice(cfg.n_event_types, p=weights))
            ev_type, template, dist_range, has_outcome = EVENT_TEMPLATES[event_idx]
            two_player = "{B}" in template
            picks = rng.choice(cfg.n_players, size=2 if two_player else 1,
                               replace=False)
            actor = int(picks[0])
            named = tuple(int(i) for i in picks)
            fills = {"A": names[actor]}
            if two_player:
                fills["B"] = names[int(picks[1])]
            dist = None
            if dist_range is not None:
                dist = int(rng.integers(dist_range[0], dist_range[1] + 1))
                fills["d"] = str(dist)
            outcome = None
            if has_outcome:
                outcome = int(rng.integers(2))
                fills["o"] = "makes" if outcome == 1 else "misses"
            modifier = None
            if "{m}" in template:
                modifier = int(rng.integers(len(SHOT_MODIFIERS)))
                fills["m"] = SHOT_MODIFIERS[modifier]
            subtype = None
            if "{s}" in template:
                options = EVENT_SUBTYPES[ev_type]
                pick = int(rng.integers(len(options)))
                fills["s"] = options[pick][0]
                subtype = options[pick][1]
            caption = template.format(**fills)

            video = _video_rows(cfg, space, rng, event_idx, named, dist,
                                outcome, modifier, subtype)
            player_names = tuple(fills[k] for k in ("A", "B") if k in fills)
            scales = (1.0, cfg.second_scale)
            sequences = {}
            for name in player_names:
                idx = names.index(name)
                sequences[name] = _sequence(space, idx, cfg.seq_len,
                                            cfg.noise_sigma, rng, "dataset")

            candidates = []
            for name, sc in zip(player_names, scales):
                idx = names.index(name)
                candidates.append(_sequence(space, idx, cfg.seq_len,
                                            cfg.noise_sigma, rng,
                                            "tracker-stub", scale=sc))
            while len(candidates) < cfg.n_candidates:
                idx = int(rng.integers(cfg.n_players))
                candidates.append(_sequence(space, idx, cfg.seq_len,
                                            cfg.distractor_sigma, rng,
                                            "tracker-stub",
                                            scale=cfg.distractor_scale))

            records.append(ClipRecord(
                video_id=f"c{clip_no:05d}",
                game_id=game_id,
                caption=caption,
                event_type=ev_type,
                player_names=player_names,
                player_sequences=sequences,
                video_features=Tensor(video),
                candidate_sequences=candidates,
            ))
            clip_no += 1

    vocab_words: set[str] = set()
    for rec in records:
        vocab_words.update(tokenize(rec.caption))
    vocab = Vocabulary.from_tokens(vocab_words)
    return records, catalog, vocab


def extract_player_names(caption: str, catalog: PlayerCatalog) -> list[str]:
    """Names from the catalog in their order of appearance in the caption."""
    hits = []
    for name in catalog.names:
        pos = caption.find(name)
        if pos >= 0:
            hits.append((pos, name))
    return [name for _, name in sorted(hits)]


def label_sequences(records: Iterable[ClipRecord], catalog: PlayerCatalog) -> None:
    """Stamp catalog indices onto annotated sequences (loader leaves them
    unset because the catalog is derived from the corpus)."""
    for rec in records:
        for name, seq in rec.player_sequences.items():
            seq.player_label = catalog.index(name)


def derive_catalog(records: Sequence[ClipRecord]) -> PlayerCatalog:
    names = sorted({n for r in records for n in r.player_names})
    return PlayerCatalog(tuple(names))


def derive_vocabulary(records: Sequence[ClipRecord]) -> Vocabulary:
    words: set[str] = set()
    for rec in records:
        words.update(tokenize(rec.caption))
    return Vocabulary.from_tokens(words)


def corpus_stats_summary(records: Sequence[ClipRecord]) -> dict:
    """Counts echoed by the stats command."""
    events: dict[str, int] = {}
    players: dict[str, int] = {}
    lengths = []
    for rec in records:
        events[rec.event_type] = events.get(rec.event_type, 0) + 1
        for name in rec.player_names:
            players[name] = players.get(name, 0) + 1
        lengths.append(len(tokenize(rec.caption)))
    games = sorted({r.game_id for r in records})
    return {
        "n_clips": len(records),
        "n_games": len(games),
        "n_players": len(players),
        "events": dict(sorted(events.items())),
        "caption_tokens": {
            "min": min(lengths) if lengths else 0,
            "max": max(lengths) if lengths else 0,
            "mean": sum(lengths) / len(lengths) if lengths else 0.0,
        },
        "top_players": dict(sorted(players.items(),
                                   key=lambda kv: (-kv[1], kv[0]))[:10]),
        "vocab_size": derive_vocabulary(records).size if records else 4,
    }
