"""Caption evaluation: BLEU-N, ROUGE-L, METEOR, CIDEr, corpus aggregation.

All metrics share one tokenizer: lowercase, punctuation stripped, except
that a single letter followed by a period stays intact so abbreviated
name initials ("t. jones") survive as their own tokens.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyCorpus, EmptyInput

_TOKEN_RE = re.compile(r"[a-z]\.(?![a-z0-9])|[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Deterministic shared preprocessing for all metrics."""
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]],
         n_max: int = 4, smooth: bool = False) -> float:
    """Geometric mean of clipped n-gram precisions times the brevity
    penalty exp(1 - r/c), with r the shortest reference length.

    Without smoothing any zero precision zeroes the score; the add-one
    flag smooths zero numerators for tiny corpora.
    """
    if not references:
        raise EmptyInput("bleu needs at least one reference")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, n_max + 1):
        cand_counts = ngrams(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clip = Counter()
        for ref in references:
            for gram, cnt in ngrams(ref, n).items():
                if cnt > clip[gram]:
                    clip[gram] = cnt
        matched = sum(min(cnt, clip[gram]) for gram, cnt in cand_counts.items())
        if matched == 0:
            if not smooth:
                return 0.0
            p_n = 1.0 / (total + 1.0)
        elif smooth:
            p_n = (matched + 1.0) / (total + 1.0)
        else:
            p_n = matched / total
        log_sum += math.log(p_n) / n_max
    c = len(candidate)
    r = min(len(ref) for ref in references)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str],
            beta: float = 1.0) -> float:
    """LCS F-measure: recall against the reference, precision against the
    candidate, combined as (1 + b^2) R P / (R + b^2 P)."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    return ((1.0 + beta * beta) * recall * precision
            / (recall + beta * beta * precision))


# ---------------------------------------------------------------------------
# METEOR


def _align(candidate: Sequence[str], reference: Sequence[str],
           node_budget: int = 200_000) -> tuple[int, int]:
    """Exact-match unigram alignment: maximize matches, then minimize
    chunks (maximal runs contiguous in both sentences).

    Branch-and-bound over candidate positions; on pathological inputs the
    budget trips and the best alignment found so far is kept.
    """
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    max_matches = sum(min(c, ref_counts[w]) for w, c in cand_counts.items())
    if max_matches == 0:
        return 0, 0

    ref_pos: dict[str, list[int]] = {}
    for j, w in enumerate(reference):
        ref_pos.setdefault(w, []).append(j)

    # how many matches remain achievable from candidate position i on
    remaining = [0] * (len(candidate) + 1)
    tail = Counter()
    for i in range(len(candidate) - 1, -1, -1):
        tail[candidate[i]] += 1
        remaining[i] = sum(min(c, ref_counts[w]) for w, c in tail.items())

    best_chunks = max_matches + 1
    nodes = 0

    def dfs(i: int, used: int, matched: int, chunks: int, last_j: int) -> None:
        nonlocal best_chunks, nodes
        if chunks >= best_chunks:
            return
        if matched + remaining[i] < max_matches:
            return
        if nodes >= node_budget:
            return
        nodes += 1
        if matched == max_matches:
            best_chunks = min(best_chunks, chunks)
            return
        if i >= len(candidate):
            return
        word = candidate[i]
        for j in ref_pos.get(word, ()):
            if used >> j & 1:
                continue
            cont = (last_j == j - 1)
            dfs(i + 1, used | (1 << j), matched + 1,
                chunks if cont else chunks + 1, j)
        # skipping position i is only useful when the word has matches left
        # elsewhere or none at all; always allowed, bounded by `remaining`
        dfs(i + 1, used, matched, chunks, -2)

    dfs(0, 0, 0, 0, -2)
    if best_chunks > max_matches:
        best_chunks = max_matches  # budget fallback: worst case one chunk each
    return max_matches, best_chunks


def meteor(candidate: Sequence[str], reference: Sequence[str],
           alpha: float = 0.9, gamma: float = 0.5) -> float:
    """(1 - gamma * (chunks/matches)^3) * P R / (alpha P + (1 - alpha) R)
    over exact-match unigram alignments; zero matches give zero."""
    if not candidate or not reference:
        return 0.0
    matches, chunks = _align(candidate, reference)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = precision * recall / (alpha * precision + (1.0 - alpha) * recall)
    penalty = (chunks / matches) ** 3
    return (1.0 - gamma * penalty) * f_mean


# ---------------------------------------------------------------------------
# CIDEr


@dataclass(frozen=True)
class CorpusStats:
    """Per-n document frequencies over the reference corpus."""

    df: tuple[dict, ...]   # df[n-1][gram] = number of clips containing gram
    corpus_size: int
    n_max: int = 4


def build_corpus_stats(reference_sets: Sequence[Sequence[Sequence[str]]],
                       n_max: int = 4) -> CorpusStats:
    if not reference_sets:
        raise EmptyCorpus("no reference sets")
    df: list[dict] = [dict() for _ in range(n_max)]
    for refs in reference_sets:
        for n in range(1, n_max + 1):
            seen = set()
            for ref in refs:
                seen.update(ngrams(ref, n))
            for gram in seen:
                df[n - 1][gram] = df[n - 1].get(gram, 0) + 1
    return CorpusStats(tuple(df), len(reference_sets), n_max)


def _tfidf(tokens: Sequence[str], n: int, stats: CorpusStats) -> dict:
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    out = {}
    for gram, cnt in counts.items():
        idf = math.log(stats.corpus_size / max(stats.df[n - 1].get(gram, 0), 1))
        if idf != 0.0:
            out[gram] = (cnt / total) * idf
    return out


def _cosine(a: dict, b: dict) -> float:
    if not a or not b:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(candidate: Sequence[str], references: Sequence[Sequence[str]],
          stats: CorpusStats, n_max: int | None = None,
          scale: float = 10.0) -> float:
    """Mean over n of the reference-averaged TF-IDF cosine, times scale.

    tf is n-gram count over the caption's n-gram total; idf is
    ln(corpus_size / df) with unseen grams clipped to df 1. Scale 1 gives
    the raw cosine average.
    """
    if not references:
        raise EmptyInput("cider needs at least one reference")
    n_max = stats.n_max if n_max is None else n_max
    acc = 0.0
    for n in range(1, n_max + 1):
        cand_vec = _tfidf(candidate, n, stats)
        sim = 0.0
        for ref in references:
            sim += _cosine(cand_vec, _tfidf(ref, n, stats))
        acc += sim / len(references)
    return scale * acc / n_max


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class EvalReport:
    config: dict
    per_clip: list[dict]
    corpus: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "per_clip": self.per_clip,
                "corpus": self.corpus}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_corpus(
    pairs: Sequence[tuple[str, Sequence[str]]],
    config: dict | None = None,
    ids: Sequence[str] | None = None,
    event_types: Sequence[str] | None = None,
    bleu_n: int = 4,
    bleu_smooth: bool = False,
    cider_scale: float = 10.0,
) -> EvalReport:
    """Score every (candidate, references) pair and aggregate corpus means.

    CIDEr document frequencies are built over this run's reference corpus.
    """
    if not pairs:
        raise EmptyCorpus("no caption pairs to evaluate")
    tokenized = [
        (tokenize(cand), [tokenize(r) for r in refs]) for cand, refs in pairs
    ]
    stats = build_corpus_stats([refs for _, refs in tokenized])

    per_clip = []
    for i, (cand, refs) in enumerate(tokenized):
        entry = {}
        if ids is not None:
            entry["video_id"] = ids[i]
        entry["bleu4"] = bleu(cand, refs, n_max=bleu_n, smooth=bleu_smooth)
        entry["rouge_l"] = max(rouge_l(cand, r) for r in refs)
        entry["meteor"] = max(meteor(cand, r) for r in refs)
        entry["cider"] = cider(cand, refs, stats, scale=cider_scale)
        if event_types is not None:
            entry["event_type"] = event_types[i]
        per_clip.append(entry)

    def mean(key: str) -> float:
        return sum(e[key] for e in per_clip) / len(per_clip)

    corpus = {
        "bleu4": mean("bleu4"),
        "rouge_l": mean("rouge_l"),
        "meteor": mean("meteor"),
        "cider": mean("cider"),
    }
    if event_types is not None:
        by_event: dict[str, dict] = {}
        for ev in sorted(set(event_types)):
            rows = [e for e in per_clip if e["event_type"] == ev]
            by_event[ev] = {
                "count": len(rows),
                "cider": sum(e["cider"] for e in rows) / len(rows),
                "bleu4": sum(e["bleu4"] for e in rows) / len(rows),
            }
        corpus["by_event"] = by_event
    return EvalReport(config or {}, per_clip, corpus)
