"""Sentence and corpus BLEU with clipped n-gram precision.

Cumulative geometric mean over orders 1..max_n, epsilon smoothing on zero
precisions (sentence-level averaging would otherwise hit exact zeros at
orders 3-4 constantly), and a brevity penalty against the closest
reference length with ties broken toward the shorter reference.
PAD/BOS/EOS ids are stripped before any counting.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import BOS, EOS, PAD, TokenSeq

_STRIP = {PAD, BOS, EOS}


class MetricsError(ValueError):
    """Empty candidates/references or out-of-range spec fields."""


@dataclass(frozen=True)
class BleuSpec:
    """Scoring knobs: highest n-gram order, smoothing floor, cumulative flag.

    cumulative=True gives the usual BLEU-n (geometric mean of orders
    1..max_n); False scores the single order max_n alone.
    """

    max_n: int = 2
    epsilon: float = 1e-9
    cumulative: bool = True

    def __post_init__(self):
        if not (1 <= self.max_n <= 4):
            raise MetricsError(f"max_n must be in 1..4, got {self.max_n}")
        if self.epsilon < 0:
            raise MetricsError(f"epsilon must be >= 0, got {self.epsilon}")


def _surface_tokens(seq: TokenSeq) -> tuple:
    return tuple(i for i in seq.content() if i not in _STRIP)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


class ReferenceTables:
    """Max-merged reference n-gram counts, built once and shared read-only."""

    def __init__(self, references, max_n: int):
        refs = [_surface_tokens(r) for r in references]
        if not refs:
            raise MetricsError("empty reference set")
        self.lengths = [len(r) for r in refs]
        self.max_counts = []
        for n in range(1, max_n + 1):
            merged = Counter()
            for r in refs:
                for gram, count in _ngrams(r, n).items():
                    if count > merged[gram]:
                        merged[gram] = count
            self.max_counts.append(merged)

    def closest_length(self, c: int) -> int:
        return min(self.lengths, key=lambda r: (abs(r - c), r))


def _modified_precision(cand_tokens, tables: ReferenceTables, n: int,
                        epsilon: float) -> float:
    counts = _ngrams(cand_tokens, n)
    total = sum(counts.values())
    if total == 0:
        return epsilon
    merged = tables.max_counts[n - 1]
    clipped = sum(min(c, merged[gram]) for gram, c in counts.items())
    if clipped == 0:
        return epsilon
    return clipped / total


def _brevity_log(c: int, r: int) -> float:
    return 0.0 if c > r else 1.0 - r / c


def bleu_from_tables(candidate: TokenSeq, tables: ReferenceTables,
                     spec: BleuSpec) -> float:
    cand = _surface_tokens(candidate)
    if not cand:
        raise MetricsError("candidate is empty after padding strip")
    orders = range(1, spec.max_n + 1) if spec.cumulative else [spec.max_n]
    log_p = [math.log(_modified_precision(cand, tables, n, spec.epsilon))
             for n in orders]
    bp = _brevity_log(len(cand), tables.closest_length(len(cand)))
    return math.exp(bp + sum(log_p) / len(log_p))


def bleu(candidate: TokenSeq, references, spec: BleuSpec = BleuSpec()) -> float:
    """Sentence BLEU of one candidate against a reference list."""
    return bleu_from_tables(candidate, ReferenceTables(references, spec.max_n), spec)


def corpus_bleu(candidates, references, spec: BleuSpec = BleuSpec()) -> float:
    """Mean sentence BLEU of each candidate against the whole reference list."""
    cands = list(candidates)
    if not cands:
        raise MetricsError("no candidates to score")
    tables = ReferenceTables(list(references), spec.max_n)
    return sum(bleu_from_tables(c, tables, spec) for c in cands) / len(cands)
