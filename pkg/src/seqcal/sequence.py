"""Decoding and sequence-level calibration over an abstract scoring model.

The scoring model is an opaque autoregressive interface: given a source and
a prefix it yields a next-token distribution and an attention vector. Beam
search, ancestral sampling, BLEU, expected BLEU, and the expected-vs-actual
BLEU calibration gap all operate on that interface alone.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import MetricError, ModelError
from .records import PROB_ATOL, BinningConfig, ReliabilityHistogram

Tokens = tuple[int, ...]


class ScoringModel(ABC):
    """Deterministic next-token scorer: distribution + attention given (source, prefix)."""

    @property
    @abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abstractmethod
    def eos_id(self) -> int: ...

    @abstractmethod
    def start(self, source):
        """Fresh decoder state for a source."""

    @abstractmethod
    def step(self, state, prefix: Tokens):
        """Return (probabilities over V, attention over source positions, next state)."""


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 4
    max_len: int = 64
    length_normalize: bool = False

    def __post_init__(self) -> None:
        if self.beam_width < 1 or self.max_len < 1:
            raise ModelError("beam width and max length must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    """A finished or truncated decode: tokens end with EOS or at max_len."""

    tokens: Tokens
    log_prob: float
    score: float

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)


def _checked_step(model: ScoringModel, state, prefix: Tokens):
    probs, alpha, next_state = model.step(state, prefix)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (model.vocab_size,):
        raise ModelError(f"model emitted {probs.shape} probabilities for V={model.vocab_size}")
    if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > PROB_ATOL:
        raise ModelError(f"model emitted an invalid distribution (sum={float(probs.sum()):.8f})")
    return probs, alpha, next_state


def beam_search(model: ScoringModel, source, cfg: BeamConfig) -> list[Hypothesis]:
    """Standard beam search, best hypothesis first.

    Live prefixes each expand with their top-B tokens; the global top-B
    live candidates survive by cumulative log-probability. A prefix that
    emits EOS retires to a finished pool without consuming a beam slot.
    Ties break toward the lexicographically smaller token sequence.
    """
    live: list[tuple[float, Tokens, object]] = [(0.0, (), model.start(source))]
    finished: list[tuple[float, Tokens]] = []
    for _ in range(cfg.max_len):
        if not live:
            break
        candidates: list[tuple[float, Tokens, object]] = []
        for log_prob, prefix, state in live:
            probs, _, next_state = _checked_step(model, state, prefix)
            order = np.argsort(-probs, kind="stable")[: cfg.beam_width]
            for token in order:
                p = probs[token]
                if p <= 0.0:
                    continue
                extended = (log_prob + math.log(p), prefix + (int(token),), next_state)
                if token == model.eos_id:
                    finished.append(extended[:2])
                else:
                    candidates.append(extended)
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = candidates[: cfg.beam_width]
    finished.extend((log_prob, prefix) for log_prob, prefix, _ in live)

    def final_score(log_prob: float, tokens: Tokens) -> float:
        if cfg.length_normalize and tokens:
            return log_prob / len(tokens)
        return log_prob

    hypotheses = [
        Hypothesis(tokens=tokens, log_prob=log_prob, score=final_score(log_prob, tokens))
        for log_prob, tokens in finished
    ]
    hypotheses.sort(key=lambda h: (-h.score, h.tokens))
    return hypotheses


def sample_sequence(
    model: ScoringModel, source, rng: np.random.Generator, max_len: int
) -> Tokens:
    """Ancestral sampling until EOS or max_len; includes the EOS token when emitted."""
    state = model.start(source)
    tokens: Tokens = ()
    for _ in range(max_len):
        probs, _, state = _checked_step(model, state, tokens)
        token = int(rng.choice(model.vocab_size, p=probs / probs.sum()))
        tokens = tokens + (token,)
        if token == model.eos_id:
            break
    return tokens


def strip_eos(tokens: Sequence[int], eos_id: int) -> Tokens:
    out = tuple(tokens)
    while out and out[-1] == eos_id:
        out = out[:-1]
    return out


def _ngram_counts(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(candidate: Sequence[int], reference: Sequence[int]) -> float:
    """Smoothed sentence BLEU-4 in [0, 1].

    Modified n-gram precisions for n = 1..4 with add-one smoothing on both
    numerator and denominator for n >= 2; unigram precision is unsmoothed so
    zero lexical overlap scores exactly 0. Brevity penalty
    exp(min(0, 1 - |ref|/|cand|)).
    """
    if len(reference) == 0:
        raise MetricError("reference must be non-empty")
    if len(candidate) == 0:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        cand_counts = _ngram_counts(candidate, n)
        ref_counts = _ngram_counts(reference, n)
        matched = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        total = max(len(candidate) - n + 1, 0)
        if n == 1:
            if matched == 0:
                return 0.0
            log_precisions.append(math.log(matched / total))
        else:
            log_precisions.append(math.log((matched + 1) / (total + 1)))
    brevity = min(0.0, 1.0 - len(reference) / len(candidate))
    return math.exp(brevity + math.fsum(log_precisions) / 4.0)


def corpus_bleu(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Unsmoothed corpus BLEU-4 with pooled n-gram counts and pooled brevity penalty."""
    if not pairs:
        raise MetricError("corpus BLEU needs at least one (candidate, reference) pair")
    matched = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for candidate, reference in pairs:
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, 5):
            cand_counts = _ngram_counts(candidate, n)
            ref_counts = _ngram_counts(reference, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += max(len(candidate) - n + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched) or any(t == 0 for t in totals):
        return 0.0
    log_precisions = [math.log(m / t) for m, t in zip(matched, totals)]
    brevity = min(0.0, 1.0 - ref_len / cand_len)
    return math.exp(brevity + math.fsum(log_precisions) / 4.0)


def bleu_or_degenerate(candidate: Sequence[int], reference: Sequence[int]) -> float:
    """sentence_bleu extended to empty references: 1 on an exact empty match, else 0."""
    if len(reference) == 0:
        return 1.0 if len(candidate) == 0 else 0.0
    return sentence_bleu(candidate, reference)


def expected_bleu(
    model: ScoringModel,
    source,
    prediction: Sequence[int],
    rng: np.random.Generator,
    num_samples: int = 100,
    max_len: int = 64,
) -> float:
    """Monte Carlo estimate of the BLEU the prediction earns against references
    drawn from the model's own sequence distribution."""
    if num_samples < 1:
        raise MetricError("expected BLEU needs at least one sample")
    cand = strip_eos(prediction, model.eos_id)
    scores = [
        bleu_or_degenerate(
            cand, strip_eos(sample_sequence(model, source, rng, max_len), model.eos_id)
        )
        for _ in range(num_samples)
    ]
    return math.fsum(scores) / num_samples


def structured_ece(
    points: Iterable[tuple[float, float]],
    bins: BinningConfig = BinningConfig(),
) -> tuple[float, ReliabilityHistogram]:
    """Calibration gap between expected and actual BLEU, binned by expected BLEU."""
    materialized = list(points)
    if not materialized:
        raise MetricError("structured calibration needs at least one point")
    hist = ReliabilityHistogram.empty(bins.num_bins)
    hist.count = float(len(materialized))
    grouped: dict[int, list[tuple[float, float]]] = {}
    for expected, actual in materialized:
        if not (0.0 <= expected <= 1.0 and 0.0 <= actual <= 1.0):
            raise MetricError(f"BLEU values must lie in [0, 1], got ({expected}, {actual})")
        grouped.setdefault(bins.index(expected), []).append((expected, actual))
    gaps = []
    for b, members in grouped.items():
        hist.weight[b] = float(len(members))
        hist.confidence_sum[b] = math.fsum(e for e, _ in members)
        hist.accuracy_sum[b] = math.fsum(a for _, a in members)
        gaps.append(abs(hist.accuracy_sum[b] - hist.confidence_sum[b]))
    score = math.fsum(gaps) / hist.count
    return score, hist
