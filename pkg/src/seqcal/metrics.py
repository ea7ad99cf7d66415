"""Calibration metrics: ECE, weighted ECE, NLL, diagnostic partitions, exports.

All scores aggregate per-bin sums with ``math.fsum``, so results are
bit-identical under record permutation and under any ``threads`` setting.
The sparse record representation is reduced directly (the V-K unlisted
tokens share one probability and therefore one bin), which is exactly
equivalent to densifying first.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MetricError
from .records import BinningConfig, ReliabilityHistogram, TokenRecord


def top1(record: TokenRecord) -> tuple[int, float]:
    """Predicted token and its confidence, identical to argmax over densify()."""
    total = math.fsum(p for _, p in record.entries) + record.rest_mass
    scale = 1.0 / total if total > 0 else 1.0
    best_id, best_p = record.vocab_size, -1.0
    for token_id, prob in record.entries:
        p = prob * scale
        if p > best_p or (p == best_p and token_id < best_id):
            best_id, best_p = token_id, p
    unlisted = record.vocab_size - len(record.entries)
    if unlisted > 0:
        share = (record.rest_mass / unlisted) * scale
        first_free = _smallest_unlisted(record)
        if share > best_p or (share == best_p and first_free < best_id):
            best_id, best_p = first_free, share
    return best_id, best_p


def _smallest_unlisted(record: TokenRecord) -> int:
    listed = sorted(i for i, _ in record.entries)
    candidate = 0
    for token_id in listed:
        if token_id == candidate:
            candidate += 1
        elif token_id > candidate:
            break
    return candidate


@dataclass
class _Terms:
    """Flat per-item contributions destined for binned fsum reduction."""

    bin_idx: list[int]
    gap: list[float]
    weight: list[float]
    conf: list[float]
    acc: list[float]
    count: int

    @classmethod
    def empty(cls) -> "_Terms":
        return cls([], [], [], [], [], 0)

    def extend(self, other: "_Terms") -> None:
        self.bin_idx.extend(other.bin_idx)
        self.gap.extend(other.gap)
        self.weight.extend(other.weight)
        self.conf.extend(other.conf)
        self.acc.extend(other.acc)
        self.count += other.count


def _ece_chunk(records: Sequence[TokenRecord], bins: BinningConfig) -> _Terms:
    terms = _Terms.empty()
    for record in records:
        pred, conf = top1(record)
        correct = 1.0 if pred == record.gold_id else 0.0
        terms.bin_idx.append(bins.index(conf))
        terms.gap.append(correct - conf)
        terms.weight.append(1.0)
        terms.conf.append(conf)
        terms.acc.append(correct)
        terms.count += 1
    return terms


def _weighted_chunk(records: Sequence[TokenRecord], bins: BinningConfig) -> _Terms:
    terms = _Terms.empty()
    for record in records:
        total = math.fsum(p for _, p in record.entries) + record.rest_mass
        scale = 1.0 / total if total > 0 else 1.0
        for token_id, prob in record.entries:
            p = prob * scale
            if p == 0.0:
                continue
            is_gold = token_id == record.gold_id
            terms.bin_idx.append(bins.index(p))
            terms.gap.append(p * ((1.0 if is_gold else 0.0) - p))
            terms.weight.append(p)
            terms.conf.append(p * p)
            terms.acc.append(p if is_gold else 0.0)
        unlisted = record.vocab_size - len(record.entries)
        if unlisted > 0:
            share = (record.rest_mass / unlisted) * scale
            if share > 0.0:
                gold_in_tail = 0.0 if record.gold_in_entries() else 1.0
                # all unlisted tokens carry the same probability: one pooled item
                terms.bin_idx.append(bins.index(share))
                terms.gap.append(share * gold_in_tail - unlisted * share * share)
                terms.weight.append(unlisted * share)
                terms.conf.append(unlisted * share * share)
                terms.acc.append(share * gold_in_tail)
        terms.count += 1
    return terms


def _collect(
    records: Sequence[TokenRecord],
    bins: BinningConfig,
    chunk_fn: Callable[[Sequence[TokenRecord], BinningConfig], _Terms],
    threads: int,
) -> _Terms:
    if threads <= 1 or len(records) < 2 * threads:
        return chunk_fn(records, bins)
    size = (len(records) + threads - 1) // threads
    chunks = [records[i : i + size] for i in range(0, len(records), size)]
    merged = _Terms.empty()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # merge in submission order so the reduction is deterministic
        for part in pool.map(lambda c: chunk_fn(c, bins), chunks):
            merged.extend(part)
    return merged


def _finalize(terms: _Terms, bins: BinningConfig) -> tuple[float, ReliabilityHistogram]:
    if terms.count == 0:
        raise MetricError("metric undefined on an empty record stream")
    hist = ReliabilityHistogram.empty(bins.num_bins)
    hist.count = float(terms.count)
    bin_idx = np.asarray(terms.bin_idx, dtype=np.int64)
    order = np.argsort(bin_idx, kind="stable")
    gap = np.asarray(terms.gap)[order]
    weight = np.asarray(terms.weight)[order]
    conf = np.asarray(terms.conf)[order]
    acc = np.asarray(terms.acc)[order]
    sorted_bins = bin_idx[order]
    present = np.unique(sorted_bins)
    bounds = np.searchsorted(sorted_bins, present)
    bounds = np.append(bounds, len(sorted_bins))
    bin_gaps: list[float] = []
    for i, b in enumerate(present):
        lo, hi = bounds[i], bounds[i + 1]
        bin_gaps.append(abs(math.fsum(gap[lo:hi])))
        hist.weight[b] = math.fsum(weight[lo:hi])
        hist.confidence_sum[b] = math.fsum(conf[lo:hi])
        hist.accuracy_sum[b] = math.fsum(acc[lo:hi])
    score = math.fsum(bin_gaps) / terms.count
    return score, hist


def ece(
    records: Iterable[TokenRecord],
    bins: BinningConfig = BinningConfig(),
    *,
    threads: int = 1,
) -> tuple[float, ReliabilityHistogram]:
    """Top-1 expected calibration error plus its reliability histogram."""
    materialized = records if isinstance(records, list) else list(records)
    return _finalize(_collect(materialized, bins, _ece_chunk, threads), bins)


def weighted_ece(
    records: Iterable[TokenRecord],
    bins: BinningConfig = BinningConfig(),
    *,
    threads: int = 1,
) -> tuple[float, ReliabilityHistogram]:
    """Calibration error of the entire distribution: every token's probability
    is binned and contributes p * (correct - p); zero-probability tokens
    contribute nothing."""
    materialized = records if isinstance(records, list) else list(records)
    return _finalize(_collect(materialized, bins, _weighted_chunk, threads), bins)


def nll(records: Iterable[TokenRecord]) -> float:
    """Mean negative log-likelihood of the gold tokens, in nats per token."""
    losses: list[float] = []
    for record in records:
        p = record.gold_prob()
        if p <= 0.0:
            raise MetricError(
                f"gold token {record.gold_id} has zero probability in sequence "
                f"{record.seq_id!r} step {record.t}: NLL is infinite"
            )
        losses.append(-math.log(p))
    if not losses:
        raise MetricError("metric undefined on an empty record stream")
    return math.fsum(losses) / len(losses)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split records for diagnostic metrics.

    kinds: ``token_class`` (predicted-token split against EOS or a given id),
    ``entropy_split`` (attention entropy above/below a threshold), and
    ``confidence_threshold`` (top-1 confidence above/below a threshold).
    """

    kind: str
    token_id: int | None = None
    threshold: float = 1.0

    @classmethod
    def eos(cls) -> "PartitionSpec":
        return cls(kind="token_class", token_id=None)

    @classmethod
    def token(cls, token_id: int) -> "PartitionSpec":
        return cls(kind="token_class", token_id=token_id)

    @classmethod
    def entropy(cls, threshold: float = 1.0) -> "PartitionSpec":
        if threshold < 0:
            raise MetricError(f"entropy threshold must be non-negative, got {threshold}")
        return cls(kind="entropy_split", threshold=threshold)

    @classmethod
    def confidence(cls, threshold: float) -> "PartitionSpec":
        if not 0.0 < threshold < 1.0:
            raise MetricError(f"confidence threshold must be in (0, 1), got {threshold}")
        return cls(kind="confidence_threshold", threshold=threshold)


@dataclass
class GroupMetrics:
    ece: float | None
    weighted_ece: float | None
    count: int


def partitioned_metric(
    records: Iterable[TokenRecord],
    spec: PartitionSpec,
    bins: BinningConfig = BinningConfig(),
) -> dict[str, GroupMetrics]:
    """Metrics per partition group; empty groups report count 0 with no scores."""
    materialized = list(records)
    groups: dict[str, list[TokenRecord]] = {}
    if spec.kind == "token_class":
        target_label = "eos" if spec.token_id is None else f"token:{spec.token_id}"
        groups = {target_label: [], "rest": []}
        for record in materialized:
            target = record.eos_id if spec.token_id is None else spec.token_id
            pred, _ = top1(record)
            groups[target_label if pred == target else "rest"].append(record)
    elif spec.kind == "entropy_split":
        groups = {"high": [], "low": []}
        for record in materialized:
            if record.features is None:
                raise MetricError(
                    f"entropy partition needs features; sequence {record.seq_id!r} step {record.t} has none"
                )
            label = "high" if record.features.entropy >= spec.threshold else "low"
            groups[label].append(record)
    elif spec.kind == "confidence_threshold":
        groups = {"head": [], "tail": []}
        for record in materialized:
            _, conf = top1(record)
            groups["head" if conf >= spec.threshold else "tail"].append(record)
    else:
        raise MetricError(f"unknown partition kind {spec.kind!r}")

    result: dict[str, GroupMetrics] = {}
    for label, members in groups.items():
        if not members:
            result[label] = GroupMetrics(ece=None, weighted_ece=None, count=0)
            continue
        plain, _ = ece(members, bins)
        weighted, _ = weighted_ece(members, bins)
        result[label] = GroupMetrics(ece=plain, weighted_ece=weighted, count=len(members))
    return result


def head_tail_curve(
    records: Iterable[TokenRecord],
    thresholds: Sequence[float],
) -> list[dict]:
    """Head/tail mass sums per confidence threshold.

    For each threshold T, sums predicted probability mass and gold-correct
    counts over all (densified) token probabilities below T (tail) and at or
    above T (head). Zero-probability tokens are skipped, matching the
    weighted metric convention.
    """
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise MetricError(f"head/tail threshold must be in (0, 1], got {t}")
    probs: list[float] = []
    confs: list[float] = []
    accs: list[float] = []
    for record in records:
        total = math.fsum(p for _, p in record.entries) + record.rest_mass
        scale = 1.0 / total if total > 0 else 1.0
        for token_id, prob in record.entries:
            p = prob * scale
            if p == 0.0:
                continue
            probs.append(p)
            confs.append(p)
            accs.append(1.0 if token_id == record.gold_id else 0.0)
        unlisted = record.vocab_size - len(record.entries)
        if unlisted > 0:
            share = (record.rest_mass / unlisted) * scale
            if share > 0.0:
                probs.append(share)
                confs.append(unlisted * share)
                accs.append(0.0 if record.gold_in_entries() else 1.0)
    prob_arr = np.asarray(probs)
    conf_arr = np.asarray(confs)
    acc_arr = np.asarray(accs)
    rows: list[dict] = []
    for t in thresholds:
        tail = prob_arr < t
        rows.append(
            {
                "threshold": t,
                "tail_conf_sum": math.fsum(conf_arr[tail]),
                "tail_acc_sum": math.fsum(acc_arr[tail]),
                "head_conf_sum": math.fsum(conf_arr[~tail]),
                "head_acc_sum": math.fsum(acc_arr[~tail]),
            }
        )
    return rows


RELIABILITY_COLUMNS = ("bin_lo", "bin_hi", "mass", "avg_confidence", "avg_accuracy")


def export_reliability(hist: ReliabilityHistogram) -> list[dict]:
    """Plot-ready reliability rows, one per bin; empty bins carry null averages."""
    if hist.count <= 0:
        raise MetricError("cannot export an empty histogram")
    bins = BinningConfig(hist.num_bins)
    mass = hist.mass
    rows: list[dict] = []
    for b in range(hist.num_bins):
        lo, hi = bins.edges(b)
        w = hist.weight[b]
        rows.append(
            {
                "bin_lo": lo,
                "bin_hi": hi,
                "mass": float(mass[b]),
                "avg_confidence": float(hist.confidence_sum[b] / w) if w > 0 else None,
                "avg_accuracy": float(hist.accuracy_sum[b] / w) if w > 0 else None,
            }
        )
    return rows


def write_report_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def write_reliability_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RELIABILITY_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else row[c] for c in RELIABILITY_COLUMNS])
