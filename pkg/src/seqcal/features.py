"""Calibration features derived from attention: entropy and input coverage."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import FeatureError
from .records import PROB_ATOL, SequenceRecord, StepFeatures, TokenRecord


@dataclass(frozen=True)
class FeatureConfig:
    """Coverage counts source positions whose cumulative attention exceeds
    ``coverage_threshold``; entropy is always in nats."""

    coverage_threshold: float = 0.35

    def __post_init__(self) -> None:
        if not 0.0 < self.coverage_threshold < 1.0:
            raise FeatureError(f"coverage threshold must be in (0, 1), got {self.coverage_threshold}")


def attention_entropy(alpha: Sequence[float] | np.ndarray) -> float:
    """Shannon entropy (nats) of an attention distribution, with 0*ln 0 := 0."""
    arr = np.asarray(alpha, dtype=np.float64)
    if arr.size == 0:
        raise FeatureError("attention vector is empty")
    if np.any(arr < 0):
        raise FeatureError("attention weights must be non-negative")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_ATOL:
        raise FeatureError(f"attention sums to {total:.8f}, expected 1")
    positive = arr[arr > 0]
    return max(0.0, -float(np.sum(positive * np.log(positive))))


def coverage(cum_attention: Sequence[float] | np.ndarray, delta: float) -> float:
    """Fraction of source positions with cumulative attention strictly above delta."""
    arr = np.asarray(cum_attention, dtype=np.float64)
    if arr.size == 0:
        raise FeatureError("cumulative attention vector is empty")
    if np.any(arr < 0):
        raise FeatureError("cumulative attention weights must be non-negative")
    return float(np.count_nonzero(arr > delta)) / arr.size


def enrich(seq: SequenceRecord, cfg: FeatureConfig = FeatureConfig()) -> SequenceRecord:
    """Fill (entropy, coverage) on every step of a sequence.

    Cumulative attention at step t includes step t itself and is
    reconstructed as the running sum of per-step attention when absent.
    Steps that already carry features pass through unchanged; a step whose
    attention can only be recovered by differencing consecutive cumulative
    vectors is handled that way. Idempotent.
    """
    running: np.ndarray | None = None
    prev_cum: np.ndarray | None = None
    new_steps: list[TokenRecord] = []
    for step in seq.steps:
        attention = step.attention
        cum = np.asarray(step.cum_attention, dtype=np.float64) if step.cum_attention is not None else None
        if attention is None and cum is not None:
            base = prev_cum if prev_cum is not None else np.zeros_like(cum)
            diff = cum - base
            if np.any(diff < -PROB_ATOL):
                raise FeatureError(
                    f"sequence {seq.seq_id!r} step {step.t}: cumulative attention decreased"
                )
            attention = tuple(np.maximum(diff, 0.0))

        if attention is not None:
            alpha = np.asarray(attention, dtype=np.float64)
            running = alpha.copy() if running is None else running + alpha
            current_cum = cum if cum is not None else running
            feats = StepFeatures(
                entropy=attention_entropy(alpha),
                coverage=coverage(current_cum, cfg.coverage_threshold),
            )
            updated = step
            if step.features is None:
                updated = replace(updated, features=feats)
            if step.cum_attention is None:
                updated = replace(updated, cum_attention=tuple(float(c) for c in current_cum))
            new_steps.append(updated)
            prev_cum = np.asarray(current_cum, dtype=np.float64)
        elif step.features is not None:
            new_steps.append(step)
            prev_cum = None
        else:
            raise FeatureError(
                f"sequence {seq.seq_id!r} step {step.t}: no attention, cumulative attention, or features"
            )
    return replace(seq, steps=tuple(new_steps))


def enrich_all(sequences, cfg: FeatureConfig = FeatureConfig()) -> list[SequenceRecord]:
    return [enrich(seq, cfg) for seq in sequences]


def attention_profile(alpha_peakedness: float, aligned: int, k: int) -> np.ndarray:
    """Interpolate between one-hot alignment (0) and uniform attention (1)."""
    if not 0.0 <= alpha_peakedness <= 1.0:
        raise FeatureError(f"interpolation weight must be in [0, 1], got {alpha_peakedness}")
    one_hot = np.zeros(k)
    one_hot[aligned] = 1.0
    return (1.0 - alpha_peakedness) * one_hot + alpha_peakedness * np.full(k, 1.0 / k)

