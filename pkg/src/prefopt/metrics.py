"""Evaluation: re-ranking accuracy, reward win rate, and boundary tracking.

Both ranking metrics use strict comparisons, so ties count against the
model; this makes them invariant to any positive rescaling of the reward
and gives an untrained all-tied model a score of zero rather than a lucky
one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Context, InvalidParameterError, LikelihoodRecord, PreferenceInstance
from .data import EvalCandidateSet
from .policy import batch_scores
from .selection import BoundarySelection, partition_by_gap


@dataclass(frozen=True, slots=True)
class MetricsReport:
    """Final scores and training-time curves for one run.

    ``per_step_seconds`` is the preference-optimization stage's wall clock
    divided by its step count (training work only, diagnostics excluded).
    """

    hit_ratio_at_1: float
    reward_win_rate: float
    boundary_curve: tuple[tuple[float, float], ...]  # (progress, boundary fraction)
    per_step_seconds: float
    epoch_losses: tuple[float, ...]

    def __post_init__(self):
        for name in ("hit_ratio_at_1", "reward_win_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")
        progress = [p for p, _ in self.boundary_curve]
        if any(b < 0 or b > 1 for _, b in self.boundary_curve):
            raise InvalidParameterError("boundary fractions must lie in [0, 1]")
        if progress != sorted(progress):
            raise InvalidParameterError("progress fractions must ascend")


def hit_ratio_at_1(model, entries: Sequence[tuple[Context, EvalCandidateSet]]) -> float:
    """Fraction of entries whose positive strictly outranks all 20 distractors."""
    if len(entries) == 0:
        raise InvalidParameterError("need at least one evaluation entry")
    contexts = [ctx for ctx, _ in entries]
    scores = batch_scores(model, contexts)
    hits = 0
    for row, (_, cand) in zip(scores, entries):
        if row[cand.positive] > row[list(cand.distractors)].max():
            hits += 1
    return hits / len(entries)


def reward_win_rate(model, ref, instances: Sequence[PreferenceInstance], beta0: float = 1.0) -> float:
    """Fraction of instances where the positive's implicit reward beats every negative's.

    The reward is beta0 * (log-likelihood ratio against the reference); the
    strict comparison makes the result independent of beta0 > 0.
    """
    if len(instances) == 0:
        raise InvalidParameterError("need at least one instance")
    if beta0 <= 0:
        raise InvalidParameterError("beta0 must be positive")
    from .policy import likelihood_records

    wins = 0
    for rec in likelihood_records(model, ref, instances):
        pos_reward = beta0 * (rec.pos_theta - rec.pos_ref)
        neg_reward = max(beta0 * (t - r) for t, r in zip(rec.neg_theta, rec.neg_ref))
        if pos_reward > neg_reward:
            wins += 1
    return wins / len(instances)


def boundary_fraction_curve(
    checkpoints: Sequence[tuple[float, Sequence[LikelihoodRecord]]],
    threshold: float = 0.0,
) -> list[tuple[float, float]]:
    """Share of boundary-critical negatives at each training-progress checkpoint."""
    if len(checkpoints) < 2:
        raise InvalidParameterError("need at least two checkpoints")
    progress = [p for p, _ in checkpoints]
    if progress != sorted(progress):
        raise InvalidParameterError("checkpoint progress values must ascend")
    curve = []
    for p, records in checkpoints:
        total = sum(rec.k for rec in records)
        if total == 0:
            raise InvalidParameterError("checkpoint has no records")
        boundary = sum(len(partition_by_gap(rec, threshold).boundary) for rec in records)
        curve.append((float(p), boundary / total))
    return curve


def mean_selected_negatives(selections: Sequence[BoundarySelection]) -> float:
    """Average boundary-set size over the logged selections."""
    if len(selections) == 0:
        raise InvalidParameterError("need at least one logged selection")
    return math.fsum(len(sel.boundary) for sel in selections) / len(selections)
