"""Preference objectives over log-ratios, with closed-form gradients.

Every loss has the shape -log sigma(margin) for some beta-weighted reward
margin and reports exact derivatives with respect to the policy
log-likelihoods. The beta weights are fixed coefficients: they are not
differentiated through, even when produced adaptively upstream.

Negatives outside the ``active`` subset contribute nothing and their
gradient entries are exactly 0.0, which is what lets selection strategies
plug into any of the objectives unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import InvalidParameterError, LogRatioSet
from .numerics import sigmoid, softplus


@dataclass(frozen=True, slots=True)
class BetaVector:
    """Per-negative regularization weights, one entry per active negative."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) == 0:
            raise InvalidParameterError("beta vector must be non-empty")
        for b in self.values:
            if not (math.isfinite(b) and b > 0):
                raise InvalidParameterError(f"beta entries must be positive and finite, got {b!r}")

    @classmethod
    def uniform(cls, beta: float, count: int) -> "BetaVector":
        return cls((float(beta),) * count)


@dataclass(frozen=True, slots=True)
class LossOutput:
    """Loss value plus d(loss)/d(log-likelihood) for the positive and each negative.

    ``grad_neg`` always has one entry per negative in the ratio set;
    entries for inactive negatives are exactly zero.
    """

    value: float
    grad_pos: float
    grad_neg: tuple[float, ...]


def _resolve_active(ratios: LogRatioSet, betas: BetaVector, active) -> list[tuple[int, float]]:
    """Validate and return (index, beta) pairs in ascending index order.

    Fixing the order makes summation deterministic regardless of how the
    caller enumerated the active set.
    """
    k = ratios.k
    if active is None:
        active = range(k)
    idx = list(active)
    if len(idx) == 0:
        raise InvalidParameterError("active set must be non-empty")
    if len(set(idx)) != len(idx):
        raise InvalidParameterError("active indices must be distinct")
    if any(i < 0 or i >= k for i in idx):
        raise InvalidParameterError(f"active indices must lie in [0, {k})")
    if len(betas.values) != len(idx):
        raise InvalidParameterError(
            f"beta vector length {len(betas.values)} does not match {len(idx)} active negatives"
        )
    return sorted(zip(idx, betas.values), key=lambda p: p[0])


def dpo_loss(ratios: LogRatioSet, beta: float) -> LossOutput:
    """Pairwise objective: -log sigma(beta * (r_pos - r_neg)).

    Requires exactly one negative; the multi-negative objectives below all
    reduce to this when a single negative is active.
    """
    if ratios.k != 1:
        raise InvalidParameterError(f"pairwise loss needs exactly one negative, got {ratios.k}")
    if not (math.isfinite(beta) and beta > 0):
        raise InvalidParameterError(f"beta must be positive and finite, got {beta!r}")
    z = beta * (ratios.r_pos - ratios.r_neg[0])
    s = sigmoid(-z)
    return LossOutput(value=softplus(-z), grad_pos=-beta * s, grad_neg=(beta * s,))


def dmpo_loss(ratios: LogRatioSet, betas: BetaVector, active: Iterable[int] | None = None) -> LossOutput:
    """Averaged-margin objective: -log sigma(mean_i beta_i * (r_pos - r_neg_i)).

    With every negative active and a uniform beta this is the standard
    multi-negative extension of the pairwise loss; a restricted active set
    simply shrinks the average to the selected negatives.
    """
    pairs = _resolve_active(ratios, betas, active)
    m = len(pairs)
    z = math.fsum(b * (ratios.r_pos - ratios.r_neg[i]) for i, b in pairs) / m
    s = sigmoid(-z)
    grad_neg = [0.0] * ratios.k
    for i, b in pairs:
        grad_neg[i] = b / m * s
    grad_pos = -math.fsum(b for _, b in pairs) / m * s
    return LossOutput(value=softplus(-z), grad_pos=grad_pos, grad_neg=tuple(grad_neg))


def sdpo_loss(ratios: LogRatioSet, betas: BetaVector, active: Iterable[int] | None = None) -> LossOutput:
    """Softmax-ranking objective: -log sigma(-log sum_i exp(beta_i * (r_neg_i - r_pos))).

    The inner log-sum-exp ranks the positive against the active negatives
    jointly; computed with max-subtraction so large margins cannot overflow.
    """
    pairs = _resolve_active(ratios, betas, active)
    u = [b * (ratios.r_neg[i] - ratios.r_pos) for i, b in pairs]
    hi = max(u)
    log_e = hi + math.log(math.fsum(math.exp(v - hi) for v in u))
    s = sigmoid(log_e)
    # softmax weights over the active negatives
    w = [math.exp(v - log_e) for v in u]
    grad_neg = [0.0] * ratios.k
    for (i, b), wi in zip(pairs, w):
        grad_neg[i] = s * wi * b
    grad_pos = -math.fsum(s * wi * b for (_, b), wi in zip(pairs, w))
    return LossOutput(value=softplus(log_e), grad_pos=grad_pos, grad_neg=tuple(grad_neg))


def mppo_loss(ratios: LogRatioSet, betas: BetaVector, active: Iterable[int] | None = None) -> LossOutput:
    """Mean of pairwise losses: (1/m) sum_i -log sigma(beta_i * (r_pos - r_neg_i)).

    Unlike the averaged-margin objective, each negative saturates
    independently here.
    """
    pairs = _resolve_active(ratios, betas, active)
    m = len(pairs)
    value = 0.0
    grad_neg = [0.0] * ratios.k
    grad_pos_terms = []
    values = []
    for i, b in pairs:
        z = b * (ratios.r_pos - ratios.r_neg[i])
        s = sigmoid(-z)
        values.append(softplus(-z))
        grad_neg[i] = b * s / m
        grad_pos_terms.append(-b * s / m)
    value = math.fsum(values) / m
    return LossOutput(value=value, grad_pos=math.fsum(grad_pos_terms), grad_neg=tuple(grad_neg))


def decompose_negative_gradient(
    grad_neg: Sequence[float],
    separated: Iterable[int],
    boundary: Iterable[int],
) -> tuple[float, float, float]:
    """Split the mean negative gradient into separated-set and boundary-set terms.

    Returns ``((|S|/k) * mean_S, (|B|/k) * mean_B, sum)``; the sum
    reconstructs ``mean(grad_neg)`` exactly up to rounding, which is what
    makes the two terms directly comparable as gradient mass.
    """
    k = len(grad_neg)
    s_idx = sorted(separated)
    b_idx = sorted(boundary)
    if set(s_idx) & set(b_idx):
        raise InvalidParameterError("separated and boundary sets must be disjoint")
    if sorted(s_idx + b_idx) != list(range(k)):
        raise InvalidParameterError("partition must cover every negative index exactly once")
    s_term = math.fsum(grad_neg[i] for i in s_idx) / k if s_idx else 0.0
    b_term = math.fsum(grad_neg[i] for i in b_idx) / k if b_idx else 0.0
    return s_term, b_term, s_term + b_term
