"""Shared domain types, the seeded-RNG contract, and log-likelihood arithmetic.

Everything downstream works in natural-log space with float64; probabilities
are never materialized. All types here are immutable after construction and
safe to share across workers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

ItemId = int


class InvalidParameterError(ValueError):
    """An argument violates an operation's contract."""


def spawn_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Derive an independent generator from a base seed and a tag path.

    The same (seed, tags) pair always yields the same stream; distinct tag
    paths yield independent streams. This is the only source of randomness
    in the package: no operation touches global RNG state.
    """
    if seed < 0 or seed > 0xFFFFFFFFFFFFFFFF:
        raise InvalidParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    keys = []
    for tag in tags:
        if isinstance(tag, str):
            digest = hashlib.sha256(tag.encode("utf-8")).digest()
            keys.append(int.from_bytes(digest[:8], "little"))
        else:
            keys.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(keys)))


def derive_seed(seed: int, *tags: int | str) -> int:
    """A fresh 63-bit seed deterministically derived from (seed, tags)."""
    return int(spawn_rng(seed, *tags).integers(0, 2**63))


def _check_finite(name: str, values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise InvalidParameterError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True, slots=True)
class Context:
    """A user and their interaction history (most recent item last)."""

    user: int
    history: tuple[ItemId, ...]

    def __post_init__(self):
        if self.user < 0:
            raise InvalidParameterError(f"user index must be non-negative, got {self.user}")
        if len(self.history) == 0:
            raise InvalidParameterError("history must be non-empty")
        if any(i < 0 for i in self.history):
            raise InvalidParameterError("history items must be non-negative indices")


@dataclass(frozen=True, slots=True)
class PreferenceInstance:
    """One training example: a context, its positive item, and k negatives."""

    context: Context
    positive: ItemId
    negatives: tuple[ItemId, ...]

    def __post_init__(self):
        if len(self.negatives) == 0:
            raise InvalidParameterError("at least one negative is required")
        if len(set(self.negatives)) != len(self.negatives):
            raise InvalidParameterError("negatives must be pairwise distinct")
        if self.positive in self.negatives:
            raise InvalidParameterError("positive item must not appear among negatives")

    @property
    def k(self) -> int:
        return len(self.negatives)


@dataclass(frozen=True, slots=True)
class LikelihoodRecord:
    """Per-candidate log-likelihoods of one instance under policy and reference.

    ``pos_theta``/``neg_theta`` come from the trainable policy,
    ``pos_ref``/``neg_ref`` from the frozen reference.
    """

    pos_theta: float
    pos_ref: float
    neg_theta: tuple[float, ...]
    neg_ref: tuple[float, ...]

    def __post_init__(self):
        if len(self.neg_theta) == 0:
            raise InvalidParameterError("record needs at least one negative")
        if len(self.neg_theta) != len(self.neg_ref):
            raise InvalidParameterError(
                f"negative lists must have equal length, got {len(self.neg_theta)} and {len(self.neg_ref)}"
            )
        _check_finite("pos_theta", (self.pos_theta,))
        _check_finite("pos_ref", (self.pos_ref,))
        _check_finite("neg_theta", self.neg_theta)
        _check_finite("neg_ref", self.neg_ref)

    @property
    def k(self) -> int:
        return len(self.neg_theta)


@dataclass(frozen=True, slots=True)
class LogRatioSet:
    """Policy-to-reference log-ratios: the reward terms of every objective."""

    r_pos: float
    r_neg: tuple[float, ...]

    def __post_init__(self):
        if len(self.r_neg) == 0:
            raise InvalidParameterError("at least one negative ratio is required")
        _check_finite("r_pos", (self.r_pos,))
        _check_finite("r_neg", self.r_neg)

    @property
    def k(self) -> int:
        return len(self.r_neg)


def log_ratios(rec: LikelihoodRecord) -> LogRatioSet:
    """Policy-minus-reference log-likelihood per candidate."""
    return LogRatioSet(
        r_pos=rec.pos_theta - rec.pos_ref,
        r_neg=tuple(t - r for t, r in zip(rec.neg_theta, rec.neg_ref)),
    )


def likelihood_gaps(rec: LikelihoodRecord) -> list[float]:
    """Positive-minus-negative policy log-likelihood for each negative.

    A non-positive gap means the policy ranks that negative at or above the
    positive; reference likelihoods play no role here.
    """
    return [rec.pos_theta - n for n in rec.neg_theta]
