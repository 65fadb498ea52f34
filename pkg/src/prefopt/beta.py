"""Per-negative regularization strength from dual likelihood margins.

Each selected boundary negative gets its own beta: hard negatives (close to
the positive, far above the easy-negative mass) get a smaller beta and
therefore a weaker pull toward the reference model; trivially separable
ones get a larger, more conservative beta. The tanh keeps the adjustment
inside (1-alpha, 1+alpha) times the base weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import InvalidParameterError, LikelihoodRecord
from .selection import BoundarySelection


@dataclass(frozen=True, slots=True)
class DualMargins:
    """Log-likelihood margins around one selected boundary negative.

    ``ambiguity`` (positive minus boundary) is small when the negative is
    nearly indistinguishable from the positive; ``contrast`` (boundary
    minus easy mean) is large when it sits far above the easy-negative
    mass. Both are derived, so they are exact differences by construction.
    """

    pos_loglik: float
    boundary_loglik: float
    easy_loglik: float

    @property
    def ambiguity(self) -> float:
        return self.pos_loglik - self.boundary_loglik

    @property
    def contrast(self) -> float:
        return self.boundary_loglik - self.easy_loglik


@dataclass(frozen=True, slots=True)
class BetaConfig:
    """Base weight and adjustment hyperparameters for the dynamic beta."""

    beta0: float = 1.0
    alpha: float = 0.5
    gamma: float = 6.0

    def __post_init__(self):
        if not (math.isfinite(self.beta0) and self.beta0 > 0):
            raise InvalidParameterError(f"beta0 must be positive, got {self.beta0!r}")
        if not (0.0 <= self.alpha < 1.0):
            raise InvalidParameterError(f"alpha must lie in [0, 1), got {self.alpha!r}")
        if not math.isfinite(self.gamma):
            raise InvalidParameterError(f"gamma must be finite, got {self.gamma!r}")


def dual_margins(rec: LikelihoodRecord, sel: BoundarySelection, b_index: int) -> DualMargins:
    """Margins for one boundary negative against the easy-negative mean.

    The easy mean is taken over negatives outside the selected boundary
    set; when every negative was selected there is no easy reference, so
    the boundary value itself stands in, which zeroes the contrast margin.
    """
    if b_index not in sel.boundary:
        raise InvalidParameterError(f"index {b_index} is not in the selected boundary set")
    boundary_loglik = rec.neg_theta[b_index]
    rest = [rec.neg_theta[i] for i in range(rec.k) if i not in sel.boundary]
    easy_loglik = math.fsum(rest) / len(rest) if rest else boundary_loglik
    return DualMargins(pos_loglik=rec.pos_theta, boundary_loglik=boundary_loglik,
                       easy_loglik=easy_loglik)


def dynamic_beta(m: DualMargins, cfg: BetaConfig) -> float:
    """beta0 * (1 + alpha * tanh((ambiguity - contrast - gamma) / (|ambiguity| + |contrast|))).

    Zero margins carry no difficulty signal, so a zero denominator returns
    the base weight exactly. alpha < 1 keeps the result strictly positive.
    """
    ambiguity = m.ambiguity
    contrast = m.contrast
    denom = abs(ambiguity) + abs(contrast)
    if denom == 0.0:
        return cfg.beta0
    return cfg.beta0 * (1.0 + cfg.alpha * math.tanh((ambiguity - contrast - cfg.gamma) / denom))
