"""Boundary-negative selection and the diagnostic gap partition.

Selection runs in two stages per instance: negatives outranking the
positive are taken verbatim (violations); otherwise a 3-way clustering of
negative log-likelihoods picks the cluster closest to the decision
boundary. The clustering is exact (dynamic programming over the sorted
values), so selection is fully deterministic with no initialization
sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import InvalidParameterError, LikelihoodRecord, likelihood_gaps

STAGE_VIOLATION = "violation"
STAGE_CLUSTER = "cluster"
STAGE_DEGENERATE = "degenerate"
# Ablated selection can fall back to keeping every negative; only training
# logs carry this marker, select_boundary never emits it.
STAGE_ALL = "all"


@dataclass(frozen=True, slots=True)
class ClusterSplit:
    """3-way grouping of negatives by log-likelihood, highest group first."""

    top: tuple[int, ...]
    mid: tuple[int, ...]
    bot: tuple[int, ...]
    centroids: tuple[float, float, float]  # (top, mid, bot)


@dataclass(frozen=True, slots=True)
class BoundarySelection:
    """The negatives chosen for optimization and how they were chosen."""

    boundary: tuple[int, ...]
    stage: str
    clusters: ClusterSplit | None = None

    def __post_init__(self):
        if len(self.boundary) == 0:
            raise InvalidParameterError("boundary set must be non-empty")
        if self.stage not in (STAGE_VIOLATION, STAGE_CLUSTER, STAGE_DEGENERATE, STAGE_ALL):
            raise InvalidParameterError(f"unknown selection stage {self.stage!r}")


@dataclass(frozen=True, slots=True)
class GapPartition:
    """Diagnostic split of negatives by likelihood gap to the positive.

    ``separated`` holds negatives the policy already ranks clearly below
    the positive (gap > threshold); ``boundary`` holds ambiguous or
    violated orderings (gap <= threshold). Either side may be empty.
    """

    separated: tuple[int, ...]
    boundary: tuple[int, ...]
    threshold: float


def violation_set(rec: LikelihoodRecord) -> tuple[int, ...]:
    """Indices of negatives the policy strictly prefers over the positive.

    Ties are not violations; gap-zero negatives are instead picked up by
    the clustering stage.
    """
    return tuple(i for i, n in enumerate(rec.neg_theta) if n > rec.pos_theta)


def _cluster_cost(p1: Sequence[float], p2: Sequence[float], a: int, b: int) -> float:
    """Within-cluster sum of squares of sorted points [a, b), via prefix sums."""
    s = p1[b] - p1[a]
    ss = p2[b] - p2[a]
    return max(0.0, ss - s * s / (b - a))


def kmeans_1d(values: Sequence[float], k: int) -> tuple[list[int], tuple[float, ...]]:
    """Globally optimal 1-D k-means.

    Optimal 1-D clusters are contiguous in sorted order, so dynamic
    programming over the sorted values finds the exact minimum
    within-cluster sum of squares in O(k n^2). Returns a cluster label per
    input position (labels ascend with the cluster centroid) and the
    centroids in ascending order.

    Ties: equal values keep input order under the stable sort, and among
    cost-tied partitions the one whose highest cluster is smallest wins
    (then the next cluster down, and so on).
    """
    vals = [float(v) for v in values]
    n = len(vals)
    if k < 1:
        raise InvalidParameterError(f"cluster count must be at least 1, got {k}")
    if n < k:
        raise InvalidParameterError(f"need at least {k} values for {k} clusters, got {n}")
    order = sorted(range(n), key=lambda i: vals[i])  # stable: equal values keep input order
    x = [vals[i] for i in order]
    p1 = [0.0] * (n + 1)
    p2 = [0.0] * (n + 1)
    for i, v in enumerate(x):
        p1[i + 1] = p1[i] + v
        p2[i + 1] = p2[i] + v * v

    inf = math.inf
    # best[j][i]: min cost of clustering the first i sorted points into j clusters
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    best[0][0] = 0.0
    # split[j][i]: start of the j-th cluster in the optimum, largest among ties
    split = [[0] * (n + 1) for _ in range(k + 1)]
    for j in range(1, k + 1):
        for i in range(j, n - (k - j) + 1):
            b, bs = inf, -1
            for s in range(j - 1, i):
                c = best[j - 1][s] + _cluster_cost(p1, p2, s, i)
                if c <= b:  # <= keeps the largest split, i.e. the smallest top cluster
                    b, bs = c, s
            best[j][i] = b
            split[j][i] = bs

    bounds = [n]
    for j in range(k, 0, -1):
        bounds.append(split[j][bounds[-1]])
    bounds.reverse()  # 0 = bounds[0] < ... < bounds[k] = n

    assignments = [0] * n
    centroids = []
    for j in range(k):
        a, b = bounds[j], bounds[j + 1]
        centroids.append((p1[b] - p1[a]) / (b - a))
        for pos in range(a, b):
            assignments[order[pos]] = j
    return assignments, tuple(centroids)


def select_boundary(rec: LikelihoodRecord) -> BoundarySelection:
    """Pick the negatives worth optimizing against for one instance.

    Violations (negative ranked above the positive) take absolute
    precedence. Failing that, the highest-likelihood cluster of a 3-way
    split is selected; with fewer than three negatives the single highest
    negative stands in (lowest index on ties). The result is never empty.
    """
    k = rec.k
    violations = violation_set(rec)
    if violations:
        return BoundarySelection(boundary=violations, stage=STAGE_VIOLATION)
    if k >= 3:
        assignments, centroids = kmeans_1d(rec.neg_theta, 3)
        top = tuple(i for i, c in enumerate(assignments) if c == 2)
        mid = tuple(i for i, c in enumerate(assignments) if c == 1)
        bot = tuple(i for i, c in enumerate(assignments) if c == 0)
        clusters = ClusterSplit(top=top, mid=mid, bot=bot,
                                centroids=(centroids[2], centroids[1], centroids[0]))
        return BoundarySelection(boundary=top, stage=STAGE_CLUSTER, clusters=clusters)
    hardest = 0
    for i in range(1, k):
        if rec.neg_theta[i] > rec.neg_theta[hardest]:
            hardest = i
    return BoundarySelection(boundary=(hardest,), stage=STAGE_DEGENERATE)


def partition_by_gap(rec: LikelihoodRecord, threshold: float = 0.0) -> GapPartition:
    """Split negatives into separated vs boundary-critical by likelihood gap."""
    gaps = likelihood_gaps(rec)
    boundary = tuple(i for i, g in enumerate(gaps) if g <= threshold)
    separated = tuple(i for i, g in enumerate(gaps) if g > threshold)
    return GapPartition(separated=separated, boundary=boundary, threshold=float(threshold))
