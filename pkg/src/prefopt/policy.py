"""Small differentiable recommender: embeddings, likelihoods, and training steps.

The model scores items by the dot product of a mean-history user vector with
a separate output embedding table, normalized by a full softmax, so every
item log-likelihood is a single scalar and all gradients are closed-form.
Training steps are vectorized across a batch; the per-record operations in
``losses``/``selection``/``beta`` define the semantics and the batched code
paths here are tested against them.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .beta import BetaConfig
from .core import Context, InvalidParameterError, LikelihoodRecord, PreferenceInstance, spawn_rng
from .numerics import logsumexp, sigmoid, softplus
from .selection import (
    STAGE_ALL,
    STAGE_CLUSTER,
    STAGE_DEGENERATE,
    STAGE_VIOLATION,
    BoundarySelection,
)

OBJECTIVES = ("dpo", "dmpo", "sdpo", "mppo")

CHECKPOINT_FORMAT = 1
INIT_STD = 0.1


class PolicyModel:
    """Trainable parameters: input (history) and output (scoring) embeddings."""

    def __init__(self, item_embeddings: np.ndarray, output_embeddings: np.ndarray):
        item_embeddings = np.asarray(item_embeddings, dtype=np.float64)
        output_embeddings = np.asarray(output_embeddings, dtype=np.float64)
        if item_embeddings.ndim != 2 or item_embeddings.shape != output_embeddings.shape:
            raise InvalidParameterError("embedding tables must be 2-D with identical shapes")
        if item_embeddings.shape[0] < 2:
            raise InvalidParameterError("vocabulary must contain at least two items")
        if not (np.isfinite(item_embeddings).all() and np.isfinite(output_embeddings).all()):
            raise InvalidParameterError("embeddings must be finite")
        self.item_embeddings = item_embeddings
        self.output_embeddings = output_embeddings

    @classmethod
    def initialize(cls, vocab_size: int, dim: int, seed: int) -> "PolicyModel":
        """Fresh model with N(0, 0.1) embeddings drawn from the run seed."""
        if vocab_size < 2 or dim < 1:
            raise InvalidParameterError("need vocab_size >= 2 and dim >= 1")
        rng = spawn_rng(seed, "policy-init")
        item = rng.normal(0.0, INIT_STD, size=(vocab_size, dim))
        output = rng.normal(0.0, INIT_STD, size=(vocab_size, dim))
        return cls(item, output)

    @property
    def vocab_size(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"item_embeddings": self.item_embeddings, "output_embeddings": self.output_embeddings}

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.item_embeddings.copy(), self.output_embeddings.copy())


class ReferenceModel:
    """Frozen snapshot of a policy, used as the log-ratio baseline.

    The underlying arrays are marked read-only; mutating attempts raise.
    """

    __slots__ = ("item_embeddings", "output_embeddings")

    def __init__(self, model: PolicyModel):
        item = model.item_embeddings.copy()
        output = model.output_embeddings.copy()
        item.setflags(write=False)
        output.setflags(write=False)
        object.__setattr__(self, "item_embeddings", item)
        object.__setattr__(self, "output_embeddings", output)

    @property
    def vocab_size(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_checkpoint(path, model: PolicyModel | ReferenceModel, seed: int) -> None:
    """Write embeddings plus the run seed; round-trips bit-exactly."""
    np.savez(
        path,
        format=np.int64(CHECKPOINT_FORMAT),
        seed=np.uint64(seed),
        item_embeddings=model.item_embeddings,
        output_embeddings=model.output_embeddings,
    )


def load_checkpoint(path) -> tuple[PolicyModel, int]:
    with np.load(path) as data:
        if int(data["format"]) != CHECKPOINT_FORMAT:
            raise InvalidParameterError(f"unsupported checkpoint format {int(data['format'])}")
        model = PolicyModel(data["item_embeddings"], data["output_embeddings"])
        seed = int(data["seed"])
    return model, seed


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


def _check_items(model, items: np.ndarray) -> None:
    if items.size and (items.min() < 0 or items.max() >= model.vocab_size):
        raise InvalidParameterError("item index out of range for this vocabulary")


def encode_contexts(model, contexts: Sequence[Context]) -> np.ndarray:
    """Mean history embedding per context, grouped by history length."""
    B = len(contexts)
    u = np.empty((B, model.dim))
    for length, rows in _history_groups(contexts).items():
        hist = np.array([contexts[b].history for b in rows], dtype=np.int64)
        _check_items(model, hist)
        u[rows] = model.item_embeddings[hist].mean(axis=1)
    return u


def _history_groups(contexts: Sequence[Context]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for b, ctx in enumerate(contexts):
        groups.setdefault(len(ctx.history), []).append(b)
    return dict(sorted(groups.items()))


def batch_scores(model, contexts: Sequence[Context]) -> np.ndarray:
    """Unnormalized item scores, one row per context."""
    return encode_contexts(model, contexts) @ model.output_embeddings.T


def batch_log_probs(model, contexts: Sequence[Context]) -> np.ndarray:
    """Full log-probability table, one row per context; rows sum to one in prob space."""
    scores = batch_scores(model, contexts)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def log_prob(model, ctx: Context, item: int) -> float:
    """log pi(item | ctx): softmax score of the item against the whole vocabulary."""
    if not 0 <= item < model.vocab_size:
        raise InvalidParameterError(f"item {item} out of range")
    return float(batch_log_probs(model, [ctx])[0, item])


def likelihood_records(model, ref, instances: Sequence[PreferenceInstance]) -> list[LikelihoodRecord]:
    """Policy and reference log-likelihoods for each instance's candidates."""
    pos_t, neg_t = _candidate_log_probs(model, instances)
    pos_r, neg_r = _candidate_log_probs(ref, instances)
    return [
        LikelihoodRecord(
            pos_theta=float(pos_t[b]),
            pos_ref=float(pos_r[b]),
            neg_theta=tuple(float(x) for x in neg_t[b]),
            neg_ref=tuple(float(x) for x in neg_r[b]),
        )
        for b in range(len(instances))
    ]


def _candidate_arrays(instances: Sequence[PreferenceInstance]) -> np.ndarray:
    ks = {inst.k for inst in instances}
    if len(ks) != 1:
        raise InvalidParameterError("instances in a batch must share a negative count")
    return np.array([(inst.positive, *inst.negatives) for inst in instances], dtype=np.int64)


def _candidate_log_probs(model, instances) -> tuple[np.ndarray, np.ndarray]:
    cand = _candidate_arrays(instances)
    _check_items(model, cand)
    logp = batch_log_probs(model, [inst.context for inst in instances])
    picked = np.take_along_axis(logp, cand, axis=1)
    return picked[:, 0], picked[:, 1:]


# ---------------------------------------------------------------------------
# Training variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Variant:
    """How negatives are chosen per instance and how their betas are set.

    ``naive`` keeps every negative at the base beta; ``topk`` keeps the
    ``top_k`` highest-likelihood ones; ``dynamic`` runs staged boundary
    selection with per-negative beta adjustment. The ``stage1``/``stage2``/
    ``adapt_beta`` switches ablate the dynamic machinery piecewise; with
    both stages off there is no boundary set to adapt against, so every
    negative is kept at the base beta (which reproduces ``naive`` exactly).
    """

    kind: str = "dynamic"
    top_k: int | None = None
    stage1: bool = True
    stage2: bool = True
    adapt_beta: bool = True

    def __post_init__(self):
        if self.kind not in ("naive", "dynamic", "topk"):
            raise InvalidParameterError(f"unknown variant kind {self.kind!r}")
        if self.kind == "topk":
            if self.top_k is None or self.top_k < 1:
                raise InvalidParameterError("topk variant needs top_k >= 1")

    @classmethod
    def naive(cls) -> "Variant":
        return cls(kind="naive")

    @classmethod
    def dynamic(cls, stage1: bool = True, stage2: bool = True, adapt_beta: bool = True) -> "Variant":
        return cls(kind="dynamic", stage1=stage1, stage2=stage2, adapt_beta=adapt_beta)

    @classmethod
    def topk(cls, top_k: int) -> "Variant":
        return cls(kind="topk", top_k=top_k)

    @property
    def label(self) -> str:
        if self.kind == "topk":
            return f"topk:{self.top_k}"
        if self.kind == "naive":
            return "naive"
        mods = []
        if not self.stage1:
            mods.append("no-stage1")
        if not self.stage2:
            mods.append("no-stage2")
        if not self.adapt_beta:
            mods.append("fixed-beta")
        return "dynamic" + (":" + ",".join(mods) if mods else "")


def parse_variant(text: str) -> Variant:
    """Inverse of ``Variant.label``: e.g. 'naive', 'topk:3', 'dynamic:no-stage1,fixed-beta'."""
    head, _, rest = text.strip().partition(":")
    if head == "naive":
        if rest:
            raise InvalidParameterError("naive variant takes no modifiers")
        return Variant.naive()
    if head == "topk":
        try:
            return Variant.topk(int(rest))
        except ValueError:
            raise InvalidParameterError(f"topk variant needs an integer count, got {rest!r}") from None
    if head == "dynamic":
        kwargs = {"stage1": True, "stage2": True, "adapt_beta": True}
        for mod in filter(None, rest.split(",")):
            if mod == "no-stage1":
                kwargs["stage1"] = False
            elif mod == "no-stage2":
                kwargs["stage2"] = False
            elif mod == "fixed-beta":
                kwargs["adapt_beta"] = False
            else:
                raise InvalidParameterError(f"unknown variant modifier {mod!r}")
        return Variant.dynamic(**kwargs)
    raise InvalidParameterError(f"unknown variant {text!r}")


# ---------------------------------------------------------------------------
# Batched selection / beta / loss (semantics defined by the scalar modules)
# ---------------------------------------------------------------------------


_SPLIT_PAIR_CACHE: dict[int, tuple[np.ndarray, ...]] = {}


def _split_pairs(n: int) -> tuple[np.ndarray, ...]:
    """(s1, s2) cut positions for three segments of [0, n), descending by
    (s2, s1) so that a plain argmax lands on the preferred split among cost
    ties (smallest top cluster, then smallest middle)."""
    if n not in _SPLIT_PAIR_CACHE:
        pairs = [(s1, s2) for s2 in range(n - 1, 1, -1) for s1 in range(s2 - 1, 0, -1)]
        s1 = np.array([p[0] for p in pairs])
        s2 = np.array([p[1] for p in pairs])
        _SPLIT_PAIR_CACHE[n] = (s1, s2, (s2 - s1).astype(np.float64),
                                (n - s2).astype(np.float64), s1.astype(np.float64))
    return _SPLIT_PAIR_CACHE[n]


_DP_WORKSPACE = threading.local()


def _dp_buffers(B: int, n: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Reusable scratch arrays; the pair matrices exceed the allocator's mmap
    threshold, so fresh allocation per step would pay page-fault costs."""
    key = (B, n)
    if getattr(_DP_WORKSPACE, "key", None) != key:
        pair_count = (n - 1) * (n - 2) // 2
        _DP_WORKSPACE.key = key
        _DP_WORKSPACE.bufs = [np.empty((B, pair_count)) for _ in range(3)]
        _DP_WORKSPACE.prefix = np.empty((B, n + 1))
    return _DP_WORKSPACE.bufs, _DP_WORKSPACE.prefix


def _top_cluster_start(neg_sorted: np.ndarray) -> np.ndarray:
    """Start position (in sorted order) of the highest cluster of an exact 3-means.

    Enumerates every contiguous 3-way split using the same prefix-sum cost
    as ``selection.kmeans_1d``, algebraically rearranged: summing the three
    segment costs collapses every squared-value term into a per-row
    constant, which cannot move the optimum, leaving (segment sum)^2 / size
    per segment (sign flipped, so the best split maximizes). The optimum
    and the smallest-top-cluster tie rule match the scalar dynamic program;
    results can differ only where two splits tie to within floating-point
    rounding.
    """
    B, n = neg_sorted.shape
    s1, s2, mid_w, tail_w, head_w = _split_pairs(n)
    (g1, g2, acc), p1 = _dp_buffers(B, n)
    p1[:, 0] = 0.0
    np.cumsum(neg_sorted, axis=1, out=p1[:, 1:])

    np.take(p1, s1, axis=1, out=g1)
    np.take(p1, s2, axis=1, out=g2)
    # middle segment: (p1[s2] - p1[s1])^2 / (s2 - s1)
    np.subtract(g2, g1, out=acc)
    np.multiply(acc, acc, out=acc)
    np.divide(acc, mid_w, out=acc)
    # head segment: (p1[s1])^2 / s1
    np.multiply(g1, g1, out=g1)
    np.divide(g1, head_w, out=g1)
    np.add(acc, g1, out=acc)
    # tail segment: (p1[n] - p1[s2])^2 / (n - s2)
    np.subtract(p1[:, n, None], g2, out=g2)
    np.multiply(g2, g2, out=g2)
    np.divide(g2, tail_w, out=g2)
    np.add(acc, g2, out=acc)
    return s2[np.argmax(acc, axis=1)]


# integer stage markers used in the batched path; selection_log maps them back
STAGE_CODES = (STAGE_VIOLATION, STAGE_CLUSTER, STAGE_DEGENERATE, STAGE_ALL)
_VIOLATION, _CLUSTER, _DEGENERATE, _ALL = range(4)


def _select_mask(pos_t: np.ndarray, neg_t: np.ndarray, variant: Variant) -> tuple[np.ndarray, np.ndarray | None]:
    """Active-negative mask per instance plus per-row stage codes (dynamic only)."""
    B, k = neg_t.shape
    if variant.kind == "naive":
        return np.ones((B, k), dtype=bool), None
    if variant.kind == "topk":
        if variant.top_k > k:
            raise InvalidParameterError(f"top_k={variant.top_k} exceeds the {k} available negatives")
        order = np.argsort(-neg_t, axis=1, kind="stable")  # descending, ties keep lowest index
        mask = np.zeros((B, k), dtype=bool)
        np.put_along_axis(mask, order[:, : variant.top_k], True, axis=1)
        return mask, None

    if not variant.stage1 and not variant.stage2:
        return np.ones((B, k), dtype=bool), np.full(B, _ALL, dtype=np.int8)

    if variant.stage1:
        vio = neg_t > pos_t[:, None]
        hit = vio.any(axis=1)
        if hit.all():
            return vio, np.full(B, _VIOLATION, dtype=np.int8)
    else:
        vio = None
        hit = np.zeros(B, dtype=bool)

    def fallback_mask(values: np.ndarray) -> tuple[np.ndarray, int]:
        rows_n = values.shape[0]
        if not variant.stage2:
            return np.ones((rows_n, k), dtype=bool), _ALL
        if k >= 3:
            order = np.argsort(values, axis=1, kind="stable")
            start = _top_cluster_start(np.take_along_axis(values, order, axis=1))
            out = np.zeros((rows_n, k), dtype=bool)
            span = np.arange(k)[None, :] >= start[:, None]
            np.put_along_axis(out, order, span, axis=1)
            return out, _CLUSTER
        out = np.zeros((rows_n, k), dtype=bool)
        out[np.arange(rows_n), np.argmax(values, axis=1)] = True
        return out, _DEGENERATE

    if vio is None:
        fallback, fb_code = fallback_mask(neg_t)
        return fallback, np.full(B, fb_code, dtype=np.int8)
    if 2 * int(hit.sum()) > B:
        # violations dominate: run the fallback only on the rows that need it
        rows = np.flatnonzero(~hit)
        mask = vio.copy()
        codes = np.full(B, _VIOLATION, dtype=np.int8)
        if rows.size:
            sub, fb_code = fallback_mask(neg_t[rows])
            mask[rows] = sub
            codes[rows] = fb_code
        return mask, codes
    fallback, fb_code = fallback_mask(neg_t)
    mask = np.where(hit[:, None], vio, fallback)
    codes = np.where(hit, np.int8(_VIOLATION), np.int8(fb_code)).astype(np.int8)
    return mask, codes


def selection_log(mask: np.ndarray, stages: np.ndarray | None) -> list[BoundarySelection | None]:
    """Materialize per-instance boundary selections from a batched mask."""
    if stages is None:
        return [None] * mask.shape[0]
    rows, cols = np.nonzero(mask)
    counts = np.bincount(rows, minlength=mask.shape[0])
    groups = np.split(cols, np.cumsum(counts)[:-1])
    return [
        BoundarySelection(boundary=tuple(g.tolist()), stage=STAGE_CODES[code])
        for g, code in zip(groups, stages)
    ]


def _dynamic_betas(pos_t: np.ndarray, neg_t: np.ndarray, mask: np.ndarray, cfg: BetaConfig) -> np.ndarray:
    """Per-negative beta from dual margins; inactive entries get the base
    weight and never enter the loss."""
    k = neg_t.shape[1]
    sel_count = mask.sum(axis=1)
    sel_sum = np.where(mask, neg_t, 0.0).sum(axis=1)
    easy_count = k - sel_count
    has_easy = easy_count > 0
    easy_mean = np.where(has_easy, (neg_t.sum(axis=1) - sel_sum) / np.maximum(easy_count, 1), 0.0)
    easy_ref = np.where(has_easy[:, None], easy_mean[:, None], neg_t)
    ambiguity = pos_t[:, None] - neg_t
    contrast = np.subtract(neg_t, easy_ref, out=easy_ref)
    denom = np.abs(ambiguity) + np.abs(contrast)
    num = ambiguity
    np.subtract(num, contrast, out=num)
    num -= cfg.gamma
    live = denom > 0.0
    np.divide(num, np.where(live, denom, 1.0), out=num)
    adj = np.where(live, np.tanh(num), 0.0)
    adj *= cfg.beta0 * cfg.alpha
    adj += cfg.beta0
    return np.where(mask, adj, cfg.beta0)


def _batch_betas(pos_t, neg_t, mask, variant: Variant, cfg: BetaConfig) -> np.ndarray:
    selective = variant.kind == "dynamic" and (variant.stage1 or variant.stage2)
    if selective and variant.adapt_beta:
        return _dynamic_betas(pos_t, neg_t, mask, cfg)
    return np.full_like(neg_t, cfg.beta0)


def _batch_loss(objective: str, r_pos, r_neg, betas, mask):
    """Vectorized objectives; returns (value[B], grad_pos[B], grad_neg[B, k])."""
    if objective not in OBJECTIVES:
        raise InvalidParameterError(f"unknown objective {objective!r}")
    m = mask.sum(axis=1)
    if objective == "dpo" and not np.all(m == 1):
        raise InvalidParameterError("pairwise objective requires exactly one active negative per instance")
    bm = np.where(mask, betas, 0.0)
    margin = r_pos[:, None] - r_neg
    if objective in ("dpo", "dmpo"):
        z = (bm * margin).sum(axis=1) / m
        s = sigmoid(-z)
        value = softplus(-z)
        grad_neg = bm / m[:, None] * s[:, None]
    elif objective == "mppo":
        s_i = sigmoid(-bm * margin)
        value = np.where(mask, softplus(-bm * margin), 0.0).sum(axis=1) / m
        grad_neg = np.where(mask, bm * s_i, 0.0) / m[:, None]
    else:  # sdpo
        u = np.where(mask, bm * -margin, -np.inf)
        log_e = logsumexp(u, axis=1)
        s = sigmoid(log_e)
        w = np.exp(u - log_e[:, None])
        value = softplus(log_e)
        grad_neg = s[:, None] * w * bm
    grad_pos = -grad_neg.sum(axis=1)
    return value, grad_pos, grad_neg


# ---------------------------------------------------------------------------
# Backward and optimizer steps
# ---------------------------------------------------------------------------


def _backward(model: PolicyModel, contexts, u, probs, cand, cand_grads) -> dict[str, np.ndarray]:
    """Chain per-candidate log-likelihood gradients into the embedding tables.

    For each instance, d logp_c / d output_j = (1[j=c] - p_j) u and
    d logp_c / d u = w_c - sum_j p_j w_j; history items share the context
    gradient equally (mean encoder).
    """
    B = cand.shape[0]
    out = model.output_embeddings
    total = cand_grads.sum(axis=1)
    grad_out = np.zeros_like(out)
    np.add.at(grad_out, cand, cand_grads[:, :, None] * u[:, None, :])
    grad_out -= (probs * total[:, None]).T @ u
    du = np.einsum("bc,bcd->bd", cand_grads, out[cand]) - total[:, None] * (probs @ out)
    grad_item = np.zeros_like(model.item_embeddings)
    for length, rows in _history_groups(contexts).items():
        hist = np.array([contexts[b].history for b in rows], dtype=np.int64)
        np.add.at(grad_item, hist, (du[rows] / length)[:, None, :])
    return {"item_embeddings": grad_item / B, "output_embeddings": grad_out / B}


def sft_step(model: PolicyModel, batch: Sequence[tuple[Context, int]], opt: Adam,
             lr: float | None = None) -> float:
    """One next-item maximum-likelihood step; returns the batch mean loss."""
    if len(batch) == 0:
        raise InvalidParameterError("batch must be non-empty")
    contexts = [ctx for ctx, _ in batch]
    cand = np.array([[item] for _, item in batch], dtype=np.int64)
    _check_items(model, cand)
    u = encode_contexts(model, contexts)
    scores = u @ model.output_embeddings.T
    log_z = logsumexp(scores, axis=1)
    losses = log_z - scores[np.arange(len(batch)), cand[:, 0]]
    probs = np.exp(scores - log_z[:, None])
    cand_grads = np.full((len(batch), 1), -1.0)
    grads = _backward(model, contexts, u, probs, cand, cand_grads)
    opt.step(model.params(), grads, lr)
    return float(losses.mean())


def po_forward(model: PolicyModel, ref, instances: Sequence[PreferenceInstance],
               objective: str, variant: Variant, cfg: BetaConfig):
    """Loss, parameter gradients, and the raw selection mask for one batch.

    Selection and the per-negative betas are computed from the current
    policy likelihoods but enter the loss as fixed coefficients. Returns
    ``(mean loss, grads, active mask [B, k], per-row stage labels)``; the
    stage list is None for variants without staged selection.
    """
    if len(instances) == 0:
        raise InvalidParameterError("batch must be non-empty")
    contexts = [inst.context for inst in instances]
    cand = _candidate_arrays(instances)
    _check_items(model, cand)

    u = encode_contexts(model, contexts)
    scores = u @ model.output_embeddings.T
    log_z = logsumexp(scores, axis=1)
    picked = np.take_along_axis(scores, cand, axis=1) - log_z[:, None]
    pos_t, neg_t = picked[:, 0], picked[:, 1:]

    ref_scores = batch_scores(ref, contexts)
    ref_picked = np.take_along_axis(ref_scores, cand, axis=1) - logsumexp(ref_scores, axis=1, keepdims=True)
    pos_r, neg_r = ref_picked[:, 0], ref_picked[:, 1:]

    mask, stages = _select_mask(pos_t, neg_t, variant)
    betas = _batch_betas(pos_t, neg_t, mask, variant, cfg)
    value, grad_pos, grad_neg = _batch_loss(objective, pos_t - pos_r, neg_t - neg_r, betas, mask)

    probs = np.exp(scores - log_z[:, None])
    cand_grads = np.concatenate([grad_pos[:, None], grad_neg], axis=1)
    grads = _backward(model, contexts, u, probs, cand, cand_grads)
    return float(value.mean()), grads, mask, stages


def po_step(model: PolicyModel, ref, batch: Sequence[PreferenceInstance], objective: str,
            variant: Variant, cfg: BetaConfig, opt: Adam, lr: float | None = None):
    """One preference-optimization step; returns (mean loss, selection log)."""
    loss, grads, mask, stages = po_forward(model, ref, batch, objective, variant, cfg)
    opt.step(model.params(), grads, lr)
    return loss, selection_log(mask, stages)
