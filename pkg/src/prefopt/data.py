"""Interaction logs: synthetic generation, CSV ingestion, splits, and sampling.

Logs are canonicalized on construction: user and item ids are densified to
contiguous ranges and rows are sorted by (user, timestamp, item), so that
export followed by re-ingestion reproduces the log exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Context, InvalidParameterError, PreferenceInstance, spawn_rng

CSV_HEADER = "user_id,item_id,timestamp"


class DataFormatError(ValueError):
    """A data file does not match the documented CSV schema."""


@dataclass(frozen=True, slots=True)
class InteractionLog:
    """Dense, per-user chronologically sorted (user, item, timestamp) rows."""

    rows: np.ndarray  # [n, 3] int64, read-only
    vocab_size: int
    user_count: int

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "InteractionLog":
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
        if rows.size and rows.min() < 0:
            raise InvalidParameterError("interaction fields must be non-negative")
        rows = _canonicalize(rows)
        vocab = int(rows[:, 1].max()) + 1 if len(rows) else 0
        users = int(rows[:, 0].max()) + 1 if len(rows) else 0
        rows.setflags(write=False)
        return cls(rows=rows, vocab_size=vocab, user_count=users)

    def user_sequences(self) -> list[np.ndarray]:
        """Items per user in chronological order."""
        seqs = [[] for _ in range(self.user_count)]
        for u, i, _ in self.rows:
            seqs[u].append(i)
        return [np.array(s, dtype=np.int64) for s in seqs]

    def user_item_sets(self) -> list[frozenset[int]]:
        return [frozenset(int(i) for i in seq) for seq in self.user_sequences()]

    def item_popularity(self) -> np.ndarray:
        return np.bincount(self.rows[:, 1], minlength=self.vocab_size)


def _canonicalize(rows: np.ndarray) -> np.ndarray:
    """Densify ids (first-seen order) and sort rows by (user, timestamp, item).

    Items are relabeled after the per-user time sort so that the canonical
    row order and the label order agree; this is what makes the CSV
    round-trip exact.
    """
    if len(rows) == 0:
        return rows.copy()
    out = rows.copy()
    _, first = np.unique(out[:, 0], return_index=True)
    user_map = {int(out[i, 0]): rank for rank, i in enumerate(sorted(first))}
    out[:, 0] = [user_map[int(u)] for u in out[:, 0]]
    order = np.lexsort((np.arange(len(out)), out[:, 2], out[:, 0]))  # stable (user, ts)
    out = out[order]
    item_map: dict[int, int] = {}
    for r in range(len(out)):
        raw = int(out[r, 1])
        if raw not in item_map:
            item_map[raw] = len(item_map)
        out[r, 1] = item_map[raw]
    order = np.lexsort((out[:, 1], out[:, 2], out[:, 0]))
    return out[order]


def generate_synthetic(users: int, items: int, dim: int, interactions_per_user: int,
                       noise: float, seed: int, temperature: float = 1.0) -> InteractionLog:
    """Latent-factor interaction log: each draw is softmax over noisy affinities.

    Per draw the item distribution is softmax((u . v_j + noise * g_j) / temperature)
    with fresh standard-normal g, so noise -> infinity washes out the factor
    structure and item popularity tends to uniform. Timestamps are sequence
    positions. Identical seeds give byte-identical logs.
    """
    if users < 1 or items < 2 or dim < 1 or interactions_per_user < 1:
        raise InvalidParameterError("counts must be positive (and items >= 2)")
    if temperature <= 0:
        raise InvalidParameterError("temperature must be positive")
    rng = spawn_rng(seed, "synthetic")
    user_factors = rng.normal(0.0, 1.0, size=(users, dim))
    item_factors = rng.normal(0.0, 1.0, size=(items, dim))
    rows = np.empty((users * interactions_per_user, 3), dtype=np.int64)
    ts = np.arange(interactions_per_user)
    for u in range(users):
        logits = user_factors[u] @ item_factors.T
        jitter = rng.normal(0.0, 1.0, size=(interactions_per_user, items))
        z = (logits[None, :] + noise * jitter) / temperature
        z -= z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        draws = (probs.cumsum(axis=1) < rng.random(interactions_per_user)[:, None]).sum(axis=1)
        block = slice(u * interactions_per_user, (u + 1) * interactions_per_user)
        rows[block, 0] = u
        rows[block, 1] = draws
        rows[block, 2] = ts
    return InteractionLog.from_rows(rows)


def ingest_csv(path) -> InteractionLog:
    """Parse a `user_id,item_id,timestamp` CSV into a canonical log."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != CSV_HEADER:
            raise DataFormatError(f"line 1: expected header {CSV_HEADER!r}, got {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataFormatError(f"line {lineno}: expected 3 comma-separated fields, got {len(parts)}")
            try:
                triple = [int(p) for p in parts]
            except ValueError:
                raise DataFormatError(f"line {lineno}: fields must be integers, got {line!r}") from None
            if any(v < 0 for v in triple):
                raise DataFormatError(f"line {lineno}: fields must be non-negative")
            rows.append(triple)
    return InteractionLog.from_rows(np.array(rows, dtype=np.int64).reshape(-1, 3))


def export_csv(log: InteractionLog, path) -> None:
    """Write the canonical row order; re-ingesting reproduces the log exactly."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for u, i, t in log.rows:
            fh.write(f"{u},{i},{t}\n")


@dataclass(frozen=True, slots=True)
class SplitEntry:
    """One next-item target: the preceding history and its position in the sequence."""

    context: Context
    positive: int
    position: int


@dataclass(frozen=True, slots=True)
class DatasetSplit:
    """Per-user chronological train/valid/test targets plus sampling metadata."""

    train: tuple[SplitEntry, ...]
    valid: tuple[SplitEntry, ...]
    test: tuple[SplitEntry, ...]
    vocab_size: int
    user_count: int
    history_len: int
    dropped_users: int
    user_items: tuple[frozenset[int], ...]


def chronological_split(log: InteractionLog, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                        history_len: int = 10) -> DatasetSplit:
    """Assign each user's targets to train/valid/test by position fraction.

    A user with T targets contributes floor(f_train*T) train targets (at
    least 1) and max(1, floor(f_test*T)) test targets from the end; valid
    takes the remainder between them. Users with fewer than history_len + 3
    interactions are dropped and counted.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise InvalidParameterError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    if history_len < 1:
        raise InvalidParameterError("history_len must be at least 1")
    train: list[SplitEntry] = []
    valid: list[SplitEntry] = []
    test: list[SplitEntry] = []
    dropped = 0
    for user, seq in enumerate(log.user_sequences()):
        if len(seq) < history_len + 3:
            dropped += 1
            continue
        targets = len(seq) - history_len
        n_train = max(1, int(fractions[0] * targets))
        n_test = max(1, int(fractions[2] * targets))
        n_valid = targets - n_train - n_test
        for j in range(targets):
            position = history_len + j
            entry = SplitEntry(
                context=Context(user=user, history=tuple(int(x) for x in seq[j:position])),
                positive=int(seq[position]),
                position=position,
            )
            if j < n_train:
                train.append(entry)
            elif j < n_train + n_valid:
                valid.append(entry)
            else:
                test.append(entry)
    return DatasetSplit(
        train=tuple(train), valid=tuple(valid), test=tuple(test),
        vocab_size=log.vocab_size, user_count=log.user_count,
        history_len=history_len, dropped_users=dropped,
        user_items=tuple(log.user_item_sets()),
    )


def sample_negatives(entry: SplitEntry, split: DatasetSplit, k: int, seed: int,
                     popularity: np.ndarray | None = None) -> PreferenceInstance:
    """Draw k distinct negatives the user never interacted with.

    Deterministic per (seed, user, position). Uniform by default; passing
    per-item interaction counts switches to popularity-proportional
    sampling over the same eligible set.
    """
    if k < 1:
        raise InvalidParameterError("k must be at least 1")
    owned = split.user_items[entry.context.user]
    eligible = np.array([i for i in range(split.vocab_size) if i not in owned], dtype=np.int64)
    if len(eligible) < k:
        raise InvalidParameterError(
            f"user {entry.context.user} has only {len(eligible)} eligible negatives, needs {k}"
        )
    rng = spawn_rng(seed, "negatives", entry.context.user, entry.position)
    if popularity is None:
        drawn = rng.choice(eligible, size=k, replace=False)
    else:
        weights = np.asarray(popularity, dtype=np.float64)[eligible] + 1.0  # smooth zero counts
        drawn = rng.choice(eligible, size=k, replace=False, p=weights / weights.sum())
    return PreferenceInstance(
        context=entry.context, positive=entry.positive,
        negatives=tuple(int(i) for i in drawn),
    )


@dataclass(frozen=True, slots=True)
class EvalCandidateSet:
    """The ground-truth item plus 20 distinct sampled distractors."""

    positive: int
    distractors: tuple[int, ...]

    def __post_init__(self):
        if len(self.distractors) != 20:
            raise InvalidParameterError(f"expected 20 distractors, got {len(self.distractors)}")
        if len(set(self.distractors)) != 20:
            raise InvalidParameterError("distractors must be distinct")
        if self.positive in self.distractors:
            raise InvalidParameterError("positive must not appear among distractors")


def build_eval_candidates(entry: SplitEntry, vocab_size: int, seed: int) -> EvalCandidateSet:
    """20 uniform distractors excluding the positive, deterministic per (seed, user, position)."""
    if vocab_size < 21:
        raise InvalidParameterError(f"need at least 21 items to build a candidate set, got {vocab_size}")
    eligible = np.concatenate([np.arange(entry.positive), np.arange(entry.positive + 1, vocab_size)])
    rng = spawn_rng(seed, "candidates", entry.context.user, entry.position)
    drawn = rng.choice(eligible, size=20, replace=False)
    return EvalCandidateSet(positive=entry.positive, distractors=tuple(int(i) for i in drawn))
