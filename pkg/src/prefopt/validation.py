"""Input validation for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .core import InvalidParameterError


def check_interactions(X) -> np.ndarray:
    """Coerce to an [n, 3] int64 array of (user, item, timestamp) rows."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != 3:
        raise InvalidParameterError(f"interactions must have shape (n, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise InvalidParameterError("interactions must be non-empty")
    if not np.issubdtype(X.dtype, np.integer):
        as_int = X.astype(np.int64)
        if not np.array_equal(as_int, X):
            raise InvalidParameterError("interaction fields must be integers")
        X = as_int
    if X.min() < 0:
        raise InvalidParameterError("interaction fields must be non-negative")
    return np.ascontiguousarray(X, dtype=np.int64)


def check_histories(X, n_items: int | None = None) -> list[tuple[int, ...]]:
    """Coerce to a list of non-empty item-id tuples, optionally range-checked."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise InvalidParameterError(f"history array must be 2-D, got shape {X.shape}")
        rows = [tuple(int(i) for i in row) for row in X]
    else:
        rows = [tuple(int(i) for i in row) for row in X]
    if not rows:
        raise InvalidParameterError("need at least one history")
    for row in rows:
        if not row:
            raise InvalidParameterError("histories must be non-empty")
        if any(i < 0 for i in row):
            raise InvalidParameterError("item ids must be non-negative")
        if n_items is not None and any(i >= n_items for i in row):
            raise InvalidParameterError(f"item id out of range for vocabulary of {n_items}")
    return rows


def check_items(y, n: int, n_items: int | None = None) -> np.ndarray:
    """Coerce to an [n] int64 array of item ids."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) != n:
        raise InvalidParameterError(f"expected {n} target items, got {len(y)}")
    if y.min() < 0 or (n_items is not None and y.max() >= n_items):
        raise InvalidParameterError("target item id out of range")
    return y
