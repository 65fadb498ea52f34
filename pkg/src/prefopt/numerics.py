"""Numerically stable scalar/array kernels shared by losses and the policy."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    neg = x < 0
    out[~neg] = 1.0 / (1.0 + np.exp(-x[~neg]))
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """log(1 + e^x) without overflow; -log sigmoid(z) == softplus(-z)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def logsumexp(x, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp; rows of all -inf map to -inf, not NaN."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out if out.ndim else float(out)
