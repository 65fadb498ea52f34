"""Scikit-learn style estimator wrapping the full training pipeline.

``fit`` takes raw (user, item, timestamp) interactions, runs supervised
fine-tuning followed by preference optimization against the frozen
post-SFT reference, and exposes the trained recommender through
``predict`` / ``predict_log_proba`` / ``score``. All hyperparameters are
constructor arguments, so the estimator composes with ``clone``,
``GridSearchCV``, and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Context
from .data import InteractionLog, SplitEntry, build_eval_candidates
from .harness import RunConfig, run_training
from .metrics import hit_ratio_at_1
from .policy import batch_log_probs
from .validation import check_histories, check_interactions, check_items


class PreferenceRecommender(BaseEstimator):
    """Next-item recommender trained with a multi-negative preference objective.

    Parameters mirror the run config: ``objective`` picks the loss
    (``dpo``/``dmpo``/``sdpo``/``mppo``), ``variant`` the negative-selection
    strategy (``naive``, ``dynamic`` with optional ablation modifiers, or
    ``topk:K``), and ``beta0``/``alpha``/``gamma`` the dynamic-beta
    schedule.
    """

    def __init__(self, dim=8, history_len=10, k=15, objective="dmpo", variant="dynamic",
                 beta0=1.0, alpha=0.5, gamma=6.0, sft_epochs=5, po_epochs=3,
                 sft_lr=0.01, po_lr=0.01, batch_size=256, fixed_negatives=False, seed=0):
        self.dim = dim
        self.history_len = history_len
        self.k = k
        self.objective = objective
        self.variant = variant
        self.beta0 = beta0
        self.alpha = alpha
        self.gamma = gamma
        self.sft_epochs = sft_epochs
        self.po_epochs = po_epochs
        self.sft_lr = sft_lr
        self.po_lr = po_lr
        self.batch_size = batch_size
        self.fixed_negatives = fixed_negatives
        self.seed = seed

    def _config(self) -> RunConfig:
        return RunConfig(
            dim=self.dim, history_len=self.history_len, k=self.k,
            objective=self.objective, variant=self.variant,
            beta0=self.beta0, alpha=self.alpha, gamma=self.gamma,
            sft_epochs=self.sft_epochs, po_epochs=self.po_epochs,
            sft_lr=self.sft_lr, po_lr=self.po_lr, batch_size=self.batch_size,
            fixed_negatives=self.fixed_negatives, seed=self.seed,
        )

    def fit(self, X, y=None):
        """Train on an [n, 3] array of (user, item, timestamp) interactions."""
        X = check_interactions(X)
        log = InteractionLog.from_rows(X)
        result = run_training(self._config(), log=log)
        self.model_ = result.model
        self.reference_ = result.reference
        self.n_items_ = log.vocab_size
        self.n_users_ = log.user_count
        self.report_ = result.report
        self.sft_losses_ = list(result.sft_losses)
        self.po_losses_ = list(result.po_losses)
        return self

    def predict_log_proba(self, X) -> np.ndarray:
        """Log-probability over all items for each history in X."""
        check_is_fitted(self, "model_")
        histories = check_histories(X, self.n_items_)
        contexts = [Context(user=0, history=h) for h in histories]
        return batch_log_probs(self.model_, contexts)

    def predict(self, X) -> np.ndarray:
        """Most likely next item for each history in X."""
        return np.argmax(self.predict_log_proba(X), axis=1)

    def score(self, X, y) -> float:
        """Hit ratio at 1: fraction of rows whose true next item outranks
        20 seeded distractors."""
        check_is_fitted(self, "model_")
        histories = check_histories(X, self.n_items_)
        y = check_items(y, len(histories), self.n_items_)
        entries = []
        for i, (hist, positive) in enumerate(zip(histories, y)):
            ctx = Context(user=0, history=hist)
            entry = SplitEntry(context=ctx, positive=int(positive), position=i)
            entries.append((ctx, build_eval_candidates(entry, self.n_items_, self.seed)))
        return hit_ratio_at_1(self.model_, entries)
