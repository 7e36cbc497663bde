"""Achievement-based multi-task loss weighting.

Each dataset's weight falls as its dev score approaches a reference score
scaled by a margin: w = (1 - s / (margin * target))^gamma, clamped to [0, 1]
before exponentiation. Raw weights are softmax-normalized so no dataset's
learning signal is ever zeroed outright.
"""
from __future__ import annotations

import numpy as np


class AchievementConfigError(ValueError):
    """Invalid tracker hyperparameters."""


def raw_weight(score: float, target: float, margin: float, gamma: float) -> float:
    """Focal-style weight from the current score against margin * target."""
    if target <= 0.0:
        raise AchievementConfigError(f"target must be positive, got {target}")
    if margin <= 1.0:
        raise AchievementConfigError(f"margin must be > 1, got {margin}")
    if gamma < 0.0:
        raise AchievementConfigError(f"gamma must be >= 0, got {gamma}")
    base = 1.0 - score / (margin * target)
    base = min(max(base, 0.0), 1.0)
    return base ** gamma


def normalize_weights(raw: dict[str, float]) -> dict[str, float]:
    """Stable softmax over the raw per-dataset weights."""
    if not raw:
        raise AchievementConfigError("need at least one dataset weight")
    keys = list(raw)
    vals = np.array([raw[k] for k in keys], dtype=np.float64)
    vals -= vals.max()
    e = np.exp(vals)
    e /= e.sum()
    return {k: float(v) for k, v in zip(keys, e)}


def multitask_step_loss(dataset_losses: dict, weights: dict[str, float],
                        mim, beta: float):
    """Weighted sum of per-dataset losses plus the scaled MIM term.

    Works on floats or on graph tensors; datasets absent from
    `dataset_losses` contribute nothing this step.
    """
    total = None
    for dataset_id, loss in dataset_losses.items():
        term = weights[dataset_id] * loss
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no dataset losses provided")
    if beta != 0.0:
        total = total + beta * mim
    return total


class AchievementTracker:
    """Epoch-indexed score history driving the per-dataset loss weights.

    Scores recorded at the end of epoch t produce the weights applied during
    epoch t+1; before any scores exist the weights are uniform.
    """

    def __init__(self, dataset_ids: list[str], targets: dict[str, float] | float = 1.0,
                 margin: float = 1.1, gamma: float = 2.0):
        if not dataset_ids:
            raise AchievementConfigError("need at least one dataset id")
        if margin <= 1.0:
            raise AchievementConfigError(f"margin must be > 1, got {margin}")
        if gamma < 0.0:
            raise AchievementConfigError(f"gamma must be >= 0, got {gamma}")
        self.dataset_ids = list(dataset_ids)
        if isinstance(targets, dict):
            missing = sorted(set(self.dataset_ids) - set(targets))
            if missing:
                raise AchievementConfigError(f"missing targets for {missing}")
            self.targets = {d: float(targets[d]) for d in self.dataset_ids}
        else:
            self.targets = {d: float(targets) for d in self.dataset_ids}
        for d, t in self.targets.items():
            if t <= 0.0:
                raise AchievementConfigError(f"target for {d} must be positive")
        self.margin = margin
        self.gamma = gamma
        self.history: list[dict[str, float]] = []

    def uniform_weights(self) -> dict[str, float]:
        w = 1.0 / len(self.dataset_ids)
        return {d: w for d in self.dataset_ids}

    def current_weights(self) -> dict[str, float]:
        if not self.history:
            return self.uniform_weights()
        latest = self.history[-1]
        raw = {d: raw_weight(latest[d], self.targets[d], self.margin, self.gamma)
               for d in self.dataset_ids}
        return normalize_weights(raw)

    def update_epoch(self, scores: dict[str, float]) -> dict[str, float]:
        """Record end-of-epoch dev scores; returns the next epoch's weights."""
        missing = sorted(set(self.dataset_ids) - set(scores))
        if missing:
            raise ValueError(f"missing scores for datasets: {missing}")
        for d in self.dataset_ids:
            s = scores[d]
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score for {d} must be in [0, 1], got {s}")
        self.history.append({d: float(scores[d]) for d in self.dataset_ids})
        return self.current_weights()
