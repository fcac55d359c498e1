from __future__ import annotations

import math


class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations without a strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be positive")
        self.patience = patience
        self.best = math.inf
        self.best_index = -1
        self.count = 0

    def update(self, loss: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        index = self.count
        self.count += 1
        if loss < self.best:
            self.best = loss
            self.best_index = index
            return False
        return index - self.best_index >= self.patience
