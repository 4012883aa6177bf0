"""Loss-curve comparison: how many tokens each run needed to reach a level.

speedup(l) = tokens_baseline(l) / tokens_candidate(l), with token counts
linearly interpolated between logged points on the (smoothed) loss curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .training import RunLog


class LevelNotAttained(ValueError):
    pass


@dataclass
class LossCurve:
    """Loss (log perplexity) against a strictly increasing token axis;
    interpolation is linear in the logged loss values."""

    tokens: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.tokens.ndim != 1 or self.tokens.shape != self.losses.shape:
            raise ValueError("tokens and losses must be 1-D and the same length")
        if len(self.tokens) == 0:
            raise ValueError("empty curve")
        if not np.all(np.diff(self.tokens) > 0):
            raise ValueError("token counts must be strictly increasing")

    @classmethod
    def from_runlog(cls, log: RunLog, column: str = "ema_loss") -> "LossCurve":
        return cls(log.column("tokens_seen"), log.column(column))

    def min_loss(self) -> float:
        return float(self.losses.min())

    def tokens_to_reach(self, level: float) -> float:
        """Token count at the first crossing of ``level``."""
        below = np.nonzero(self.losses <= level)[0]
        if below.size == 0:
            raise LevelNotAttained(f"curve never reaches loss {level} (min {self.losses.min():.6g})")
        i = below[0]
        if i == 0:
            return float(self.tokens[0])
        t0, t1 = self.tokens[i - 1], self.tokens[i]
        l0, l1 = self.losses[i - 1], self.losses[i]
        frac = (l0 - level) / (l0 - l1)
        return float(t0 + (t1 - t0) * frac)


def speedup_at(curve_a: LossCurve, curve_b: LossCurve, level: float) -> float:
    """Tokens curve A took to reach ``level`` divided by curve B's tokens.

    Raises LevelNotAttained when either curve stays above the level.
    """
    return curve_a.tokens_to_reach(level) / curve_b.tokens_to_reach(level)
