"""Two-phase embedding schedule: learned stage embedding above the split, unconditional below."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .msi import ConditionalEmbeddingSet, StageEmbedding, stage_of

TAU_ANONYMIZE = 0.4
TAU_HIDE = 0.6


@dataclass(frozen=True)
class ScheduleStrategy:
    tau: float
    T: int
    uncond: StageEmbedding

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")

    @property
    def switch_step(self) -> int:
        """Largest step that uses the unconditional embedding: ``floor(tau*T)``."""
        # decimal reading of tau so 0.4 * 1000 is exactly 400
        return math.floor(Fraction(str(self.tau)) * self.T)


def select_embedding(t: int, strat: ScheduleStrategy, key_e: ConditionalEmbeddingSet) -> StageEmbedding:
    """``key_e`` stage of ``t`` when ``t > floor(tau*T)``, else the unconditional embedding."""
    if not 0 <= t < strat.T:
        raise ValueError(f"step {t} outside [0, {strat.T})")
    if t > strat.switch_step:
        return key_e.stage(stage_of(t, strat.T))
    return strat.uncond
