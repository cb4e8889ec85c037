"""Result containers shared by the simulation loop and the benchmark methods."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evflex.dispatch import DispatchOutcome
from evflex.online import FlexibilityInterval
from evflex.queues import FifoLedger
from evflex.scenario import EvSession


@dataclass
class EmissionBudget:
    """Running carbon allowance in rate-sum units (kg/h accumulated per slot).

    After t slots the allowance is rate_cap * t; `consumed` accumulates
    w_{g,tau} * p^d_{s,tau} over dispatched slots.
    """

    rate_cap: float
    consumed: float = 0.0

    def allowance(self, slots_elapsed: int) -> float:
        return self.rate_cap * slots_elapsed

    def headroom(self, slots_elapsed: int) -> float:
        return max(self.allowance(slots_elapsed) - self.consumed, 0.0)

    def spend(self, intensity: float, power: float):
        self.consumed += intensity * power


@dataclass
class Trajectories:
    """Everything one simulated run produced, in slot order."""

    method: str
    intervals: list[FlexibilityInterval]
    outcomes: list[DispatchOutcome]
    sessions: list[EvSession]
    charge_hist: np.ndarray | None = None   # (T+1, K)
    delay_hist: np.ndarray | None = None    # (T+1, K)
    carbon_hist: np.ndarray | None = None   # (T+1,)
    ledger: FifoLedger | None = None
    decision_seconds: list = field(default_factory=list)
    undeliverable_total: float = 0.0
    offline: object = None                   # OfflineSolution for opi/mpc

    @property
    def total_flexibility_rate(self) -> float:
        return float(sum(iv.agg_upper - iv.agg_lower for iv in self.intervals))

    @property
    def dispatched_powers(self) -> np.ndarray:
        return np.array([o.total for o in self.outcomes])
