"""Operator dispatch simulation and disaggregation to individual EVs: the
dispatch ratio, the group split, the two-stage FIFO allocation, battery
updates, and the convex-combination disaggregation used against offline
solutions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from evflex.online import FlexibilityInterval
from evflex.queues import FifoLedger

ALLOC_TOL = 1e-6


@dataclass
class DispatchPolicy:
    """How the simulated operator picks a point inside the reported interval.

    Modes: uniform_random draws the ratio fresh each slot; fixed_ratio uses
    one ratio everywhere; replay follows a given ratio trace; replay_power
    follows a trace of absolute powers clipped into each slot's interval.
    """

    mode: str = "uniform_random"
    gamma: float = 0.5
    trace: np.ndarray | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in {"uniform_random", "fixed_ratio", "replay", "replay_power"}:
            raise ValueError(f"unknown dispatch mode {self.mode!r}")
        if self.mode == "fixed_ratio" and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("fixed ratio must lie in [0, 1]")
        if self.trace is not None:
            self.trace = np.asarray(self.trace, dtype=float)

    def ratio_trace(self, horizon_slots: int) -> np.ndarray | None:
        """Pre-draw the per-slot ratios; None for replay_power mode."""
        if self.mode == "uniform_random":
            rng = np.random.default_rng(self.rng_seed)
            return rng.uniform(0.0, 1.0, size=horizon_slots)
        if self.mode == "fixed_ratio":
            return np.full(horizon_slots, self.gamma)
        if self.trace is None or self.trace.shape[0] < horizon_slots:
            raise ValueError("replay trace shorter than the horizon")
        return None if self.mode == "replay_power" else self.trace[:horizon_slots]


def draw_dispatch(interval: FlexibilityInterval, gamma: float) -> tuple[float, float]:
    """Dispatch power at the given ratio; degenerate intervals report ratio 0."""
    width = interval.agg_upper - interval.agg_lower
    if width <= 1e-12:
        return 0.0, interval.agg_lower
    return gamma, interval.agg_lower + gamma * width


def dispatch_from_power(interval: FlexibilityInterval, power: float) -> tuple[float, float]:
    """Clip an absolute power request into the interval; returns (ratio, power)."""
    p = float(np.clip(power, interval.agg_lower, interval.agg_upper))
    width = interval.agg_upper - interval.agg_lower
    gamma = 0.0 if width <= 1e-12 else (p - interval.agg_lower) / width
    return gamma, p


def split_to_groups(interval: FlexibilityInterval, gamma: float) -> np.ndarray:
    """Group-level dispatch: the same convex position within each group's range."""
    return (1.0 - gamma) * interval.lower + gamma * interval.upper


@dataclass
class DispatchOutcome:
    """Everything the operator's signal did to the fleet in one slot."""

    slot: int
    gamma: float
    total: float
    group_dispatch: np.ndarray
    stage1: np.ndarray
    stage2: np.ndarray
    allocations: dict = field(default_factory=dict)
    emission_rate: float = 0.0
    undeliverable: float = 0.0


def disaggregate_two_stage(group: int, group_dispatch: float, ledger: FifoLedger,
                           fleet, energies_caps: dict, slot: int):
    """Split one group's dispatch into per-EV powers.

    Stage 1 consumes the group's FIFO backlog front to back, crediting each
    task's owner up to its residual cap. Stage 2 hands the remainder to the
    group's in-station EVs in ascending arrival order. `energies_caps` maps
    EV id to residual cap and is decremented in place across both stages.

    Returns (stage1_power, stage2_power, allocations, undeliverable).
    """
    if group_dispatch < -1e-9:
        raise ValueError("group dispatch must be non-negative")
    group_cap = sum(energies_caps.get(fleet.ids[i], 0.0)
                    for i in np.flatnonzero(fleet.group == group))
    if group_dispatch > group_cap + ALLOC_TOL:
        raise ValueError(
            f"group {group} dispatch {group_dispatch:.9g} kW exceeds deliverable "
            f"cap {group_cap:.9g} kW")
    stage1, credit, _ = ledger.serve_capped(group, group_dispatch,
                                            energies_caps, slot)
    allocations = dict(credit)
    remainder = group_dispatch - stage1
    stage2 = 0.0
    if remainder > ALLOC_TOL:
        for i in fleet.arrival_order:
            if fleet.group[i] != group:
                continue
            ev_id = fleet.ids[i]
            cap = energies_caps.get(ev_id, 0.0)
            if cap <= ALLOC_TOL:
                continue
            take = min(cap, remainder)
            allocations[ev_id] = allocations.get(ev_id, 0.0) + take
            energies_caps[ev_id] = cap - take
            stage2 += take
            remainder -= take
            if remainder <= ALLOC_TOL:
                break
    undeliverable = max(remainder, 0.0) if remainder > ALLOC_TOL else 0.0
    return stage1, stage2, allocations, undeliverable


def apply_charging(sessions_by_id: dict, allocations: dict, efficiency: float,
                   slot_duration_h: float, slot: int):
    """Advance battery states by the realized charging powers."""
    for ev_id, power in allocations.items():
        session = sessions_by_id[ev_id]
        if not session.in_station(slot):
            raise ValueError(f"allocation to {ev_id} outside its stay")
        new_e = session.current_energy_kwh + efficiency * power * slot_duration_h
        if new_e > session.max_energy_kwh + 1e-6:
            raise ValueError(f"{ev_id}: charging beyond max energy")
        session.current_energy_kwh = min(new_e, session.max_energy_kwh)


def convex_combination_disaggregate(regulation_power: float, agg_lower: float,
                                    agg_upper: float, ev_lower: np.ndarray,
                                    ev_upper: np.ndarray):
    """Per-EV powers realizing a requested aggregate inside an offline region.

    Both per-EV trajectories are feasible, so their convex combination at
    the matching coefficient is feasible and sums exactly to the request.
    Returns (alpha, per_ev_powers).
    """
    if regulation_power < agg_lower - ALLOC_TOL or regulation_power > agg_upper + ALLOC_TOL:
        raise ValueError(
            f"regulation power {regulation_power:.9g} outside "
            f"[{agg_lower:.9g}, {agg_upper:.9g}]")
    width = agg_upper - agg_lower
    if width <= 1e-12:
        alpha = 1.0
    else:
        alpha = float(np.clip((agg_upper - regulation_power) / width, 0.0, 1.0))
    return alpha, alpha * np.asarray(ev_lower) + (1.0 - alpha) * np.asarray(ev_upper)


def write_dispatch_csv(path, outcomes: list[DispatchOutcome]):
    """Export the dispatch trace as `slot,gamma,p_dispatch,emission_rate`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "gamma", "p_dispatch", "emission_rate"])
        for o in outcomes:
            writer.writerow([o.slot, f"{o.gamma:.10g}", f"{o.total:.10g}",
                             f"{o.emission_rate:.10g}"])


def write_allocations_csv(path, outcomes: list[DispatchOutcome]):
    """Per-EV allocation rows `slot,ev_id,power_kw` for every dispatch slot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "ev_id", "power_kw"])
        for o in outcomes:
            for ev_id in sorted(o.allocations):
                writer.writerow([o.slot, ev_id, f"{o.allocations[ev_id]:.10g}"])
