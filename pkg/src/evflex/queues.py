"""Backlog dynamics for the three queue families driving per-slot decisions:
per-group charging backlogs J, delay-aware virtual backlogs H, and the
carbon-rate virtual backlog Q_c, plus the FIFO task ledger used to measure
worst-case completion delays."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

QUEUE_TOL = 1e-9


@dataclass(frozen=True)
class QueueParams:
    """Weights and constants shared by every queue update.

    carbon_step scales the carbon backlog's per-slot increment: 1.0
    accumulates rate-unit violations (one per slot), while a slot length in
    hours accumulates the absolute emission overshoot in kg. The latter is
    what reproduces the reported behavior of the method at the reference
    parameter set; the former is the literal per-slot recursion.
    """

    delay_weight: float            # lambda
    rate_cap: float                # r, kg/h
    carbon_weight: float           # beta
    group_durations: np.ndarray    # R_k in slots
    carbon_step: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "group_durations",
                           np.asarray(self.group_durations, dtype=float))
        if self.delay_weight <= 0:
            raise ValueError("delay_weight must be positive")
        if self.rate_cap <= 0:
            raise ValueError("rate_cap must be positive")
        if self.carbon_weight < 0:
            raise ValueError("carbon_weight must be non-negative")
        if np.any(self.group_durations <= 0):
            raise ValueError("group durations must be positive")
        if self.carbon_step <= 0:
            raise ValueError("carbon_step must be positive")

    @property
    def n_groups(self) -> int:
        return self.group_durations.shape[0]


@dataclass
class QueueState:
    """Queue backlog vector at one slot: (J_1..K, H_1..K, Q_c)."""

    charge: np.ndarray
    delay: np.ndarray
    carbon: float
    slot: int = 0

    def __post_init__(self):
        self.charge = np.asarray(self.charge, dtype=float)
        self.delay = np.asarray(self.delay, dtype=float)
        if self.charge.shape != self.delay.shape:
            raise ValueError("charge and delay backlogs must have equal length")
        if np.any(self.charge < -QUEUE_TOL) or np.any(self.delay < -QUEUE_TOL) \
                or self.carbon < -QUEUE_TOL:
            raise ValueError("backlogs must be non-negative")

    @classmethod
    def zeros(cls, n_groups: int) -> "QueueState":
        return cls(np.zeros(n_groups), np.zeros(n_groups), 0.0, 0)

    @property
    def n_groups(self) -> int:
        return self.charge.shape[0]


def _check_nonneg(**values):
    for name, v in values.items():
        if np.any(np.asarray(v) < -QUEUE_TOL):
            raise ValueError(f"{name} must be non-negative, got {v}")


def update_charge_queue(backlog: float, service: float, arrival: float) -> float:
    """One step of the charging-backlog recursion."""
    _check_nonneg(backlog=backlog, service=service, arrival=arrival)
    return max(backlog - service, 0.0) + arrival


def update_delay_queue(backlog: float, service: float, charge_before: float,
                       delay_weight: float, duration_slots: float) -> float:
    """One step of the delay-aware backlog; resets to zero when the charging
    backlog was cleared by the slot's service."""
    _check_nonneg(backlog=backlog, service=service, charge_before=charge_before)
    if duration_slots <= 0:
        raise ValueError("duration_slots must be positive")
    if charge_before - service > QUEUE_TOL:
        return max(backlog + delay_weight / duration_slots - service, 0.0)
    return 0.0


def update_carbon_queue(backlog: float, intensity: float, power: float,
                        rate_cap: float) -> float:
    """One step of the carbon-rate backlog (kg/h units)."""
    _check_nonneg(backlog=backlog, intensity=intensity, power=power)
    return max(backlog + intensity * power - rate_cap, 0.0)


def advance_aggregation(state: QueueState, lower_bounds: np.ndarray,
                        upper_sum: float, arrivals: np.ndarray,
                        intensity: float, params: QueueParams) -> QueueState:
    """Aggregation-time update: J and H are served by the reported lower
    bounds, Q_c charged by the reported aggregate upper bound. Used when
    dispatch feedback is disabled."""
    lower_bounds = np.asarray(lower_bounds, dtype=float)
    arrivals = np.asarray(arrivals, dtype=float)
    k = state.n_groups
    if lower_bounds.shape[0] != k or arrivals.shape[0] != k \
            or params.n_groups != k:
        raise ValueError("group dimension mismatch")
    _check_nonneg(lower_bounds=lower_bounds, arrivals=arrivals, upper_sum=upper_sum)
    charge = np.maximum(state.charge - lower_bounds, 0.0) + arrivals
    grow = state.charge - lower_bounds > QUEUE_TOL
    delay = np.where(
        grow,
        np.maximum(state.delay + params.delay_weight / params.group_durations
                   - lower_bounds, 0.0),
        0.0)
    carbon = update_carbon_queue(state.carbon, intensity,
                                 upper_sum * params.carbon_step,
                                 params.rate_cap * params.carbon_step)
    return QueueState(charge, delay, carbon, state.slot + 1)


def advance_with_dispatch(state: QueueState, stage1: np.ndarray,
                          total_dispatch: float, arrivals: np.ndarray,
                          intensity: float, params: QueueParams) -> QueueState:
    """Dispatch-corrected update: J and H are served by the stage-1 group
    dispatch, Q_c charged by the realized aggregate dispatch."""
    stage1 = np.asarray(stage1, dtype=float)
    arrivals = np.asarray(arrivals, dtype=float)
    k = state.n_groups
    if stage1.shape[0] != k or arrivals.shape[0] != k or params.n_groups != k:
        raise ValueError("group dimension mismatch")
    _check_nonneg(stage1=stage1, arrivals=arrivals, total_dispatch=total_dispatch)
    if total_dispatch < stage1.sum() - 1e-9:
        raise ValueError("total dispatch below the stage-1 group total")
    charge = np.maximum(state.charge - stage1, 0.0) + arrivals
    grow = state.charge - stage1 > QUEUE_TOL
    delay = np.where(
        grow,
        np.maximum(state.delay + params.delay_weight / params.group_durations
                   - stage1, 0.0),
        0.0)
    carbon = update_carbon_queue(state.carbon, intensity,
                                 total_dispatch * params.carbon_step,
                                 params.rate_cap * params.carbon_step)
    return QueueState(charge, delay, carbon, state.slot + 1)


def delay_bound(charge_peak: float, delay_peak: float, delay_weight: float,
                duration_slots: float) -> float:
    """Worst-case FIFO completion delay implied by the observed backlog peaks."""
    _check_nonneg(charge_peak=charge_peak, delay_peak=delay_peak)
    if delay_weight <= 0:
        raise ValueError("delay_weight must be positive")
    return (charge_peak + delay_peak) * duration_slots / delay_weight


# ---------------------------------------------------------------------------
# FIFO task ledger


@dataclass
class TaskCompletion:
    ev_id: str
    arrival_slot: int
    completion_slot: int

    @property
    def delay(self) -> int:
        return self.completion_slot - self.arrival_slot


class FifoLedger:
    """Per-group FIFO lists of outstanding charging tasks.

    Mirrors the J backlogs task by task: the sum of entry powers in group k
    always equals J_k (to queue tolerance). Tasks are consumed front to
    back, possibly partially; a task's delay is measured at the slot its
    power is fully consumed.
    """

    def __init__(self, n_groups: int):
        self.entries: list[deque] = [deque() for _ in range(n_groups)]
        self.charge_peak = np.zeros(n_groups)
        self.delay_peak = np.zeros(n_groups)
        self.completions: list[list[TaskCompletion]] = [[] for _ in range(n_groups)]

    def push(self, group: int, power_kw: float, arrival_slot: int, ev_id: str):
        if power_kw < -QUEUE_TOL:
            raise ValueError("task power must be non-negative")
        if power_kw > QUEUE_TOL:
            self.entries[group].append([float(power_kw), arrival_slot, ev_id])

    def group_total(self, group: int) -> float:
        return sum(e[0] for e in self.entries[group])

    def observe_state(self, state: QueueState):
        """Track running maxima of J and H for the delay bound."""
        self.charge_peak = np.maximum(self.charge_peak, state.charge)
        self.delay_peak = np.maximum(self.delay_peak, state.delay)

    def serve(self, group: int, service: float, slot: int) -> list[TaskCompletion]:
        """Consume up to `service` kW front-to-back; over-service is allowed
        and simply empties the group. Returns the tasks completed this slot."""
        if service < -QUEUE_TOL:
            raise ValueError("service must be non-negative")
        remaining = float(service)
        done = []
        queue = self.entries[group]
        while queue and remaining > QUEUE_TOL:
            entry = queue[0]
            take = min(entry[0], remaining)
            entry[0] -= take
            remaining -= take
            if entry[0] <= QUEUE_TOL:
                queue.popleft()
                done.append(TaskCompletion(entry[2], entry[1], slot))
        self.completions[group].extend(done)
        return done

    def serve_capped(self, group: int, budget: float, residual_caps: dict,
                     slot: int):
        """FIFO consumption with per-owner power caps.

        Walks entries front to back; each entry is served up to the smaller
        of the remaining budget and its owner's residual cap (the cap map is
        decremented in place). Cap-limited entries keep their remainder and
        stay in place. Returns (consumed_total, per-EV credit, completions).
        """
        if budget < -QUEUE_TOL:
            raise ValueError("budget must be non-negative")
        remaining = float(budget)
        credit: dict[str, float] = {}
        done = []
        keep = deque()
        queue = self.entries[group]
        while queue:
            entry = queue.popleft()
            if remaining <= QUEUE_TOL:
                keep.append(entry)
                continue
            cap = residual_caps.get(entry[2], 0.0)
            take = min(entry[0], remaining, max(cap, 0.0))
            if take > QUEUE_TOL:
                entry[0] -= take
                remaining -= take
                residual_caps[entry[2]] = cap - take
                credit[entry[2]] = credit.get(entry[2], 0.0) + take
            if entry[0] <= QUEUE_TOL:
                done.append(TaskCompletion(entry[2], entry[1], slot))
            else:
                keep.append(entry)
        self.entries[group] = keep
        self.completions[group].extend(done)
        consumed = float(budget) - remaining
        return consumed, credit, done

    def max_observed_delay(self, group: int) -> int:
        if not self.completions[group]:
            return 0
        return max(c.delay for c in self.completions[group])

    def delay_bounds(self, params: QueueParams) -> np.ndarray:
        return np.array([
            delay_bound(self.charge_peak[k], self.delay_peak[k],
                        params.delay_weight, params.group_durations[k])
            for k in range(len(self.entries))
        ])


def record_service(ledger: FifoLedger, group: int, service: float,
                   slot: int) -> list[TaskCompletion]:
    """Plain FIFO service of a group's ledger (no per-owner caps)."""
    return ledger.serve(group, service, slot)


def write_queue_csv(path, charge_hist: np.ndarray, delay_hist: np.ndarray,
                    carbon_hist: np.ndarray):
    """Export queue trajectories as `slot,group,J,H,Qc` rows."""
    charge_hist = np.atleast_2d(charge_hist)
    delay_hist = np.atleast_2d(delay_hist)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "group", "J", "H", "Qc"])
        for t in range(charge_hist.shape[0]):
            for k in range(charge_hist.shape[1]):
                writer.writerow([t, k, f"{charge_hist[t, k]:.10g}",
                                 f"{delay_hist[t, k]:.10g}",
                                 f"{carbon_hist[t]:.10g}"])
