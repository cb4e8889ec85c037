"""Per-slot flexibility quantification: the quadratic drift-plus-penalty
program solved in real time, its closed-form linear variant, per-EV and
per-group charging power caps, and the optimality-gap diagnostic constant."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from evflex import qp
from evflex.scenario import EvSession

SNAP_TOL = 1e-7


@dataclass(frozen=True)
class OnlineParams:
    """Controller weights for the per-slot program."""

    flexibility_weight: float      # V
    carbon_weight: float           # beta
    delay_weight: float            # lambda
    rate_cap: float                # r, kg/h
    slot_duration_h: float         # dt

    def __post_init__(self):
        if self.flexibility_weight <= 0:
            raise ValueError("flexibility_weight must be positive")
        if self.carbon_weight < 0:
            raise ValueError("carbon_weight must be non-negative")
        if self.delay_weight <= 0:
            raise ValueError("delay_weight must be positive")
        if self.rate_cap <= 0:
            raise ValueError("rate_cap must be positive")
        if self.slot_duration_h <= 0:
            raise ValueError("slot_duration_h must be positive")


@dataclass
class GroupCaps:
    """Per-slot charging power caps: per EV and aggregated per group."""

    slot: int
    ev_caps: dict
    group_caps: np.ndarray

    def __post_init__(self):
        self.group_caps = np.asarray(self.group_caps, dtype=float)
        if np.any(self.group_caps < -1e-9):
            raise ValueError("group caps must be non-negative")
        self.group_caps = np.maximum(self.group_caps, 0.0)


@dataclass
class FlexibilityInterval:
    """Reported per-slot aggregate power range and its per-group split."""

    slot: int
    lower: np.ndarray
    upper: np.ndarray
    agg_lower: float
    agg_upper: float
    solve_seconds: float = 0.0

    @property
    def width(self) -> float:
        return self.agg_upper - self.agg_lower


def ev_power_cap(session: EvSession, slot: int, efficiency: float,
                 slot_duration_h: float) -> float:
    """Maximum charging power of one EV this slot: the nameplate limit, or
    the battery headroom rate when that is smaller, or zero off-station."""
    if session.current_energy_kwh > session.max_energy_kwh + 1e-9:
        raise ValueError(f"{session.id}: energy above max_energy_kwh")
    if not session.in_station(slot):
        return 0.0
    headroom = session.max_energy_kwh - session.current_energy_kwh
    if session.current_energy_kwh + efficiency * session.max_power_kw * slot_duration_h \
            <= session.max_energy_kwh + 1e-12:
        return session.max_power_kw
    return max(headroom / (efficiency * slot_duration_h), 0.0)


class FleetIndex:
    """Vectorized per-slot cap computation over a fixed fleet."""

    def __init__(self, sessions: list[EvSession], n_groups: int):
        self.sessions = sessions
        self.ids = [s.id for s in sessions]
        self.pos = {s.id: i for i, s in enumerate(sessions)}
        self.arrival = np.array([s.arrival_slot for s in sessions], dtype=int)
        self.departure = np.array([s.departure_slot for s in sessions], dtype=int)
        self.p_max = np.array([s.max_power_kw for s in sessions])
        self.e_max = np.array([s.max_energy_kwh for s in sessions])
        self.e_req = np.array([s.required_energy_kwh for s in sessions])
        self.e_ini = np.array([s.initial_energy_kwh for s in sessions])
        self.group = np.array([s.group_index for s in sessions], dtype=int)
        self.n_groups = n_groups
        # stage-2 scan order: ascending arrival, fleet order breaking ties
        self.arrival_order = sorted(range(len(sessions)),
                                    key=lambda i: (self.arrival[i], i))

    def cap_vector(self, energies: np.ndarray, slot: int, efficiency: float,
                   slot_duration_h: float) -> np.ndarray:
        in_station = (self.arrival <= slot) & (slot < self.departure)
        headroom = (self.e_max - energies) / (efficiency * slot_duration_h)
        return np.where(in_station, np.minimum(self.p_max, np.maximum(headroom, 0.0)), 0.0)

    def caps(self, energies: np.ndarray, slot: int, efficiency: float,
             slot_duration_h: float) -> GroupCaps:
        vec = self.cap_vector(energies, slot, efficiency, slot_duration_h)
        group_caps = np.zeros(self.n_groups)
        np.add.at(group_caps, self.group, vec)
        ev_caps = {self.ids[i]: float(vec[i]) for i in np.flatnonzero(vec > 0)}
        return GroupCaps(slot=slot, ev_caps=ev_caps, group_caps=group_caps)


def build_p4(charge: np.ndarray, delay: np.ndarray, carbon: float,
             intensity: float, caps: GroupCaps, params: OnlineParams,
             group_durations: np.ndarray) -> qp.QpProblem:
    """Assemble the per-slot quadratic program over x = (lower_1..K, upper_1..K).

    The quadratic part is a diagonal block for the lower bounds plus the
    rank-one carbon pressure term coupling the upper bounds; constraints are
    the per-group cap boxes and the interval-ordering rows.
    """
    k = caps.group_caps.shape[0]
    if np.any(caps.group_caps < 0):
        raise ValueError("negative group caps")
    w = intensity
    v_dt = params.flexibility_weight * params.slot_duration_h
    beta = params.carbon_weight
    P = np.zeros((2 * k, 2 * k))
    P[:k, :k] = 2.0 * np.eye(k)
    P[k:, k:] = beta * w * w * np.ones((k, k))
    q = np.concatenate([
        v_dt - charge - delay - params.delay_weight / group_durations,
        np.full(k, -v_dt + beta * carbon * w - beta * params.rate_cap * w),
    ])
    A = np.zeros((3 * k, 2 * k))
    A[:2 * k, :2 * k] = np.eye(2 * k)
    for j in range(k):
        A[2 * k + j, j] = -1.0
        A[2 * k + j, k + j] = 1.0
    l = np.concatenate([np.zeros(2 * k), np.zeros(k)])
    u = np.concatenate([caps.group_caps, caps.group_caps, np.full(k, np.inf)])
    return qp.QpProblem(P=P, q=q, A=A, l=l, u=u)


def _finish_interval(slot, lower, upper, caps, solve_seconds):
    """Clamp solver noise into the feasible box and snap near-bound values."""
    cap = caps.group_caps
    lower = np.clip(lower, 0.0, cap)
    upper = np.clip(upper, 0.0, cap)
    lower = np.where(np.abs(lower) < SNAP_TOL, 0.0, lower)
    upper = np.where(np.abs(upper) < SNAP_TOL, 0.0, upper)
    lower = np.where(np.abs(lower - cap) < SNAP_TOL, cap, lower)
    upper = np.where(np.abs(upper - cap) < SNAP_TOL, cap, upper)
    lower = np.where(np.abs(upper - lower) < SNAP_TOL, upper, lower)
    lower = np.minimum(lower, upper)
    return FlexibilityInterval(
        slot=slot, lower=lower, upper=upper,
        agg_lower=float(lower.sum()), agg_upper=float(upper.sum()),
        solve_seconds=solve_seconds)


def solve_slot(state, intensity: float, caps: GroupCaps, params: OnlineParams,
               group_durations: np.ndarray, warm=None):
    """Solve the per-slot program and report the flexibility interval.

    Returns (interval, warm) where `warm` carries the primal/dual solution
    for warm-starting the next slot.
    """
    k = caps.group_caps.shape[0]
    t0 = time.perf_counter()
    if np.all(caps.group_caps <= 1e-12):
        interval = _finish_interval(state.slot, np.zeros(k), np.zeros(k), caps,
                                    time.perf_counter() - t0)
        return interval, None
    problem = build_p4(state.charge, state.delay, state.carbon, intensity,
                       caps, params, group_durations)
    warm_x, warm_y = warm if warm is not None else (None, None)
    sol = qp.solve(problem, tol_primal=1e-6, tol_dual=1e-6,
                   admm_tol_primal=1e-4, admm_tol_dual=1e-4,
                   warm_x=warm_x, warm_y=warm_y)
    if sol.status != "solved":
        raise RuntimeError(
            f"slot {state.slot}: per-slot program {sol.status} "
            f"(residuals {sol.primal_residual:.2e}/{sol.dual_residual:.2e})")
    interval = _finish_interval(state.slot, sol.x[:k].copy(), sol.x[k:].copy(),
                                caps, time.perf_counter() - t0)
    return interval, (sol.x, sol.duals)


def solve_slot_linear_b3(state, intensity: float, caps: GroupCaps,
                         params: OnlineParams, group_durations: np.ndarray):
    """Closed-form minimizer of the linear drift-plus-penalty expression.

    Each group's two-variable LP over the triangle 0 <= lower <= upper <= cap
    is solved by vertex enumeration; constant terms are dropped as they do
    not move the argmin.
    """
    t0 = time.perf_counter()
    k = caps.group_caps.shape[0]
    v_dt = params.flexibility_weight * params.slot_duration_h
    c_lower = v_dt - state.charge - state.delay
    c_upper = np.full(k, -v_dt + params.carbon_weight * state.carbon * intensity)
    lower = np.zeros(k)
    upper = np.zeros(k)
    for j in range(k):
        cap = caps.group_caps[j]
        vertices = ((0.0, cap), (cap, cap), (0.0, 0.0))
        best = None
        for lo, hi in vertices:
            val = c_lower[j] * lo + c_upper[j] * hi
            if best is None or val < best[0] - 1e-12:
                best = (val, lo, hi)
        lower[j], upper[j] = best[1], best[2]
    return _finish_interval(state.slot, lower, upper, caps,
                            time.perf_counter() - t0)


def theorem_gap_constant(params: OnlineParams, group_durations: np.ndarray,
                         arrival_max: np.ndarray, lower_max: np.ndarray,
                         upper_agg_max: float, intensity_max: float):
    """Drift-bound constant and the optimality-gap width it implies.

    Returns (B, B / V): the worst-case one-slot drift bound and the
    guaranteed gap of the online policy's time-average flexibility.
    """
    arrival_max = np.asarray(arrival_max, dtype=float)
    lower_max = np.asarray(lower_max, dtype=float)
    group_durations = np.asarray(group_durations, dtype=float)
    lam_term = (params.delay_weight / group_durations) ** 2
    b = (0.5 * np.sum(arrival_max ** 2 + lower_max ** 2)
         + 0.5 * np.sum(np.maximum(lam_term, lower_max ** 2))
         + 0.5 * params.carbon_weight
         * max((intensity_max * upper_agg_max) ** 2, params.rate_cap ** 2))
    return float(b), float(b / params.flexibility_weight)
