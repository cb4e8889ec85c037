"""Comparison methods: the simple schedule (B1), the greedy budget-banking
method (B2), the perfect-information offline program (OPI), and the
receding-horizon controller (MPC) with convex-combination disaggregation.
The linear-objective real-time variant (B3) lives in evflex.online."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from evflex import qp
from evflex.qp.solver import QpWorkspace
from evflex.dispatch import (DispatchOutcome, DispatchPolicy,
                             convex_combination_disaggregate, draw_dispatch)
from evflex.online import FleetIndex, FlexibilityInterval
from evflex.runtypes import EmissionBudget, Trajectories
from evflex.scenario import CarbonTrace, EvSession, SimClock

OPI_EPSILON = 1e-4
# absorbs accumulated per-slot solver/clipping drift in the pinned
# re-solves; small against kWh-scale energy requirements
REQ_SLACK_MPC = 0.05


# ---------------------------------------------------------------------------
# offline program


@dataclass
class OfflineSolution:
    """Per-EV and aggregate upper/lower trajectories of the offline program."""

    ev_ids: list
    upper_power: np.ndarray     # (N, T)
    lower_power: np.ndarray     # (N, T)
    upper_energy: np.ndarray    # (N, T+1), boundary energies
    lower_energy: np.ndarray    # (N, T+1)
    agg_upper: np.ndarray       # (T,)
    agg_lower: np.ndarray       # (T,)
    objective: float            # max-form objective value
    epsilon: float
    solve_seconds: float
    primal_residual: float
    dual_residual: float

    @property
    def total_flexibility_rate(self) -> float:
        return float(np.sum(self.agg_upper - self.agg_lower))


class OfflineAssembler:
    """Builds the full- or remaining-horizon offline QP over per-EV powers.

    Charging powers are non-negative, so battery energy is monotone and the
    per-slot energy box collapses to one two-sided terminal-energy row per
    EV per trajectory; this keeps the program small and sparse. Variables
    are the upper powers, the lower powers, and one interval-width variable
    per slot carrying the objective.
    """

    def __init__(self, sessions: list[EvSession], carbon: CarbonTrace,
                 clock: SimClock, rate_cap: float, efficiency: float,
                 epsilon: float = OPI_EPSILON):
        self.sessions = sessions
        self.carbon = carbon
        self.clock = clock
        self.rate_cap = rate_cap
        self.efficiency = efficiency
        self.epsilon = epsilon

    def build(self, start_slot: int = 0, energies=None,
              budget_rate_sum: float | None = None, req_slack: float = 0.0):
        """Returns (QpProblem, layout) for the horizon tail [start_slot, T)."""
        T = self.clock.horizon_slots
        dt = self.clock.slot_duration_h
        eff_dt = self.efficiency * dt
        nd = T - start_slot
        if nd <= 0:
            raise ValueError("start_slot beyond the horizon")
        active = []
        for i, s in enumerate(self.sessions):
            w0 = max(s.arrival_slot, start_slot)
            if s.departure_slot > w0:
                e0 = s.initial_energy_kwh if s.arrival_slot >= start_slot else \
                    (float(energies[i]) if energies is not None
                     else s.current_energy_kwh)
                active.append((i, w0, s.departure_slot, e0))
        na = len(active)
        lengths = np.array([t1 - t0 for _, t0, t1, _ in active], dtype=int)
        n_power = int(lengths.sum())
        n = 2 * n_power + nd
        offsets = (np.concatenate([[0], np.cumsum(lengths)])[:-1]
                   if na else np.zeros(0, int))
        d_off = 2 * n_power

        rows_i, cols_i, vals = [], [], []
        l_parts, u_parts = [], []
        row = 0

        # power boxes for both trajectories
        pmax = (np.concatenate([
            np.full(int(L), self.sessions[i].max_power_kw)
            for (i, _, _, _), L in zip(active, lengths)
        ]) if na else np.zeros(0))
        box_rows = np.arange(2 * n_power)
        rows_i.append(box_rows)
        cols_i.append(box_rows)
        vals.append(np.ones(2 * n_power))
        l_parts.append(np.zeros(2 * n_power))
        u_parts.append(np.concatenate([pmax, pmax]))
        row += 2 * n_power

        # terminal energy rows, upper then lower trajectory, per EV
        for side in range(2):
            for a_idx, (i, t0, t1, e0) in enumerate(active):
                s = self.sessions[i]
                L = t1 - t0
                base = side * n_power + offsets[a_idx]
                rows_i.append(np.full(L, row))
                cols_i.append(np.arange(base, base + L))
                vals.append(np.full(L, eff_dt))
                l_parts.append([s.required_energy_kwh - e0 - req_slack])
                u_parts.append([max(s.max_energy_kwh - e0, 0.0)])
                row += 1

        # width-link rows: sum(upper_t) - sum(lower_t) - d_t = 0
        for tau in range(nd):
            t = start_slot + tau
            cols = [d_off + tau]
            val = [-1.0]
            for a_idx, (i, t0, t1, _) in enumerate(active):
                if t0 <= t < t1:
                    cols.append(offsets[a_idx] + (t - t0))
                    val.append(1.0)
                    cols.append(n_power + offsets[a_idx] + (t - t0))
                    val.append(-1.0)
            rows_i.append(np.full(len(cols), row))
            cols_i.append(np.array(cols))
            vals.append(np.array(val))
            l_parts.append([0.0])
            u_parts.append([0.0])
            row += 1

        # width non-negativity
        rows_i.append(np.arange(row, row + nd))
        cols_i.append(np.arange(d_off, d_off + nd))
        vals.append(np.ones(nd))
        l_parts.append(np.zeros(nd))
        u_parts.append(np.full(nd, np.inf))
        row += nd

        # carbon rate-sum cap on the upper trajectory
        c_cols = [np.arange(offsets[a], offsets[a] + (t1 - t0))
                  for a, (i, t0, t1, _) in enumerate(active)]
        c_vals = [self.carbon.values[t0:t1] for (i, t0, t1, _) in active]
        n_cc = sum(len(c) for c in c_cols)
        rows_i.append(np.full(n_cc, row))
        cols_i.append(np.concatenate(c_cols) if c_cols else np.zeros(0, int))
        vals.append(np.concatenate(c_vals) if c_vals else np.zeros(0))
        budget = self.rate_cap * T if budget_rate_sum is None else budget_rate_sum
        l_parts.append([-np.inf])
        u_parts.append([budget])
        row += 1

        A = sp.csc_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows_i), np.concatenate(cols_i))),
            shape=(row, n))
        P = sp.diags(np.concatenate([np.zeros(2 * n_power),
                                     np.full(nd, 2.0 * self.epsilon)]),
                     format="csc")
        q = np.concatenate([np.zeros(2 * n_power), np.full(nd, -dt)])
        problem = qp.QpProblem(
            P=P, q=q, A=A,
            l=np.concatenate([np.asarray(p, dtype=float).ravel() for p in l_parts]),
            u=np.concatenate([np.asarray(p, dtype=float).ravel() for p in u_parts]))
        layout = {
            "active": active, "offsets": offsets, "lengths": lengths,
            "n_power": n_power, "d_off": d_off, "start_slot": start_slot,
            "nd": nd, "n_rows": row,
        }
        return problem, layout

    def expand(self, solution_x: np.ndarray, layout, residuals=(0.0, 0.0),
               solve_seconds: float = 0.0, objective: float = 0.0) -> OfflineSolution:
        """Reconstruct full per-EV trajectories from the packed variables."""
        T = self.clock.horizon_slots
        eff_dt = self.efficiency * self.clock.slot_duration_h
        N = len(self.sessions)
        up = np.zeros((N, T))
        lo = np.zeros((N, T))
        n_power = layout["n_power"]
        for a_idx, (i, t0, t1, e0) in enumerate(layout["active"]):
            off = layout["offsets"][a_idx]
            L = layout["lengths"][a_idx]
            up[i, t0:t1] = solution_x[off:off + L]
            lo[i, t0:t1] = solution_x[n_power + off:n_power + off + L]
        up_e = np.zeros((N, T + 1))
        lo_e = np.zeros((N, T + 1))
        for i, s in enumerate(self.sessions):
            e0 = s.initial_energy_kwh
            for a_idx, (j, t0, t1, e_act) in enumerate(layout["active"]):
                if j == i:
                    e0 = e_act
                    break
            up_e[i, :] = e0
            lo_e[i, :] = e0
            up_e[i, 1:] += np.cumsum(up[i] * eff_dt)
            lo_e[i, 1:] += np.cumsum(lo[i] * eff_dt)
        return OfflineSolution(
            ev_ids=[s.id for s in self.sessions],
            upper_power=up, lower_power=lo,
            upper_energy=up_e, lower_energy=lo_e,
            agg_upper=up.sum(axis=0), agg_lower=lo.sum(axis=0),
            objective=objective, epsilon=self.epsilon,
            solve_seconds=solve_seconds,
            primal_residual=residuals[0], dual_residual=residuals[1],
        )

    def row_offsets(self, layout):
        """Start offsets of the constraint-row blocks in build() order."""
        na = len(layout["active"])
        n_power, nd = layout["n_power"], layout["nd"]
        boxes = 0
        energy = 2 * n_power
        links = energy + 2 * na
        dbox = links + nd
        carbon = dbox + nd
        return {"boxes": boxes, "energy": energy, "links": links,
                "dbox": dbox, "carbon": carbon}


def solve_opi(sessions: list[EvSession], carbon: CarbonTrace, clock: SimClock,
              rate_cap: float, epsilon: float = OPI_EPSILON,
              efficiency: float = 0.95) -> OfflineSolution:
    """Full-horizon offline program with perfect information."""
    assembler = OfflineAssembler(sessions, carbon, clock, rate_cap, efficiency,
                                 epsilon)
    problem, layout = assembler.build()
    t0 = time.perf_counter()
    sol = qp.solve(problem, tol_primal=1e-6, tol_dual=1e-6,
                   admm_tol_primal=1e-4, admm_tol_dual=1e-4, max_iter=40000)
    elapsed = time.perf_counter() - t0
    if sol.status == "infeasible":
        raise RuntimeError("offline program infeasible (fleet demand cannot "
                           "be met under the configured carbon cap)")
    return assembler.expand(sol.x, layout,
                            residuals=(sol.primal_residual, sol.dual_residual),
                            solve_seconds=elapsed, objective=-sol.objective)


def _group_split(values: np.ndarray, fleet: FleetIndex) -> np.ndarray:
    split = np.zeros(fleet.n_groups)
    np.add.at(split, fleet.group, values)
    return split


def run_opi(sessions, carbon, clock, rate_cap, efficiency=0.95,
            epsilon=OPI_EPSILON) -> Trajectories:
    """OPI as a comparison run: intervals from the offline trajectories,
    emission accounting on the carbon-capped upper trajectory."""
    offline = solve_opi(sessions, carbon, clock, rate_cap, epsilon=epsilon,
                        efficiency=efficiency)
    n_groups = max(s.group_index for s in sessions) + 1
    fleet = FleetIndex(sessions, n_groups)
    intervals, outcomes = [], []
    for t in range(clock.horizon_slots):
        lower = _group_split(offline.lower_power[:, t], fleet)
        upper = _group_split(offline.upper_power[:, t], fleet)
        intervals.append(FlexibilityInterval(
            slot=t, lower=lower, upper=upper,
            agg_lower=float(offline.agg_lower[t]),
            agg_upper=float(offline.agg_upper[t]),
            solve_seconds=offline.solve_seconds / clock.horizon_slots))
        power = float(offline.agg_upper[t])
        outcomes.append(DispatchOutcome(
            slot=t, gamma=1.0, total=power,
            group_dispatch=upper, stage1=np.zeros(n_groups), stage2=upper,
            allocations={}, emission_rate=carbon[t] * power))
    for i, s in enumerate(sessions):
        s.current_energy_kwh = float(offline.upper_energy[i, s.departure_slot])
    return Trajectories(method="opi", intervals=intervals, outcomes=outcomes,
                        sessions=sessions, offline=offline,
                        decision_seconds=[offline.solve_seconds])


# ---------------------------------------------------------------------------
# B1: simple schedule


def run_b1(sessions, carbon, clock, rate_cap, efficiency=0.95) -> Trajectories:
    """Charge at full power to the required level, then offer [0, p_max]
    until the battery ceiling; both bounds per-slot capped to the carbon
    rate, must-charge curtailed in arrival order. No dispatch feedback."""
    n_groups = max(s.group_index for s in sessions) + 1
    fleet = FleetIndex(sessions, n_groups)
    energies = fleet.e_ini.copy()
    dt = clock.slot_duration_h
    intervals, outcomes, times = [], [], []
    for t in range(clock.horizon_slots):
        t0 = time.perf_counter()
        w = carbon[t]
        cap_rate = rate_cap / w
        in_station = (fleet.arrival <= t) & (t < fleet.departure)
        must = in_station & (energies < fleet.e_req - 1e-12)
        flex = in_station & ~must & (energies < fleet.e_max - 1e-12)
        must_power = np.where(
            must,
            np.minimum(fleet.p_max, (fleet.e_req - energies) / (efficiency * dt)),
            0.0)
        flex_power = np.where(
            flex,
            np.minimum(fleet.p_max, (fleet.e_max - energies) / (efficiency * dt)),
            0.0)
        # curtail must-charge in arrival order under the per-slot carbon cap
        realized = np.zeros(len(sessions))
        budget = cap_rate
        for i in fleet.arrival_order:
            if must_power[i] <= 0.0 or budget <= 1e-12:
                continue
            take = min(must_power[i], budget)
            realized[i] = take
            budget -= take
        p_low = float(realized.sum())
        flex_sum = float(flex_power.sum())
        flex_allow = min(flex_sum, max(cap_rate - p_low, 0.0))
        p_up = p_low + flex_allow
        flex_scale = flex_allow / flex_sum if flex_sum > 0 else 0.0
        energies = energies + efficiency * realized * dt
        times.append(time.perf_counter() - t0)
        low_split = _group_split(realized, fleet)
        intervals.append(FlexibilityInterval(
            slot=t, lower=low_split,
            upper=low_split + flex_scale * _group_split(flex_power, fleet),
            agg_lower=p_low, agg_upper=p_up,
            solve_seconds=times[-1]))
        outcomes.append(DispatchOutcome(
            slot=t, gamma=0.0, total=p_low,
            group_dispatch=low_split,
            stage1=np.zeros(n_groups), stage2=low_split,
            allocations={fleet.ids[i]: float(realized[i])
                         for i in np.flatnonzero(realized > 0)},
            emission_rate=w * p_low))
    for i, s in enumerate(sessions):
        s.current_energy_kwh = float(energies[i])
    return Trajectories(method="b1", intervals=intervals, outcomes=outcomes,
                        sessions=sessions, decision_seconds=times)


# ---------------------------------------------------------------------------
# B2: greedy with budget banking


def run_b2(sessions, carbon, clock, rate_cap, policy: DispatchPolicy,
           arrival_totals: np.ndarray, group_arrivals: np.ndarray,
           ev_arrivals: dict | None = None, efficiency=0.95) -> Trajectories:
    """Current arrivals as the lower bound, all available charging power as
    the upper bound, both capped by the banked time-average emission budget.
    The dispatch signal consumes the budget and charges EVs greedily: fresh
    tasks first, then requirement shortfall, then spare battery headroom,
    each pass in arrival order."""
    n_groups = max(s.group_index for s in sessions) + 1
    fleet = FleetIndex(sessions, n_groups)
    energies = fleet.e_ini.copy()
    dt = clock.slot_duration_h
    budget = EmissionBudget(rate_cap=rate_cap)
    gammas = policy.ratio_trace(clock.horizon_slots)
    fresh_by_pos = np.zeros((len(sessions), clock.horizon_slots))
    if ev_arrivals is not None:
        for i, ev_id in enumerate(fleet.ids):
            fresh_by_pos[i] = ev_arrivals[ev_id]
    intervals, outcomes, times = [], [], []
    for t in range(clock.horizon_slots):
        t0 = time.perf_counter()
        w = carbon[t]
        caps = fleet.cap_vector(energies, t, efficiency, dt)
        caps_sum = float(caps.sum())
        cap_power = budget.headroom(t + 1) / w
        p_up = min(caps_sum, cap_power)
        p_low = float(np.clip(arrival_totals[t], 0.0, p_up))
        up_split = caps * (p_up / caps_sum) if caps_sum > 0 else caps
        low_scale = p_low / arrival_totals[t] if arrival_totals[t] > 0 else 0.0
        interval = FlexibilityInterval(
            slot=t, lower=low_scale * group_arrivals[:, t],
            upper=_group_split(up_split, fleet),
            agg_lower=p_low, agg_upper=p_up)
        gamma, p_d = draw_dispatch(interval, float(gammas[t]))
        realized = np.zeros(len(sessions))
        remaining = p_d
        residual = caps.copy()
        req_room = np.maximum(fleet.e_req - energies, 0.0) / (efficiency * dt)
        for want in (fresh_by_pos[:, t], req_room, residual.copy()):
            if remaining <= 1e-12:
                break
            for i in fleet.arrival_order:
                if remaining <= 1e-12:
                    break
                take = min(want[i] - realized[i], residual[i], remaining)
                if take <= 1e-12:
                    continue
                realized[i] += take
                residual[i] -= take
                remaining -= take
        allocations = {fleet.ids[i]: float(realized[i])
                       for i in np.flatnonzero(realized > 0)}
        p_real = float(realized.sum())
        energies = energies + efficiency * realized * dt
        budget.spend(w, p_real)
        times.append(time.perf_counter() - t0)
        interval.solve_seconds = times[-1]
        intervals.append(interval)
        outcomes.append(DispatchOutcome(
            slot=t, gamma=gamma, total=p_real,
            group_dispatch=_group_split(realized, fleet),
            stage1=np.zeros(n_groups), stage2=_group_split(realized, fleet),
            allocations=allocations, emission_rate=w * p_real))
    for i, s in enumerate(sessions):
        s.current_energy_kwh = float(energies[i])
    return Trajectories(method="b2", intervals=intervals, outcomes=outcomes,
                        sessions=sessions, decision_seconds=times)


# ---------------------------------------------------------------------------
# MPC: receding-horizon offline with convex-combination disaggregation


def run_mpc(sessions, carbon, clock, rate_cap, policy: DispatchPolicy,
            efficiency=0.95, epsilon=OPI_EPSILON) -> Trajectories:
    """Receding-horizon offline control: re-solve the offline program each
    slot, report its first-slot interval, and disaggregate the dispatch by
    the convex-combination rule.

    The program stays in the full-horizon variable space with already
    dispatched slots pinned through their bounds, so the constraint matrix,
    scaling, and factorization are shared by every per-slot re-solve; each
    step costs only warm-started iterations. Pinned past powers make the
    terminal-energy and emission-budget rows account for realized dispatch
    automatically.
    """
    T = clock.horizon_slots
    dt = clock.slot_duration_h
    n_groups = max(s.group_index for s in sessions) + 1
    fleet = FleetIndex(sessions, n_groups)
    energies = fleet.e_ini.copy()
    assembler = OfflineAssembler(sessions, carbon, clock, rate_cap, efficiency,
                                 epsilon)
    problem, layout = assembler.build(req_slack=REQ_SLACK_MPC)
    work = QpWorkspace(problem)
    l_cur = problem.l.copy()
    u_cur = problem.u.copy()
    budget = EmissionBudget(rate_cap=rate_cap)
    gammas = policy.ratio_trace(T)
    intervals, outcomes, times = [], [], []
    warm_x = warm_y = None
    total_budget = rate_cap * T
    n_power = layout["n_power"]
    refresh_every = 24
    for t in range(T):
        t0 = time.perf_counter()
        if t and t % refresh_every == 0:
            work.refresh_rho(l_cur, u_cur)
        sol = work.solve(l_cur, u_cur, warm_x=warm_x, warm_y=warm_y)
        if sol.status != "solved" and warm_x is not None:
            sol = work.solve(l_cur, u_cur)  # cold restart
        if sol.status != "solved":
            raise RuntimeError(
                f"MPC remaining-horizon program unsolved at slot {t} "
                f"(residuals {sol.primal_residual:.2e}/{sol.dual_residual:.2e})")
        warm_x, warm_y = sol.x, sol.duals
        w = carbon[t]
        lower_t, upper_t, ev_lower, ev_upper = _first_slot_profile(
            sol.x, layout, len(sessions), t)
        # enforce the per-slot budget exactly against solver noise
        cap_power = (total_budget - budget.consumed) / w
        up_rep = float(min(upper_t, cap_power))
        low_rep = float(min(lower_t, up_rep))
        interval = FlexibilityInterval(
            slot=t, lower=_group_split(ev_lower, fleet),
            upper=_group_split(ev_upper, fleet),
            agg_lower=low_rep, agg_upper=up_rep,
            solve_seconds=time.perf_counter() - t0)
        gamma, p_d = draw_dispatch(interval, float(gammas[t]))
        alpha, per_ev = convex_combination_disaggregate(
            p_d, lower_t, upper_t, ev_lower, ev_upper)
        per_ev = np.clip(per_ev, 0.0, fleet.p_max)
        p_real = float(per_ev.sum())
        energies = energies + efficiency * per_ev * dt
        energies = np.minimum(energies, fleet.e_max)
        budget.spend(w, p_real)
        # pin this slot's powers on both trajectories for the solves ahead
        for a_idx, (i, w0, w1, _) in enumerate(layout["active"]):
            if w0 <= t < w1:
                off = layout["offsets"][a_idx] + (t - w0)
                l_cur[off] = u_cur[off] = per_ev[i]
                l_cur[n_power + off] = u_cur[n_power + off] = per_ev[i]
        times.append(interval.solve_seconds)
        intervals.append(interval)
        outcomes.append(DispatchOutcome(
            slot=t, gamma=gamma, total=p_real,
            group_dispatch=_group_split(per_ev, fleet),
            stage1=np.zeros(n_groups), stage2=_group_split(per_ev, fleet),
            allocations={fleet.ids[i]: float(per_ev[i])
                         for i in np.flatnonzero(per_ev > 0)},
            emission_rate=w * p_real))
    for i, s in enumerate(sessions):
        s.current_energy_kwh = float(energies[i])
    return Trajectories(method="mpc", intervals=intervals, outcomes=outcomes,
                        sessions=sessions, decision_seconds=times)


def _first_slot_profile(x, layout, n_sessions, t):
    """Per-EV and aggregate slot-t powers of an offline solution vector."""
    n_power = layout["n_power"]
    ev_upper = np.zeros(n_sessions)
    ev_lower = np.zeros(n_sessions)
    for a_idx, (i, t0, t1, _) in enumerate(layout["active"]):
        if t0 <= t < t1:
            off = layout["offsets"][a_idx] + (t - t0)
            ev_upper[i] = x[off]
            ev_lower[i] = x[n_power + off]
    return float(ev_lower.sum()), float(ev_upper.sum()), ev_lower, ev_upper


__all__ = [
    "OfflineSolution", "OfflineAssembler", "solve_opi",
    "run_opi", "run_b1", "run_b2", "run_mpc", "OPI_EPSILON",
]
