"""Stochastic EV fleet generation, charging-task packetization, duration
groups, and grid carbon-intensity traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

MAX_RESAMPLE_TRIES = 100
SOC_CLAMP_MARGIN = 0.05


@dataclass(frozen=True)
class SimClock:
    """Discrete simulation horizon: T slots of equal duration (hours)."""

    horizon_slots: int
    slot_duration_h: float

    def __post_init__(self):
        if self.horizon_slots < 1:
            raise ValueError("horizon_slots must be >= 1")
        if self.slot_duration_h <= 0:
            raise ValueError("slot_duration_h must be positive")

    @property
    def horizon_hours(self) -> float:
        return self.horizon_slots * self.slot_duration_h

    def hour_to_slot(self, hour: float) -> int:
        return int(round(hour / self.slot_duration_h))


@dataclass
class EvSession:
    """One vehicle's charging contract and evolving battery state.

    Power in kW, energy in kWh, times as slot indices. The vehicle is
    in-station for slots arrival_slot <= t < departure_slot.
    """

    id: str
    arrival_slot: int
    departure_slot: int
    initial_energy_kwh: float
    required_energy_kwh: float
    min_energy_kwh: float
    max_energy_kwh: float
    max_power_kw: float
    capacity_kwh: float
    group_index: int = -1
    current_energy_kwh: float = field(default=None)

    def __post_init__(self):
        if self.current_energy_kwh is None:
            self.current_energy_kwh = self.initial_energy_kwh
        self.validate()

    def validate(self):
        if not self.arrival_slot < self.departure_slot:
            raise ValueError(f"{self.id}: arrival_slot must precede departure_slot")
        ordered = (self.min_energy_kwh <= self.initial_energy_kwh
                   <= self.required_energy_kwh <= self.max_energy_kwh
                   <= self.capacity_kwh + 1e-9)
        if not ordered:
            raise ValueError(f"{self.id}: energy bounds must be ordered "
                             "min <= initial <= required <= max <= capacity")
        if self.max_power_kw <= 0:
            raise ValueError(f"{self.id}: max_power_kw must be positive")

    @property
    def duration_slots(self) -> int:
        return self.departure_slot - self.arrival_slot

    @property
    def task_energy_kwh(self) -> float:
        return self.required_energy_kwh - self.initial_energy_kwh

    def in_station(self, slot: int) -> bool:
        return self.arrival_slot <= slot < self.departure_slot


@dataclass
class GroupSpec:
    """Charging-duration group: sessions are binned by nearest-hour stay."""

    index: int
    duration_slots: int
    member_ids: list = field(default_factory=list)


def make_groups(min_hours: int, max_hours: int, clock: SimClock) -> list[GroupSpec]:
    """One group per whole hour of charging duration in [min_hours, max_hours]."""
    if min_hours < 1 or max_hours < min_hours:
        raise ValueError("invalid group hour range")
    slots_per_hour = 1.0 / clock.slot_duration_h
    if abs(slots_per_hour - round(slots_per_hour)) > 1e-9:
        raise ValueError("slot duration must divide one hour for hourly groups")
    return [
        GroupSpec(index=k, duration_slots=int(round(h * slots_per_hour)))
        for k, h in enumerate(range(min_hours, max_hours + 1))
    ]


def default_groups(clock: SimClock) -> list[GroupSpec]:
    """Nine hourly groups covering 4 h to 12 h stays."""
    return make_groups(4, 12, clock)


@dataclass
class FleetDistribution:
    """Sampling parameters for a stochastic fleet (normal draws, hour units)."""

    arrival_mean_h: float = 9.0
    arrival_std_h: float = 1.2
    departure_mean_h: float = 18.0
    departure_std_h: float = 1.2
    initial_soc_mean: float = 0.4
    initial_soc_std: float = 0.1
    required_soc: float = 0.7
    max_soc: float = 0.9
    charging_efficiency: float = 0.95
    battery_menu: tuple = ((60.0, 10.0), (40.0, 6.6), (24.0, 3.3))
    fleet_size: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.required_soc <= self.max_soc <= 1:
            raise ValueError("need 0 < required_soc <= max_soc <= 1")
        if not 0 < self.charging_efficiency <= 1:
            raise ValueError("charging_efficiency must be in (0, 1]")
        if not self.battery_menu:
            raise ValueError("battery_menu must not be empty")


def round_hours_half_down(hours: float) -> int:
    """Nearest-hour rounding with exact halves rounding down."""
    return int(math.ceil(hours - 0.5))


def assign_group(session: EvSession, groups: list[GroupSpec], clock: SimClock) -> int:
    """Group index whose duration is the nearest-hour rounding of the stay."""
    duration_h = session.duration_slots * clock.slot_duration_h
    target_h = round_hours_half_down(duration_h)
    slots_per_hour = 1.0 / clock.slot_duration_h
    for g in groups:
        if abs(g.duration_slots - target_h * slots_per_hour) < 1e-9:
            return g.index
    raise ValueError(
        f"session duration {duration_h:.3f} h rounds to {target_h} h, "
        "outside the configured group span")


def packetize(session: EvSession, clock: SimClock, efficiency: float) -> np.ndarray:
    """Per-slot charging-task powers a_{i,t} for the whole horizon.

    Front-loads the energy demand at max_power_kw; the last nonzero slot
    carries the fractional remainder so the packet energies sum exactly to
    the requested energy (times efficiency and slot length).
    """
    e_task = session.task_energy_kwh
    if e_task < -1e-12:
        raise ValueError(f"{session.id}: required energy below initial energy")
    arrivals = np.zeros(clock.horizon_slots)
    if e_task <= 0:
        return arrivals
    dt = clock.slot_duration_h
    eta = e_task / (efficiency * session.max_power_kw * dt)
    n_full = int(math.floor(eta + 1e-9))
    n_need = int(math.ceil(eta - 1e-9))
    if session.arrival_slot + n_need > session.departure_slot:
        raise ValueError(
            f"{session.id}: demand not completable at max power within the stay")
    t0 = session.arrival_slot
    arrivals[t0:t0 + n_full] = session.max_power_kw
    if n_full < n_need:
        arrivals[t0 + n_full] = e_task / (efficiency * dt) - n_full * session.max_power_kw
    return arrivals


class TaskArrivalStream:
    """Packetized charging tasks for a fleet: per-EV, per-group, and total."""

    def __init__(self, clock: SimClock, n_groups: int):
        self.clock = clock
        self.by_ev: dict[str, np.ndarray] = {}
        self.group_arrivals = np.zeros((n_groups, clock.horizon_slots))
        self.totals = np.zeros(clock.horizon_slots)
        # per-slot task tuples (ev_id, group_index, power) in fleet order
        self.slot_tasks: list[list[tuple[str, int, float]]] = [
            [] for _ in range(clock.horizon_slots)
        ]

    @classmethod
    def build(cls, sessions: list[EvSession], clock: SimClock, n_groups: int,
              efficiency: float) -> "TaskArrivalStream":
        stream = cls(clock, n_groups)
        for s in sessions:
            a = packetize(s, clock, efficiency)
            stream.by_ev[s.id] = a
            stream.group_arrivals[s.group_index] += a
            stream.totals += a
            for t in np.flatnonzero(a):
                stream.slot_tasks[t].append((s.id, s.group_index, float(a[t])))
        return stream


def sample_fleet(dist: FleetDistribution, clock: SimClock,
                 groups: list[GroupSpec]) -> list[EvSession]:
    """Draw a feasible fleet from the configured normal distributions.

    Arrival/departure pairs are resampled (up to MAX_RESAMPLE_TRIES) until
    they fit the horizon, the stay rounds into the group span, and the
    energy demand is completable at max power. Deterministic per rng_seed.
    """
    if dist.fleet_size <= 0:
        raise ValueError("fleet_size must be positive")
    rng = np.random.default_rng(dist.rng_seed)
    sessions = []
    for i in range(dist.fleet_size):
        session = None
        for _ in range(MAX_RESAMPLE_TRIES):
            arr_h = rng.normal(dist.arrival_mean_h, dist.arrival_std_h)
            dep_h = rng.normal(dist.departure_mean_h, dist.departure_std_h)
            soc0 = rng.normal(dist.initial_soc_mean, dist.initial_soc_std)
            cap, p_max = dist.battery_menu[rng.integers(len(dist.battery_menu))]
            t_a = clock.hour_to_slot(arr_h)
            t_d = clock.hour_to_slot(dep_h)
            if not 0 <= t_a < t_d <= clock.horizon_slots:
                continue
            soc0 = float(np.clip(soc0, SOC_CLAMP_MARGIN,
                                 dist.required_soc - SOC_CLAMP_MARGIN))
            candidate = EvSession(
                id=f"ev{i:05d}",
                arrival_slot=t_a,
                departure_slot=t_d,
                initial_energy_kwh=soc0 * cap,
                required_energy_kwh=dist.required_soc * cap,
                min_energy_kwh=0.0,
                max_energy_kwh=dist.max_soc * cap,
                max_power_kw=p_max,
                capacity_kwh=cap,
            )
            try:
                candidate.group_index = assign_group(candidate, groups, clock)
                packetize(candidate, clock, dist.charging_efficiency)
            except ValueError:
                continue
            session = candidate
            break
        if session is None:
            raise RuntimeError(
                f"could not sample a feasible session for EV {i} in "
                f"{MAX_RESAMPLE_TRIES} tries; distribution incompatible with groups")
        sessions.append(session)
    for g in groups:
        g.member_ids = [s.id for s in sessions if s.group_index == g.index]
    return sessions


# ---------------------------------------------------------------------------
# carbon intensity


@dataclass
class CarbonTrace:
    """Per-slot grid carbon intensity, kg CO2 per kWh."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if np.any(self.values <= 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("carbon intensity must be positive and finite")

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, t):
        return float(self.values[t])


def synthetic_carbon_trace(clock: SimClock, base: float = 0.42, amp: float = 0.12,
                           phase_h: float = 6.0) -> CarbonTrace:
    """Diurnal sinusoid w(t) = base + amp*sin(2*pi*(t*dt - phase)/24)."""
    hours = np.arange(clock.horizon_slots) * clock.slot_duration_h
    return CarbonTrace(base + amp * np.sin(2 * np.pi * (hours - phase_h) / 24.0))


def hourly_carbon_trace(clock: SimClock, hourly_values) -> CarbonTrace:
    """Step-interpolate a per-hour intensity profile onto the slot grid,
    repeating the profile when the horizon is longer than it."""
    vals = np.asarray(hourly_values, dtype=float)
    if vals.ndim != 1 or vals.size == 0:
        raise ValueError("hourly profile must be a non-empty vector")
    hours = (np.arange(clock.horizon_slots) * clock.slot_duration_h).astype(int)
    return CarbonTrace(vals[hours % vals.size])


# duck-curve style default: high morning ramp, deep midday trough,
# evening peak (kg CO2 per kWh)
DEFAULT_HOURLY_PROFILE = (
    0.28, 0.26, 0.25, 0.24, 0.24, 0.25,
    0.30, 0.36, 0.42, 0.45, 0.40, 0.30,
    0.18, 0.12, 0.10, 0.10, 0.12, 0.18,
    0.28, 0.38, 0.42, 0.38, 0.34, 0.30,
)


def load_carbon_csv(path, clock: SimClock, extend: str | None = None) -> CarbonTrace:
    """Read an `hour,intensity_kg_per_kwh` CSV and step-interpolate to slots.

    Each row's intensity is held constant from its hour mark until the next
    row. A trace shorter than the horizon is an error unless extend="repeat".
    """
    hours, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                [c.strip() for c in reader.fieldnames] != ["hour", "intensity_kg_per_kwh"]:
            raise ValueError(f"{path}: expected header 'hour,intensity_kg_per_kwh'")
        for row in reader:
            try:
                h = float(row["hour"])
                v = float(row["intensity_kg_per_kwh"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed row {row}") from exc
            if v <= 0:
                raise ValueError(f"{path}: non-positive intensity {v} at hour {h}")
            hours.append(h)
            vals.append(v)
    if not hours:
        raise ValueError(f"{path}: empty carbon trace")
    hours_arr = np.asarray(hours)
    vals_arr = np.asarray(vals)
    if np.any(np.diff(hours_arr) <= 0):
        raise ValueError(f"{path}: hour column must be strictly increasing")
    step = hours_arr[1] - hours_arr[0] if len(hours_arr) > 1 else clock.horizon_hours
    covered = hours_arr[-1] + step
    if covered + 1e-9 < clock.horizon_hours:
        if extend == "repeat":
            period = covered - hours_arr[0]
            reps = int(math.ceil((clock.horizon_hours - hours_arr[0]) / period))
            hours_arr = np.concatenate([hours_arr + r * period for r in range(reps)])
            vals_arr = np.tile(vals_arr, reps)
        else:
            raise ValueError(
                f"{path}: trace covers {covered:g} h < horizon "
                f"{clock.horizon_hours:g} h and no extension rule is enabled")
    slot_hours = np.arange(clock.horizon_slots) * clock.slot_duration_h
    idx = np.searchsorted(hours_arr, slot_hours + 1e-12, side="right") - 1
    idx = np.clip(idx, 0, len(vals_arr) - 1)
    return CarbonTrace(vals_arr[idx])


def load_carbon_trace(source, clock: SimClock) -> CarbonTrace:
    """Build a trace from a CSV path or a synthetic-profile mapping."""
    if isinstance(source, CarbonTrace):
        return source
    if isinstance(source, dict):
        kind = source.get("type", "synthetic")
        if kind == "synthetic":
            return synthetic_carbon_trace(
                clock,
                base=source.get("base_kg_per_kwh", 0.42),
                amp=source.get("amplitude_kg_per_kwh", 0.12),
                phase_h=source.get("phase_h", 6.0),
            )
        if kind == "hourly":
            return hourly_carbon_trace(clock, source["values_kg_per_kwh"])
        if kind == "csv":
            return load_carbon_csv(source["path"], clock, source.get("extend"))
        raise ValueError(f"unknown carbon source type {kind!r}")
    return load_carbon_csv(source, clock)


def write_carbon_csv(path, trace: CarbonTrace, clock: SimClock):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "intensity_kg_per_kwh"])
        for t, v in enumerate(trace.values):
            writer.writerow([f"{t * clock.slot_duration_h:.10g}", f"{v:.10g}"])


# ---------------------------------------------------------------------------
# fleet CSV round trip

FLEET_COLUMNS = ["id", "arrival_slot", "departure_slot", "e_ini", "e_req",
                 "e_min", "e_max", "p_max", "capacity", "group"]


def write_fleet_csv(path, sessions: list[EvSession]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FLEET_COLUMNS)
        for s in sessions:
            writer.writerow([
                s.id, s.arrival_slot, s.departure_slot,
                f"{s.initial_energy_kwh:.10g}", f"{s.required_energy_kwh:.10g}",
                f"{s.min_energy_kwh:.10g}", f"{s.max_energy_kwh:.10g}",
                f"{s.max_power_kw:.10g}", f"{s.capacity_kwh:.10g}", s.group_index,
            ])


def read_fleet_csv(path) -> list[EvSession]:
    sessions = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FLEET_COLUMNS:
            raise ValueError(f"{path}: expected columns {FLEET_COLUMNS}")
        for row in reader:
            sessions.append(EvSession(
                id=row["id"],
                arrival_slot=int(row["arrival_slot"]),
                departure_slot=int(row["departure_slot"]),
                initial_energy_kwh=float(row["e_ini"]),
                required_energy_kwh=float(row["e_req"]),
                min_energy_kwh=float(row["e_min"]),
                max_energy_kwh=float(row["e_max"]),
                max_power_kw=float(row["p_max"]),
                capacity_kwh=float(row["capacity"]),
                group_index=int(row["group"]),
            ))
    return sessions
