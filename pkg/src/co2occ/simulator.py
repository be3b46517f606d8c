"""Two-zone CO2 mass balance for a naturally ventilated classroom.

The room is split at ``split_height`` into a lower (desk) zone and an upper
zone. Exhaled CO2 enters the upper zone, where thermal plumes deliver it; the
zones exchange air at ``interzone_base + n * interzone_per_person`` m3/s and
both exchange with outdoor air at the window/infiltration rate::

    V_l dC_l/dt = q(n) (C_u - C_l) + lam V_l (C_out - C_l)
    V_u dC_u/dt = n G + q(n) (C_l - C_u) + lam V_u (C_out - C_u)

with ``lam = (infiltration_ach + opening * wind * window_ach_open) / 3600``.
Explicit Euler at ``dt`` seconds. ``wind`` is a mean-one log-normal AR(1)
factor (gusts through open windows) and ``C_out`` gets a per-day offset; both
disturbances vanish when their spread is set to 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np

from .ingest import (
    LABEL_FILE,
    ROOM_FILE,
    SENSOR_FILE,
    Dataset,
    DeviceMeta,
    RoomMeta,
    assemble,
    format_timestamp,
)

PPM = 1e6


class SimConfigError(ValueError):
    """Invalid simulator configuration or schedule; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SimConfig:
    room: RoomMeta
    split_height: float = 1.2
    outdoor_co2: float = 420.0
    emission_per_person: float = 0.0035  # L/s CO2
    interzone_base: float = 0.05  # m3/s
    interzone_per_person: float = 0.004  # m3/s per occupant
    window_ach_open: float = 8.0  # 1/h, all windows open
    infiltration_ach: float = 0.3  # 1/h, windows closed
    near_window_distance: float = 1.0  # m
    near_window_blend: float = 0.3
    sensor_noise_sd: float = 10.0  # ppm
    noise_clip: float = 30.0  # ppm
    dt: float = 15.0  # s
    sample_interval: int = 15  # s
    spin_up: int = 1800  # s simulated before each day's recording window
    outdoor_day_sd: float = 20.0  # ppm, day-to-day outdoor variation
    wind_sd: float = 0.5  # log-scale spread of the window airflow factor
    wind_tau: float = 600.0  # s, correlation time of the airflow factor
    initial_co2: float | None = None
    seed: int = 0

    def __post_init__(self):
        room = self.room
        if not room.height > 0:
            raise SimConfigError("room.height_m", "must be > 0")
        for name in ("outdoor_co2", "emission_per_person", "interzone_base",
                     "interzone_per_person", "window_ach_open", "dt", "sample_interval",
                     "wind_tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise SimConfigError(name, f"must be a positive number, got {v!r}")
        for name in ("infiltration_ach", "sensor_noise_sd", "noise_clip", "spin_up",
                     "outdoor_day_sd", "wind_sd"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise SimConfigError(name, f"must be >= 0, got {v!r}")
        if not 0 < self.split_height < room.height:
            raise SimConfigError("split_height", "zones must partition the room height")
        if self.dt > 15:
            raise SimConfigError("dt", "must be <= 15 s")
        ratio = self.sample_interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise SimConfigError("sample_interval", "must be a multiple of dt")
        if not 0 <= self.near_window_blend <= 1:
            raise SimConfigError("near_window_blend", "must lie in [0, 1]")
        if not room.devices:
            raise SimConfigError("room.devices", "at least one device required")

    @property
    def floor_area(self) -> float:
        return self.room.length * self.room.width

    @property
    def lower_volume(self) -> float:
        return self.floor_area * self.split_height

    @property
    def upper_volume(self) -> float:
        return self.floor_area * (self.room.height - self.split_height)

    def zone_of(self, device: DeviceMeta) -> int:
        """0 for the lower zone, 1 for the upper zone."""
        return 0 if device.height < self.split_height else 1

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "room"}
        out["room"] = self.room.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "room" not in d:
            raise SimConfigError("room", "missing")
        try:
            room = RoomMeta.from_dict(d.pop("room"))
        except ValueError as exc:
            raise SimConfigError("room", str(exc)) from None
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SimConfigError(sorted(unknown)[0], "unknown field")
        return cls(room=room, **d)


def exchange_rate(config: SimConfig, opening: float, wind: float = 1.0) -> float:
    """Outdoor air change rate in 1/s."""
    return (config.infiltration_ach + opening * wind * config.window_ach_open) / 3600.0


def step(state, config: SimConfig, occupants: float, opening: float, dt: float | None = None,
         wind: float = 1.0, outdoor: float | None = None):
    """One explicit-Euler step of the two-zone balance; ``state`` is (C_lower, C_upper)."""
    if dt is None:
        dt = config.dt
    c_l, c_u = state
    v_l, v_u = config.lower_volume, config.upper_volume
    q = config.interzone_base + occupants * config.interzone_per_person
    lam = exchange_rate(config, opening, wind)
    source = occupants * config.emission_per_person * 1e-3 * PPM  # ppm m3/s
    c_out = config.outdoor_co2 if outdoor is None else outdoor
    flow = q * (c_u - c_l)
    d_l = (flow + lam * v_l * (c_out - c_l)) / v_l
    d_u = (source - flow + lam * v_u * (c_out - c_u)) / v_u
    return c_l + dt * d_l, c_u + dt * d_u


def integrate(state, config: SimConfig, occupants, opening, duration: float, dt: float):
    """Advance ``duration`` seconds at constant inputs with step ``dt``."""
    steps = int(round(duration / dt))
    for _ in range(steps):
        state = step(state, config, occupants, opening, dt)
    return state


def true_readings(state, config: SimConfig, opening: float,
                  outdoor: float | None = None) -> np.ndarray:
    """Noise-free per-device values: zone value, blended toward outdoor near open windows."""
    c_out = config.outdoor_co2 if outdoor is None else outdoor
    out = np.empty(len(config.room.devices))
    for k, dev in enumerate(config.room.devices):
        v = state[config.zone_of(dev)]
        if opening > 0 and dev.distance_to_window <= config.near_window_distance:
            v = v + config.near_window_blend * (c_out - v)
        out[k] = v
    return out


def sample_sensors(state, config: SimConfig, rng: np.random.Generator, opening: float = 0.0,
                   size: int | None = None, outdoor: float | None = None) -> np.ndarray:
    """Noisy readings per device (shape ``(n_devices,)`` or ``(size, n_devices)``)."""
    base = true_readings(state, config, opening, outdoor)
    shape = base.shape if size is None else (size,) + base.shape
    noise = rng.normal(0.0, config.sensor_noise_sd, shape) if config.sensor_noise_sd > 0 else 0.0
    noise = np.clip(noise, -config.noise_clip, config.noise_clip)
    return np.broadcast_to(base + noise, shape).copy()


@dataclass
class Schedule:
    """Piecewise-constant occupancy and window opening plus the recorded days.

    ``occupancy`` and ``opening`` are ``(epoch seconds, value)`` change points;
    each value holds until the next change. ``days`` are recorded dates; each is
    recorded over ``[day_start, day_end)`` seconds after midnight UTC.
    """

    days: list
    occupancy: list
    opening: list = field(default_factory=list)
    day_start: int = 7 * 3600 + 1800
    day_end: int = 15 * 3600 + 1800

    def __post_init__(self):
        self.days = [d if isinstance(d, date) else date.fromisoformat(d) for d in self.days]
        self.occupancy = sorted((int(t), int(n)) for t, n in self.occupancy)
        self.opening = sorted((int(t), float(o)) for t, o in self.opening)
        if not self.days:
            raise SimConfigError("schedule.days", "at least one day required")
        if not 0 <= self.day_start < self.day_end <= 86400:
            raise SimConfigError("schedule.day_start", "recording window must lie within a day")
        for t, n in self.occupancy:
            if n < 0:
                raise SimConfigError("schedule.occupancy", f"negative count at {format_timestamp(t)}")
        for t, o in self.opening:
            if not 0 <= o <= 1:
                raise SimConfigError("schedule.opening", f"fraction {o} outside [0, 1]")
        prev = 0.0
        for t, o in self.opening:
            if o != prev and self.occupants_at(t) == 0 and self.occupants_at(t - 1) == 0:
                raise SimConfigError(
                    "schedule.opening",
                    f"window change at {format_timestamp(t)} while unoccupied",
                )
            prev = o

    @staticmethod
    def _value_at(points, t, default):
        v = default
        for tp, val in points:
            if tp <= t:
                v = val
            else:
                break
        return v

    def occupants_at(self, t: int) -> int:
        return self._value_at(self.occupancy, t, 0)

    def opening_at(self, t: int) -> float:
        return self._value_at(self.opening, t, 0.0)

    @property
    def seasons(self) -> list:
        return ["summer" if 4 <= d.month <= 9 else "winter" for d in self.days]

    def to_dict(self) -> dict:
        return {
            "days": [d.isoformat() for d in self.days],
            "day_start": self.day_start,
            "day_end": self.day_end,
            "occupancy": [[format_timestamp(t), n] for t, n in self.occupancy],
            "opening": [[format_timestamp(t), o] for t, o in self.opening],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        from .ingest import parse_timestamp

        def pts(key):
            return [(parse_timestamp(t) if isinstance(t, str) else int(t), v)
                    for t, v in d.get(key, [])]

        try:
            return cls(
                days=list(d["days"]),
                occupancy=pts("occupancy"),
                opening=pts("opening"),
                day_start=int(d.get("day_start", 7 * 3600 + 1800)),
                day_end=int(d.get("day_end", 15 * 3600 + 1800)),
            )
        except KeyError as exc:
            raise SimConfigError(f"schedule.{exc.args[0]}", "missing") from None
        except ValueError as exc:
            if isinstance(exc, SimConfigError):
                raise
            raise SimConfigError("schedule", str(exc)) from None


def _midnight(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


@dataclass
class SimResult:
    """Raw 15 s samples plus the label change points, ready for file export."""

    config: SimConfig
    schedule: Schedule
    times: np.ndarray  # epoch seconds per sample
    readings: np.ndarray  # (n_samples, n_devices, 2) sensor pair values
    truth: np.ndarray  # (n_samples, 2) zone concentrations
    occupants: np.ndarray
    opening: np.ndarray
    outdoor: np.ndarray  # outdoor concentration per sample


def simulate(config: SimConfig, schedule: Schedule) -> SimResult:
    """Run the balance for every recorded day and sample both sensors of each device.

    Sensor noise and the environmental disturbances use independent streams
    derived from ``config.seed``.
    """
    rng = np.random.default_rng([config.seed, 0])
    env = np.random.default_rng([config.seed, 1])
    per_sample = int(round(config.sample_interval / config.dt))
    rho = math.exp(-config.dt / config.wind_tau)
    innov = math.sqrt(1.0 - rho * rho)
    sd = config.wind_sd
    times, truth, occ, opn, outdoor = [], [], [], [], []
    for day in schedule.days:
        t0 = _midnight(day)
        start = t0 + schedule.day_start
        c_out = config.outdoor_co2 + config.outdoor_day_sd * env.standard_normal()
        c0 = c_out if config.initial_co2 is None else config.initial_co2
        state = (c0, c0)
        z = env.standard_normal()

        def advance(state, z, n, o):
            z = rho * z + innov * env.standard_normal()
            wind = math.exp(sd * z - 0.5 * sd * sd)
            return step(state, config, n, o, wind=wind, outdoor=c_out), z

        t = start - config.spin_up
        while t < start:
            state, z = advance(state, z, schedule.occupants_at(t), schedule.opening_at(t))
            t += config.dt
        t = start
        while t < t0 + schedule.day_end:
            n, o = schedule.occupants_at(int(t)), schedule.opening_at(int(t))
            times.append(int(t))
            truth.append(state)
            occ.append(n)
            opn.append(o)
            outdoor.append(c_out)
            for _ in range(per_sample):
                state, z = advance(state, z, n, o)
            t += config.sample_interval
    truth = np.asarray(truth, dtype=float)
    opn = np.asarray(opn, dtype=float)
    readings = np.empty((truth.shape[0], len(config.room.devices), 2))
    for k in range(truth.shape[0]):
        readings[k] = sample_sensors(truth[k], config, rng, opn[k], size=2,
                                     outdoor=outdoor[k]).T
    return SimResult(
        config=config,
        schedule=schedule,
        times=np.asarray(times, dtype=np.int64),
        readings=readings,
        truth=truth,
        occupants=np.asarray(occ, dtype=np.int64),
        opening=opn,
        outdoor=np.asarray(outdoor, dtype=float),
    )


def _label_points(result: SimResult):
    """Label rows at each day start and at every occupancy/opening change."""
    t, n, o = result.times, result.occupants, result.opening
    keep = np.ones(t.shape[0], dtype=bool)
    keep[1:] = (n[1:] != n[:-1]) | (o[1:] != o[:-1]) | (np.diff(t) != result.config.sample_interval)
    return t[keep], n[keep], o[keep]


def to_dataset(result: SimResult, interval: int = 300) -> Dataset:
    """In-memory equivalent of writing the files and loading them back."""
    sensors = {}
    for k, dev in enumerate(result.config.room.devices):
        sensors[dev.device_id] = (
            result.times, _round(result.readings[:, k, 0]), _round(result.readings[:, k, 1])
        )
    lt, ln, lo = _label_points(result)
    return assemble(sensors, lt, ln, lo, result.config.room,
                    result.config.sample_interval, interval)


def _round(a):
    # files carry 2 decimals; keep in-memory and on-disk paths identical
    return np.round(a, 2)


def write_files(result: SimResult, out_dir) -> list:
    """Write sensors.csv, labels.csv and room.json; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / SENSOR_FILE, out / LABEL_FILE, out / ROOM_FILE]
    devices = result.config.room.devices
    stamps = [format_timestamp(t) for t in result.times]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "device_id", "co2_a", "co2_b"])
        vals = _round(result.readings)
        for i, ts in enumerate(stamps):
            for k, dev in enumerate(devices):
                w.writerow([ts, dev.device_id, f"{vals[i, k, 0]:.2f}", f"{vals[i, k, 1]:.2f}"])
    lt, ln, lo = _label_points(result)
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "occupants", "ventilation"])
        for t, n, o in zip(lt, ln, lo):
            w.writerow([format_timestamp(t), int(n), f"{o:g}"])
    with open(paths[2], "w") as fh:
        json.dump(result.config.room.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def generate(config: SimConfig, schedule: Schedule, interval: int = 300) -> Dataset:
    return to_dataset(simulate(config, schedule), interval)


# ---------------------------------------------------------------------------
# Default synthetic rooms and school-day schedules

# (length, width, height) in m, window area in m2
ROOM_SHAPES = {
    "room1": (7.64, 7.55, 3.12, 7.956),
    "room2": (9.15, 6.70, 3.30, 8.400),
    "room3": (8.15, 7.05, 2.82, 9.972),
}

ROOM_DEVICES = {
    "room1": [("43", 2.0, 3.5), ("37", 0.6, 3.8), ("12", 0.6, 0.5), ("28", 0.6, 6.8)],
    "room2": [("19", 2.1, 2.5), ("47", 0.6, 2.7), ("09", 0.6, 0.4), ("08", 0.6, 6.0),
              ("22", 1.5, 5.5)],
    "room3": [("24", 2.0, 0.8), ("03", 0.6, 1.0), ("15", 2.0, 6.5), ("31", 0.6, 4.0)],
}

ROOM_CLASS_SIZES = {"room1": (8, 12, 16), "room2": (18, 24, 28), "room3": (14, 21, 25)}
ROOM_OCCUPANCY_PROB = {"room1": 0.40, "room2": 0.50, "room3": 0.45}

# lesson slots, minutes after midnight
LESSONS = [(480, 525), (530, 575), (595, 640), (645, 690), (705, 750), (755, 800),
           (810, 855), (860, 905)]

WINTER_DAYS = ["2021-12-13", "2021-12-14", "2021-12-15", "2021-12-16", "2021-12-17"]
SUMMER_DAYS = ["2022-06-13", "2022-06-14", "2022-06-15", "2022-06-16", "2022-06-17"]


def default_room(room_id: str) -> RoomMeta:
    length, width, height, window = ROOM_SHAPES[room_id]
    devices = tuple(
        DeviceMeta(device_id=i, height=h, distance_to_window=d) for i, h, d in ROOM_DEVICES[room_id]
    )
    return RoomMeta(room_id=room_id, length=length, width=width, height=height,
                    devices=devices, window_area=window)


def default_config(room_id: str = "room1", seed: int = 0, **overrides) -> SimConfig:
    return replace(SimConfig(room=default_room(room_id), seed=seed), **overrides)


def school_schedule(days, seed: int = 0, class_sizes=(12, 20, 25), p_lesson: float = 0.45,
                    day_start: int = 7 * 3600 + 1800, day_end: int = 15 * 3600 + 1800) -> Schedule:
    """Random lesson occupancy with season-dependent window behaviour.

    Back-to-back occupied lessons merge into one block. Windows change only at
    moments when the room is occupied. Summer blocks mostly run with windows
    open; winter blocks get a short airing or a tilted window. Leaving
    occupants often air the room for the break, so windows stay open while it
    is empty; the next class sets its own window state on arrival.
    """
    rng = np.random.default_rng(seed)
    occupancy, opening = [], []
    window = 0.0

    def set_window(t, level):
        nonlocal window
        if level != window:
            opening.append((t, level))
            window = level

    for d in (x if isinstance(x, date) else date.fromisoformat(x) for x in days):
        t0 = _midnight(d)
        summer = 4 <= d.month <= 9
        used = [s for s in LESSONS if rng.random() < p_lesson]
        blocks = []
        for s in used:
            if blocks and s[0] - blocks[-1][1] <= 5:
                blocks[-1] = (blocks[-1][0], s[1])
            else:
                blocks.append(s)
        for start_min, end_min in blocks:
            start, end = t0 + 60 * start_min, t0 + 60 * end_min
            n = int(rng.choice(class_sizes))
            occupancy.append((start, n))
            occupancy.append((end, 0))
            u = rng.random()
            if summer:
                if u < 0.85:
                    set_window(start + 60 * int(rng.integers(1, 8)),
                               1.0 if rng.random() < 0.6 else 0.5)
                else:
                    set_window(start, 0.0)
            else:
                set_window(start, 0.0)
                if u < 0.55:
                    mid = start + 60 * int(rng.integers(10, max(11, end_min - start_min - 15)))
                    set_window(mid, 1.0)
                    set_window(mid + 60 * int(rng.integers(5, 15)),
                               0.0 if rng.random() < 0.5 else 0.25)
                elif u < 0.8:
                    set_window(start + 60 * int(rng.integers(2, 10)), 0.25)
            # break airing: opened by the leaving class, left open while empty
            if rng.random() < (0.5 if summer else 0.4):
                set_window(end - 60, 1.0)
            else:
                set_window(end, 0.0)
    return Schedule(days=list(days), occupancy=occupancy, opening=opening,
                    day_start=day_start, day_end=day_end)


def default_rooms(seed: int = 42, days=None, **overrides):
    """(SimConfig, Schedule) for the three synthetic rooms."""
    if days is None:
        days = WINTER_DAYS + SUMMER_DAYS
    out = []
    for k, room_id in enumerate(sorted(ROOM_SHAPES)):
        cfg = default_config(room_id, seed=seed * 1000 + k, **overrides)
        sched = school_schedule(days, seed=seed * 1000 + 100 + k,
                                class_sizes=ROOM_CLASS_SIZES[room_id],
                                p_lesson=ROOM_OCCUPANCY_PROB[room_id])
        out.append((cfg, sched))
    return out


def default_datasets(seed: int = 42, interval: int = 300, **overrides) -> list:
    return [generate(cfg, sched, interval) for cfg, sched in default_rooms(seed, **overrides)]
