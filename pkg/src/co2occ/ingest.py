"""Sensor/label/room-metadata loading and preprocessing onto a uniform grid."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

MAX_PPM = 50_000.0
NATIVE_INTERVAL = 15
DEFAULT_INTERVAL = 300
SENSOR_FILE = "sensors.csv"
LABEL_FILE = "labels.csv"
ROOM_FILE = "room.json"
SUMMER_MONTHS = range(4, 10)


class IngestError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class DeviceMeta:
    device_id: str
    height: float
    distance_to_window: float
    position_label: str = ""
    x: float | None = None
    y: float | None = None

    def __post_init__(self):
        if not self.height > 0:
            raise IngestError(f"device {self.device_id}: height must be > 0")
        if not self.distance_to_window >= 0:
            raise IngestError(f"device {self.device_id}: distance_to_window must be >= 0")

    @property
    def has_xy(self) -> bool:
        return self.x is not None and self.y is not None


@dataclass(frozen=True)
class RoomMeta:
    room_id: str
    length: float
    width: float
    height: float
    devices: tuple
    window_area: float | None = None

    def __post_init__(self):
        for name in ("length", "width", "height"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise IngestError(f"room {self.room_id}: {name} must be > 0, got {v}")
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise IngestError(f"room {self.room_id}: duplicate device ids")

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def device(self, device_id: str) -> DeviceMeta:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def to_dict(self) -> dict:
        out = {
            "room_id": self.room_id,
            "length_m": self.length,
            "width_m": self.width,
            "height_m": self.height,
            "devices": [],
        }
        if self.window_area is not None:
            out["window_area_m2"] = self.window_area
        for d in self.devices:
            dev = {
                "device_id": d.device_id,
                "height_m": d.height,
                "distance_to_window_m": d.distance_to_window,
            }
            if d.position_label:
                dev["position_label"] = d.position_label
            if d.has_xy:
                dev["x_m"] = d.x
                dev["y_m"] = d.y
            out["devices"].append(dev)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RoomMeta":
        try:
            devices = tuple(
                DeviceMeta(
                    device_id=str(dev["device_id"]),
                    height=float(dev["height_m"]),
                    distance_to_window=float(dev["distance_to_window_m"]),
                    position_label=str(dev.get("position_label", "")),
                    x=_opt_float(dev.get("x_m")),
                    y=_opt_float(dev.get("y_m")),
                )
                for dev in d["devices"]
            )
            return cls(
                room_id=str(d.get("room_id", "room")),
                length=float(d["length_m"]),
                width=float(d["width_m"]),
                height=float(d["height_m"]),
                devices=devices,
                window_area=_opt_float(d.get("window_area_m2")),
            )
        except KeyError as exc:
            raise IngestError(f"room metadata: missing field {exc.args[0]!r}") from None


def _opt_float(v):
    return None if v is None else float(v)


@dataclass
class Dataset:
    """Device series, labels and optional ventilation rating on one time grid.

    ``grid`` holds epoch seconds of each bin start; consecutive bins are
    ``interval`` apart except across producer-excluded gaps (nights, weekends).
    """

    grid: np.ndarray
    interval: int
    series: dict
    labels: np.ndarray
    room: RoomMeta
    ventilation: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.grid.shape[0]
        if np.any(np.diff(self.grid) <= 0):
            raise IngestError("grid timestamps must be strictly increasing")
        for dev_id, s in self.series.items():
            s = np.asarray(s, dtype=float)
            if s.shape != (n,):
                raise IngestError(f"device {dev_id}: series length {s.shape} != grid {n}")
            if np.any(np.isnan(s)):
                raise IngestError(f"device {dev_id}: missing values after fill")
            self.series[dev_id] = s
        if self.labels.shape != (n,):
            raise IngestError("labels length must equal grid length")
        if np.any(self.labels < 0):
            raise IngestError("occupant counts must be non-negative")
        if self.ventilation is not None:
            self.ventilation = np.asarray(self.ventilation, dtype=float)
            if self.ventilation.shape != (n,):
                raise IngestError("ventilation length must equal grid length")
            if np.any((self.ventilation < 0) | (self.ventilation > 1)):
                raise IngestError("ventilation rating must lie in [0, 1]")

    def __len__(self):
        return self.grid.shape[0]

    @property
    def seasons(self) -> np.ndarray:
        """'summer' for April-September, else 'winter', per grid point."""
        months = self.grid.astype("datetime64[s]").astype("datetime64[M]").astype(int) % 12 + 1
        return np.where(np.isin(months, list(SUMMER_MONTHS)), "summer", "winter")


@dataclass
class NormStats:
    names: list
    min: np.ndarray
    max: np.ndarray
    source: str = "train"

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=float)
        self.max = np.asarray(self.max, dtype=float)
        if np.any(self.max < self.min):
            raise IngestError("NormStats: max < min")

    @classmethod
    def fit(cls, matrix, names=None, source="train") -> "NormStats":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if names is None:
            names = [f"f{k}" for k in range(m.shape[1])]
        return cls(list(names), m.min(axis=0), m.max(axis=0), source)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(list(d["names"]), d["min"], d["max"], d.get("source", "train"))


# ---------------------------------------------------------------------------
# Elementary operations


def pair_average(a, b):
    """Mean of the present readings of a two-sensor device; NaN marks missing."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.where(np.isnan(b), a, np.where(np.isnan(a), b, (a + b) / 2.0))
    return out.item() if out.ndim == 0 else out


def fill_missing(series, name: str = "series") -> np.ndarray:
    """Nearest-neighbour gap fill; equidistant gaps take the earlier value."""
    s = np.asarray(series, dtype=float)
    valid = ~np.isnan(s)
    if not valid.any():
        raise IngestError(f"device {name}: no valid readings to fill from")
    if valid.all():
        return s.copy()
    n = s.shape[0]
    idx = np.arange(n)
    prev = np.where(valid, idx, -1)
    np.maximum.accumulate(prev, out=prev)
    nxt = np.where(valid, idx, n)
    nxt = np.minimum.accumulate(nxt[::-1])[::-1]
    d_prev = np.where(prev >= 0, idx - prev, n + 1)
    d_next = np.where(nxt < n, nxt - idx, n + 1)
    src = np.where(d_prev <= d_next, prev, nxt)
    return s[src]


def aggregate(series, native_interval: int, target_interval: int) -> np.ndarray:
    """Mean over consecutive bins of ``target/native`` samples; a short tail bin is kept."""
    if native_interval <= 0 or target_interval <= 0:
        raise IngestError("intervals must be positive")
    if target_interval % native_interval:
        raise IngestError(
            f"target interval {target_interval}s is not a multiple of native {native_interval}s"
        )
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        return s.copy()
    m = target_interval // native_interval
    starts = np.arange(0, s.shape[0], m)
    sums = np.add.reduceat(s, starts)
    counts = np.diff(np.append(starts, s.shape[0]))
    return sums / counts


def normalize(matrix, stats: NormStats) -> np.ndarray:
    """Min-max scale with training statistics; constant columns map to 0."""
    m = np.asarray(matrix, dtype=float)
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    out = (m - stats.min) / safe
    return np.where(span > 0, out, 0.0)


def denormalize(matrix, stats: NormStats) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    span = stats.max - stats.min
    return np.where(span > 0, m * span + stats.min, stats.min + 0.0 * m)


# ---------------------------------------------------------------------------
# Files


def parse_timestamp(text: str) -> int:
    """ISO-8601 timestamp to UTC epoch seconds (naive values are taken as UTC)."""
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(t)
    except ValueError:
        raise IngestError(f"bad timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _ppm(text: str, where: str) -> float:
    if text is None or text.strip() == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise IngestError(f"{where}: not a number: {text!r}") from None
    if not 0 <= v <= MAX_PPM:
        raise IngestError(f"{where}: CO2 value {v} outside [0, {MAX_PPM:g}] ppm")
    return v


def read_sensor_csv(path) -> dict:
    """Return ``{device_id: (epoch seconds array, co2_a array, co2_b array)}``."""
    raw: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "device_id", "co2_a"} - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            ts = parse_timestamp(row["timestamp"])
            dev = row["device_id"].strip()
            a = _ppm(row["co2_a"], where)
            b = _ppm(row.get("co2_b"), where)
            entry = raw.setdefault(dev, ([], [], []))
            if entry[0] and ts < entry[0][-1]:
                raise IngestError(f"{where}: timestamps decrease for device {dev}")
            entry[0].append(ts)
            entry[1].append(a)
            entry[2].append(b)
    return {
        dev: (np.asarray(t, dtype=np.int64), np.asarray(a), np.asarray(b))
        for dev, (t, a, b) in raw.items()
    }


def read_label_csv(path):
    """Return (epoch seconds, occupants, ventilation or None)."""
    ts, occ, vent = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "occupants"} - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            ts.append(parse_timestamp(row["timestamp"]))
            try:
                n = int(row["occupants"])
            except ValueError:
                raise IngestError(f"{where}: occupants must be an integer") from None
            if n < 0:
                raise IngestError(f"{where}: occupants must be non-negative")
            occ.append(n)
            v = (row.get("ventilation") or "").strip()
            if v:
                fv = float(v)
                if not 0 <= fv <= 1:
                    raise IngestError(f"{where}: ventilation {fv} outside [0, 1]")
                vent.append(fv)
            else:
                vent.append(math.nan)
    order = np.argsort(np.asarray(ts), kind="stable")
    ts = np.asarray(ts, dtype=np.int64)[order]
    occ = np.asarray(occ, dtype=np.int64)[order]
    vent = np.asarray(vent, dtype=float)[order]
    if np.all(np.isnan(vent)):
        vent = None
    return ts, occ, vent


def read_room_json(path) -> RoomMeta:
    with open(path) as fh:
        return RoomMeta.from_dict(json.load(fh))


def _segments(slots: np.ndarray):
    """Split sorted slot indices into runs of consecutive slots."""
    breaks = np.flatnonzero(np.diff(slots) != 1) + 1
    return np.split(np.arange(slots.shape[0]), breaks)


def assemble(
    sensors: dict,
    label_ts,
    label_occ,
    label_vent,
    room: RoomMeta,
    native_interval: int = NATIVE_INTERVAL,
    interval: int = DEFAULT_INTERVAL,
) -> Dataset:
    """Build a Dataset from parsed sensor readings and piecewise-constant labels."""
    if interval % native_interval:
        raise IngestError(
            f"target interval {interval}s is not a multiple of native {native_interval}s"
        )
    known = {d.device_id for d in room.devices}
    unknown = sorted(set(sensors) - known)
    if unknown:
        raise IngestError(f"devices not in room metadata: {unknown}")
    all_slots = [t // native_interval for t, _, _ in sensors.values()]
    if not all_slots:
        raise IngestError("no sensor readings")
    slots = np.unique(np.concatenate(all_slots))

    native = {}
    for dev in room.devices:
        values = np.full(slots.shape[0], np.nan)
        if dev.device_id in sensors:
            t, a, b = sensors[dev.device_id]
            avg = pair_average(a, b)
            pos = np.searchsorted(slots, t // native_interval)
            ok = ~np.isnan(avg)
            # several readings in one slot are averaged
            sums = np.bincount(pos[ok], weights=avg[ok], minlength=slots.shape[0])
            cnt = np.bincount(pos[ok], minlength=slots.shape[0])
            np.divide(sums, cnt, out=values, where=cnt > 0)
        native[dev.device_id] = fill_missing(values, dev.device_id)

    m = interval // native_interval
    grid, series = [], {k: [] for k in native}
    for seg in _segments(slots):
        starts = slots[seg[0]] + np.arange(0, seg.shape[0], m)
        grid.append(starts * native_interval)
        for k, v in native.items():
            series[k].append(aggregate(v[seg], native_interval, interval))
    grid = np.concatenate(grid)
    series = {k: np.concatenate(v) for k, v in series.items()}

    label_ts = np.asarray(label_ts, dtype=np.int64)
    pos = np.searchsorted(label_ts, grid, side="right") - 1
    if pos.size and pos.min() < 0:
        raise IngestError(
            f"no label at or before {format_timestamp(int(grid[np.argmin(pos)]))}"
        )
    labels = np.asarray(label_occ)[pos]
    vent = None
    if label_vent is not None:
        vent = np.asarray(label_vent)[pos]
        if np.any(np.isnan(vent)):
            raise IngestError("ventilation rating missing for part of the grid")
    return Dataset(grid=grid, interval=interval, series=series, labels=labels,
                   room=room, ventilation=vent)


def load_dataset(
    data_dir,
    interval: int = DEFAULT_INTERVAL,
    native_interval: int = NATIVE_INTERVAL,
) -> Dataset:
    """Load ``sensors.csv``, ``labels.csv`` and ``room.json`` from a directory."""
    d = Path(data_dir)
    for name in (SENSOR_FILE, LABEL_FILE, ROOM_FILE):
        if not (d / name).is_file():
            raise IngestError(f"{d}: missing {name}")
    room = read_room_json(d / ROOM_FILE)
    sensors = read_sensor_csv(d / SENSOR_FILE)
    ts, occ, vent = read_label_csv(d / LABEL_FILE)
    return assemble(sensors, ts, occ, vent, room, native_interval, interval)
