"""Sensor-pair selection and the temporal/spatial CO2 feature set."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .ingest import Dataset, DeviceMeta

FEATURE_KINDS = ("AVG", "FD", "VD", "FDVD", "HD", "VENT")
DIFFERENCE_KINDS = ("FD", "FDVD")
MIN_VERTICAL_SEPARATION = 1.0


class FeatureError(ValueError):
    """Feature request that the dataset or room layout cannot satisfy."""


@dataclass(frozen=True)
class FeatureSpec:
    kinds: tuple
    vd_pair: tuple | None = None
    hd_pair: tuple | None = None

    def __post_init__(self):
        kinds = tuple(k.upper() for k in self.kinds)
        bad = [k for k in kinds if k not in FEATURE_KINDS]
        if bad:
            raise FeatureError(
                f"unknown feature(s) {bad}; valid: {', '.join(k.lower() for k in FEATURE_KINDS)}"
            )
        if not kinds:
            raise FeatureError("empty feature set")
        # canonical column order, duplicates dropped
        object.__setattr__(self, "kinds", tuple(k for k in FEATURE_KINDS if k in kinds))
        if ("VD" in self.kinds or "FDVD" in self.kinds) and self.vd_pair is None:
            raise FeatureError("VD/FDVD selected but no vertical pair given")
        if "HD" in self.kinds and self.hd_pair is None:
            raise FeatureError("HD selected but no horizontal pair given")

    @property
    def label(self) -> str:
        return " + ".join(self.kinds)

    @property
    def has_difference(self) -> bool:
        return any(k in self.kinds for k in DIFFERENCE_KINDS)


def parse_kinds(text: str) -> tuple:
    """'avg,fd,vd' -> ('AVG', 'FD', 'VD'), validated and in canonical order."""
    kinds = [t.strip().upper() for t in text.split(",") if t.strip()]
    bad = [k for k in kinds if k not in FEATURE_KINDS]
    if bad or not kinds:
        raise FeatureError(
            f"invalid feature set {text!r}; valid: {', '.join(k.lower() for k in FEATURE_KINDS)}"
        )
    return tuple(k for k in FEATURE_KINDS if k in kinds)


def _horizontal_distance(a: DeviceMeta, b: DeviceMeta) -> float:
    if a.has_xy and b.has_xy:
        return math.hypot(a.x - b.x, a.y - b.y)
    return abs(a.distance_to_window - b.distance_to_window)


def _id_key(a: DeviceMeta, b: DeviceMeta):
    return tuple(sorted((a.device_id, b.device_id)))


def select_vertical_pair(devices) -> tuple:
    """(upper, lower) device ids: horizontally closest pair more than 1 m apart in height."""
    devices = list(devices)
    if len(devices) < 2:
        raise FeatureError("vertical pair needs at least 2 devices")
    candidates = [
        (a, b) for a, b in combinations(devices, 2)
        if abs(a.height - b.height) > MIN_VERTICAL_SEPARATION
    ]
    if not candidates:
        raise FeatureError("no vertical pair: no two devices differ by more than 1 m in height")
    a, b = min(candidates, key=lambda p: (_horizontal_distance(*p), _id_key(*p)))
    upper, lower = (a, b) if a.height > b.height else (b, a)
    return upper.device_id, lower.device_id


def select_horizontal_pair(devices, height_tol: float = 1e-9) -> tuple:
    """(near-window, far) device ids: smallest height difference, then widest window spread."""
    devices = list(devices)
    if len(devices) < 2:
        raise FeatureError("horizontal pair needs at least 2 devices")
    pairs = [
        (a, b) for a, b in combinations(devices, 2)
        if a.distance_to_window != b.distance_to_window
    ]
    if not pairs:
        raise FeatureError("degenerate horizontal layout: all devices equidistant from windows")
    best_dh = min(abs(a.height - b.height) for a, b in pairs)
    level = [p for p in pairs if abs(p[0].height - p[1].height) <= best_dh + height_tol]
    a, b = min(
        level,
        key=lambda p: (-abs(p[0].distance_to_window - p[1].distance_to_window), _id_key(*p)),
    )
    near, far = (a, b) if a.distance_to_window < b.distance_to_window else (b, a)
    return near.device_id, far.device_id


def default_spec(ds: Dataset, kinds) -> FeatureSpec:
    """FeatureSpec with pairs chosen from the room layout, only where needed."""
    kinds = tuple(k.upper() for k in kinds)
    vd = hd = None
    if "VD" in kinds or "FDVD" in kinds:
        vd = select_vertical_pair(ds.room.devices)
    if "HD" in kinds:
        hd = select_horizontal_pair(ds.room.devices)
    return FeatureSpec(kinds, vd_pair=vd, hd_pair=hd)


@dataclass
class FeatureMatrix:
    names: list
    values: np.ndarray
    labels: np.ndarray
    grid: np.ndarray
    seasons: np.ndarray
    spec: FeatureSpec

    def __len__(self):
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.names) + ["occupants"])
            for row, lab in zip(self.values, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])


def _series(ds: Dataset, device_id: str) -> np.ndarray:
    try:
        return ds.series[device_id]
    except KeyError:
        raise FeatureError(f"device {device_id!r} has no series in this dataset") from None


def build_features(ds: Dataset, spec: FeatureSpec) -> FeatureMatrix:
    n = len(ds)
    if n < 2 and spec.has_difference:
        raise FeatureError("difference features need at least 2 grid points")
    avg = np.mean(np.vstack([ds.series[k] for k in sorted(ds.series)]), axis=0)
    cols = {}
    if "AVG" in spec.kinds:
        cols["AVG"] = avg
    if "FD" in spec.kinds:
        cols["FD"] = np.concatenate([[np.nan], np.diff(avg)])
    if "VD" in spec.kinds or "FDVD" in spec.kinds:
        upper, lower = spec.vd_pair
        vd = _series(ds, upper) - _series(ds, lower)
        if "VD" in spec.kinds:
            cols["VD"] = vd
        if "FDVD" in spec.kinds:
            cols["FDVD"] = np.concatenate([[np.nan], np.diff(vd)])
    if "HD" in spec.kinds:
        near, far = spec.hd_pair
        cols["HD"] = _series(ds, near) - _series(ds, far)
    if "VENT" in spec.kinds:
        if ds.ventilation is None:
            raise FeatureError("VENT selected but the dataset has no ventilation rating")
        cols["VENT"] = ds.ventilation.astype(float)

    start = 1 if spec.has_difference else 0
    names = list(spec.kinds)
    values = np.column_stack([cols[k][start:] for k in names])
    return FeatureMatrix(
        names=names,
        values=values,
        labels=ds.labels[start:].copy(),
        grid=ds.grid[start:].copy(),
        seasons=ds.seasons[start:],
        spec=spec,
    )
