"""Shared vocabulary: measurement points, resolutions, records, events.

Everything here is an immutable value object; instances are safe to share
across threads without synchronization.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

# Relative slack allowed when checking apparent vs. active power, so that
# float roundoff in aggregation never flags a physically consistent record.
POWER_CONSISTENCY_RTOL = 1e-6


class Resolution(enum.Enum):
    """Supported averaging-window lengths, ordered by duration."""

    R100MS = (0, 100, "100ms")
    R1S = (1, 1_000, "1s")
    R3S = (2, 3_000, "3s")
    R10MIN = (3, 600_000, "10min")

    def __init__(self, code: int, duration_ms: int, label: str):
        self.code = code
        self.duration_ms = duration_ms
        self.label = label

    def __lt__(self, other: "Resolution") -> bool:
        return self.duration_ms < other.duration_ms

    @classmethod
    def from_code(cls, code: int) -> "Resolution":
        try:
            return _RESOLUTION_BY_CODE[code]
        except KeyError:
            raise ValueError(f"unknown resolution code {code}") from None

    @classmethod
    def from_label(cls, label: str) -> "Resolution":
        try:
            return _RESOLUTION_BY_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown resolution {label!r}") from None


_RESOLUTION_BY_CODE = {r.code: r for r in Resolution}
_RESOLUTION_BY_LABEL = {r.label: r for r in Resolution}


class RecordFlags(enum.IntFlag):
    NONE = 0
    INCOMPLETE = 1
    CLOCK_UNSYNCED = 2


class EventType(enum.Enum):
    SAG = 1
    SWELL = 2
    INTERRUPTION = 3

    @classmethod
    def from_code(cls, code: int) -> "EventType":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(f"unknown event type code {code}") from None


# Bit positions of the three phases in a phase mask.
PHASE_A, PHASE_B, PHASE_C = 1, 2, 4
ALL_PHASES = PHASE_A | PHASE_B | PHASE_C

# Names of the scalar values carried by a BaseRecord, in wire order.
# Per-phase fields get an _a/_b/_c suffix.
VALUE_NAMES = (
    "frequency_hz",
    "vrms_pu_a",
    "vrms_pu_b",
    "vrms_pu_c",
    "irms_a_a",
    "irms_a_b",
    "irms_a_c",
    "p_w",
    "q_var",
    "s_va",
    "thd_v_a",
    "thd_v_b",
    "thd_v_c",
    "unbalance",
    "flicker_pst",
)
VALUE_COUNT = len(VALUE_NAMES)
VALUE_INDEX = {name: i for i, name in enumerate(VALUE_NAMES)}


@dataclass(frozen=True, slots=True)
class MeasurementPoint:
    """A monitored location on the grid."""

    point_id: int
    name: str
    nominal_voltage_v: float
    nominal_frequency_hz: float = 50.0

    def __post_init__(self):
        if self.point_id < 0 or self.point_id > 0xFFFFFFFF:
            raise ValueError(f"point_id {self.point_id} outside u32 range")
        if self.nominal_voltage_v <= 0:
            raise ValueError("nominal_voltage_v must be positive")
        if self.nominal_frequency_hz <= 0:
            raise ValueError("nominal_frequency_hz must be positive")


# Caches for the record materialization hot path: a range query can
# rebuild thousands of records, so enum construction must not dominate.
_FLAG_CACHE: dict[int, RecordFlags] = {}


def _cached_flags(value: int) -> RecordFlags:
    flags = _FLAG_CACHE.get(value)
    if flags is None:
        flags = _FLAG_CACHE[value] = RecordFlags(value)
    return flags


class BaseRecord(NamedTuple):
    """One measurement of all power-quality parameters for one point,
    one aligned window start, one resolution.

    Voltages are stored in per-unit of the point's nominal so that event
    thresholds and sanity bounds are point-independent.  ``flicker_pst``
    is an opaque pass-through: stored and served, never computed here.
    A NamedTuple rather than a dataclass: queries materialize these in
    bulk and tuple construction is several times cheaper.
    """

    point_id: int
    ts_ms: int
    resolution: Resolution
    flags: RecordFlags
    frequency_hz: float
    vrms_pu: tuple[float, float, float]
    irms_a: tuple[float, float, float]
    p_w: float
    q_var: float
    s_va: float
    thd_v: tuple[float, float, float]
    unbalance: float
    flicker_pst: float

    def to_row(self) -> tuple:
        """Flatten to the 19-element row used by the codec kernels:
        (point_id, ts_ms, resolution_code, flags, *values)."""
        return (
            self.point_id,
            self.ts_ms,
            self.resolution.code,
            int(self.flags),
            self.frequency_hz,
            *self.vrms_pu,
            *self.irms_a,
            self.p_w,
            self.q_var,
            self.s_va,
            *self.thd_v,
            self.unbalance,
            self.flicker_pst,
        )

    @classmethod
    def from_row(cls, row: tuple) -> "BaseRecord":
        return cls(
            row[0],
            row[1],
            _RESOLUTION_BY_CODE[row[2]],
            _cached_flags(row[3]),
            row[4],
            (row[5], row[6], row[7]),
            (row[8], row[9], row[10]),
            row[11],
            row[12],
            row[13],
            (row[14], row[15], row[16]),
            row[17],
            row[18],
        )

    def values(self) -> tuple[float, ...]:
        """The 15 scalar values in wire order (see VALUE_NAMES)."""
        return self.to_row()[4:]

    def value(self, name: str) -> float:
        return self.values()[VALUE_INDEX[name]]


@dataclass(frozen=True, slots=True)
class PQEvent:
    """A detected voltage sag, swell, or interruption on one or more phases."""

    point_id: int
    event_type: EventType
    phase_mask: int
    start_ms: int
    end_ms: int
    extreme_pu: float

    def __post_init__(self):
        if not 0 < self.phase_mask <= ALL_PHASES:
            raise ValueError(f"phase_mask {self.phase_mask:#x} invalid")
        if self.start_ms >= self.end_ms:
            raise ValueError("event start must precede end")

    def overlaps(self, from_ms: int, to_ms: int) -> bool:
        return self.start_ms < to_ms and self.end_ms > from_ms

    def dedup_key(self) -> tuple:
        return (self.point_id, self.event_type, self.phase_mask, self.start_ms, self.end_ms)


def window_align(ts_ms: int, resolution: Resolution) -> int:
    """Largest multiple of the resolution duration that is <= ts_ms
    (window-start convention)."""
    if ts_ms < 0:
        raise ValueError("ts_ms must be non-negative")
    return ts_ms - ts_ms % resolution.duration_ms


class RejectReason(enum.Enum):
    UNKNOWN_POINT = "unknown_point"
    MISALIGNED_TS = "misaligned_ts"
    NON_FINITE = "non_finite"
    NEGATIVE_FIELD = "negative_field"
    POWER_INCONSISTENT = "power_inconsistent"


@dataclass(frozen=True, slots=True)
class Rejection:
    reason: RejectReason
    detail: str

    def __str__(self) -> str:
        return f"{self.reason.value}: {self.detail}"


# Value names that must be non-negative.  Active/reactive power may be
# negative (reverse flow); frequency positivity is not asserted because a
# dead bus legitimately reports 0.
_NON_NEGATIVE = (
    "vrms_pu_a", "vrms_pu_b", "vrms_pu_c",
    "irms_a_a", "irms_a_b", "irms_a_c",
    "s_va",
    "thd_v_a", "thd_v_b", "thd_v_c",
    "unbalance",
)


def validate_record(record: BaseRecord, registry: "PointRegistry") -> Optional[Rejection]:
    """Check a record against the registry and the value invariants.

    Returns None when the record is acceptable, otherwise a Rejection
    naming the first violated rule.  Never raises.
    """
    if record.point_id not in registry:
        return Rejection(RejectReason.UNKNOWN_POINT, f"point {record.point_id} not registered")
    if record.ts_ms % record.resolution.duration_ms != 0:
        return Rejection(
            RejectReason.MISALIGNED_TS,
            f"ts {record.ts_ms} not aligned to {record.resolution.label}",
        )
    values = record.values()
    for name, value in zip(VALUE_NAMES, values):
        if not math.isfinite(value):
            return Rejection(RejectReason.NON_FINITE, name)
    for name in _NON_NEGATIVE:
        if values[VALUE_INDEX[name]] < 0:
            return Rejection(RejectReason.NEGATIVE_FIELD, name)
    # Apparent power must dominate active power.  Skipped for INCOMPLETE
    # records: partial records (bulk import) leave absent fields at 0.0,
    # which would otherwise fail this cross-field check.
    if not record.flags & RecordFlags.INCOMPLETE:
        s2 = record.s_va * record.s_va
        p2 = record.p_w * record.p_w
        if p2 > s2 * (1.0 + POWER_CONSISTENCY_RTOL):
            return Rejection(
                RejectReason.POWER_INCONSISTENT,
                f"s_va^2 {s2:g} < p_w^2 {p2:g}",
            )
    return None


class PointRegistry:
    """The set of measurement points known to a deployment.

    Loaded once at startup; read-only afterwards.
    """

    def __init__(self, points: Iterable[MeasurementPoint]):
        self._points: dict[int, MeasurementPoint] = {}
        for p in points:
            if p.point_id in self._points:
                raise ValueError(f"duplicate point_id {p.point_id}")
            self._points[p.point_id] = p

    def __contains__(self, point_id: int) -> bool:
        return point_id in self._points

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self):
        return iter(sorted(self._points.values(), key=lambda p: p.point_id))

    def get(self, point_id: int) -> MeasurementPoint:
        try:
            return self._points[point_id]
        except KeyError:
            raise KeyError(f"unknown point {point_id}") from None

    @classmethod
    def load_csv(cls, path: str | Path) -> "PointRegistry":
        """Load `points.csv` with header
        point_id,name,nominal_voltage_v,nominal_frequency_hz."""
        expected = ["point_id", "name", "nominal_voltage_v", "nominal_frequency_hz"]
        points = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != expected:
                raise ValueError(
                    f"{path}: bad header {reader.fieldnames}, expected {expected}"
                )
            for line in reader:
                points.append(
                    MeasurementPoint(
                        point_id=int(line["point_id"]),
                        name=line["name"],
                        nominal_voltage_v=float(line["nominal_voltage_v"]),
                        nominal_frequency_hz=float(line["nominal_frequency_hz"]),
                    )
                )
        return cls(points)
