"""Power-quality math: phasor-derived quantities, window aggregation,
and the streaming sag/swell/interruption detector.

Everything except the detector is a pure function.  A detector instance
is single-writer (one per monitored point); distinct points can be
processed in parallel.
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from gridmon import kernels
from gridmon.model import BaseRecord, EventType, PQEvent, RecordFlags, Resolution, window_align

DEGENERATE_POSITIVE_SEQ = 1e-12


class PQError(ValueError):
    pass


class DegenerateSystem(PQError):
    """Positive-sequence magnitude too small for an unbalance ratio."""


class ZeroFundamental(PQError):
    pass


class EmptyWindow(PQError):
    pass


class MixedKeys(PQError):
    pass


class OutOfWindow(PQError):
    pass


class NonMonotonicTimestamp(PQError):
    pass


def _norm_angle(angle_deg: float) -> float:
    a = math.fmod(angle_deg + 180.0, 360.0)
    if a < 0:
        a += 360.0
    return a - 180.0


@dataclass(frozen=True, slots=True)
class Phasor:
    """Polar representation of a sinusoidal quantity (RMS magnitude)."""

    magnitude: float
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("phasor magnitude must be non-negative")
        object.__setattr__(self, "angle_deg", _norm_angle(self.angle_deg))

    def to_complex(self) -> complex:
        return cmath.rect(self.magnitude, math.radians(self.angle_deg))

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        return cls(abs(z), math.degrees(cmath.phase(z)))


# Rotation operator: 1 at +120 degrees.
_A = cmath.rect(1.0, math.radians(120.0))
_A2 = cmath.rect(1.0, math.radians(-120.0))


def symmetrical_components(
    va: Phasor, vb: Phasor, vc: Phasor
) -> tuple[Phasor, Phasor, Phasor, float]:
    """Decompose a three-phase set into positive/negative/zero sequence
    and return the unbalance ratio u2 = |negative| / |positive|.

    Raises DegenerateSystem when the positive-sequence magnitude is too
    small for the ratio to mean anything (e.g. three in-phase phasors).
    """
    a, b, c = va.to_complex(), vb.to_complex(), vc.to_complex()
    pos = (a + _A * b + _A2 * c) / 3.0
    neg = (a + _A2 * b + _A * c) / 3.0
    zero = (a + b + c) / 3.0
    if abs(pos) < DEGENERATE_POSITIVE_SEQ:
        raise DegenerateSystem(f"|positive sequence| = {abs(pos):g}")
    u2 = abs(neg) / abs(pos)
    return Phasor.from_complex(pos), Phasor.from_complex(neg), Phasor.from_complex(zero), u2


def thd(fundamental: float, harmonics: Sequence[tuple[int, float]]) -> float:
    """Total harmonic distortion: RMS of the harmonic magnitudes over the
    fundamental.  Harmonic orders must be distinct and within 2..50."""
    if fundamental <= 0:
        raise ZeroFundamental(f"fundamental {fundamental:g}")
    seen = set()
    total = 0.0
    for order, magnitude in harmonics:
        if not 2 <= order <= 50:
            raise ValueError(f"harmonic order {order} outside 2..50")
        if order in seen:
            raise ValueError(f"duplicate harmonic order {order}")
        seen.add(order)
        total += magnitude * magnitude
    return math.sqrt(total) / fundamental


def power_triplet(
    v: Sequence[tuple[float, float]], i: Sequence[tuple[float, float]]
) -> tuple[float, float, float]:
    """Three-phase power from per-phase (rms, angle_deg) pairs.

    P = sum V*I*cos(phi), Q = sum V*I*sin(phi) with phi the per-phase
    voltage-to-current angle; S is the arithmetic apparent power sum V*I.
    """
    if len(v) != 3 or len(i) != 3:
        raise ValueError("expected three phases")
    p = q = s = 0.0
    for (vm, va), (im, ia) in zip(v, i):
        if vm < 0 or im < 0:
            raise ValueError("rms magnitudes must be non-negative")
        phi = math.radians(va - ia)
        vi = vm * im
        p += vi * math.cos(phi)
        q += vi * math.sin(phi)
        s += vi
    return p, q, s


def aggregate_window(inputs: Sequence[BaseRecord], target: Resolution) -> BaseRecord:
    """Combine records of one finer resolution into one target-resolution
    record: voltage/current RMS columns as square-mean-root, everything
    else as the arithmetic mean.  Flags are unioned; INCOMPLETE is added
    when the window has fewer inputs than its nominal count.
    """
    if not inputs:
        raise EmptyWindow("no input records")
    first = inputs[0]
    r_in = first.resolution
    if target.duration_ms % r_in.duration_ms != 0:
        raise ValueError(f"{target.label} not a multiple of {r_in.label}")
    window_ts = window_align(first.ts_ms, target)
    flags = RecordFlags.NONE
    for r in inputs:
        if r.point_id != first.point_id or r.resolution is not r_in:
            raise MixedKeys(f"record ({r.point_id}, {r.resolution.label}) in "
                            f"({first.point_id}, {r_in.label}) window")
        if window_align(r.ts_ms, target) != window_ts:
            raise OutOfWindow(f"ts {r.ts_ms} outside window {window_ts}")
        flags |= r.flags
    expected = target.duration_ms // r_in.duration_ms
    if len(inputs) < expected:
        flags |= RecordFlags.INCOMPLETE
    values = kernels.aggregate_values([r.values() for r in inputs])
    row = (first.point_id, window_ts, target.code, int(flags)) + values
    return BaseRecord.from_row(row)


@dataclass(frozen=True, slots=True)
class EventDetectorConfig:
    """Per-unit thresholds for the voltage event detector."""

    sag_threshold_pu: float = 0.9
    swell_threshold_pu: float = 1.1
    interruption_threshold_pu: float = 0.1
    hysteresis_pu: float = 0.02

    def __post_init__(self):
        if self.hysteresis_pu <= 0:
            raise ValueError("hysteresis must be positive")
        if self.interruption_threshold_pu >= self.sag_threshold_pu - self.hysteresis_pu:
            raise ValueError("interruption threshold must sit below sag hysteresis band")
        if self.swell_threshold_pu <= self.sag_threshold_pu:
            raise ValueError("swell threshold must exceed sag threshold")


class PhaseMode(enum.Enum):
    NORMAL = 0
    IN_SAG = 1
    IN_SWELL = 2
    IN_INTERRUPTION = 3


_MODE_TYPE = {
    PhaseMode.IN_SAG: EventType.SAG,
    PhaseMode.IN_SWELL: EventType.SWELL,
    PhaseMode.IN_INTERRUPTION: EventType.INTERRUPTION,
}


@dataclass
class _OpenEvent:
    start_ms: int
    extreme_pu: float


@dataclass
class EventDetector:
    """Streaming per-phase sag/swell/interruption state machine.

    Feed strictly increasing timestamps via step(); closed events are
    returned as they recover.  Entry uses the bare thresholds
    (interruption wins over sag); exit requires re-crossing the entry
    threshold by the hysteresis margin.  An interruption whose voltage
    recovers into the sag band closes and hands over to a sag event at
    the same sample.  The event extreme includes the entering sample but
    not the recovery sample, and the end timestamp is the first recovered
    sample.
    """

    point_id: int
    config: EventDetectorConfig = field(default_factory=EventDetectorConfig)

    def __post_init__(self):
        self._modes = [PhaseMode.NORMAL] * 3
        self._open: list[Optional[_OpenEvent]] = [None, None, None]
        self._last_ts: Optional[int] = None

    def step(self, ts_ms: int, vrms_pu: Sequence[float]) -> list[PQEvent]:
        if self._last_ts is not None and ts_ms <= self._last_ts:
            raise NonMonotonicTimestamp(f"ts {ts_ms} after {self._last_ts}")
        self._last_ts = ts_ms
        closed: list[PQEvent] = []
        cfg = self.config
        for phase in range(3):
            v = vrms_pu[phase]
            mode = self._modes[phase]
            if mode is PhaseMode.NORMAL:
                if v < cfg.interruption_threshold_pu:
                    self._enter(phase, PhaseMode.IN_INTERRUPTION, ts_ms, v)
                elif v < cfg.sag_threshold_pu:
                    self._enter(phase, PhaseMode.IN_SAG, ts_ms, v)
                elif v > cfg.swell_threshold_pu:
                    self._enter(phase, PhaseMode.IN_SWELL, ts_ms, v)
            elif mode is PhaseMode.IN_SAG:
                if v >= cfg.sag_threshold_pu + cfg.hysteresis_pu:
                    closed.append(self._close(phase, ts_ms))
                else:
                    self._track(phase, v)
            elif mode is PhaseMode.IN_SWELL:
                if v <= cfg.swell_threshold_pu - cfg.hysteresis_pu:
                    closed.append(self._close(phase, ts_ms))
                else:
                    self._track(phase, v)
            else:  # IN_INTERRUPTION
                if v >= cfg.interruption_threshold_pu + cfg.hysteresis_pu:
                    closed.append(self._close(phase, ts_ms))
                    if v < cfg.sag_threshold_pu:
                        self._enter(phase, PhaseMode.IN_SAG, ts_ms, v)
                else:
                    self._track(phase, v)
        return closed

    def open_phases(self) -> int:
        """Phase mask of phases currently inside an event."""
        mask = 0
        for phase in range(3):
            if self._modes[phase] is not PhaseMode.NORMAL:
                mask |= 1 << phase
        return mask

    def _enter(self, phase: int, mode: PhaseMode, ts_ms: int, v: float) -> None:
        self._modes[phase] = mode
        self._open[phase] = _OpenEvent(start_ms=ts_ms, extreme_pu=v)

    def _track(self, phase: int, v: float) -> None:
        acc = self._open[phase]
        if self._modes[phase] is PhaseMode.IN_SWELL:
            acc.extreme_pu = max(acc.extreme_pu, v)
        else:
            acc.extreme_pu = min(acc.extreme_pu, v)

    def _close(self, phase: int, ts_ms: int) -> PQEvent:
        acc = self._open[phase]
        event = PQEvent(
            point_id=self.point_id,
            event_type=_MODE_TYPE[self._modes[phase]],
            phase_mask=1 << phase,
            start_ms=acc.start_ms,
            end_ms=ts_ms,
            extreme_pu=acc.extreme_pu,
        )
        self._modes[phase] = PhaseMode.NORMAL
        self._open[phase] = None
        return event
