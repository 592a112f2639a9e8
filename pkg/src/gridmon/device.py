"""Simulated measurement-device fleet.

Each device monitors one point (device_id == point_id), synthesizes
per-second electrical state from a scenario, runs event detection and
3-second aggregation locally, journals every sealed frame before it
counts as sent, and speaks the wire protocol with store-and-forward
across link outages.

Synthesis is deterministic: the RNG for one sample is derived from
(scenario seed, point_id, second), so any run of the same scenario
produces byte-identical frames, and tests can recompute expected output
without a network.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from gridmon import pq, wire
from gridmon.journal import Journal
from gridmon.logfile import LogEntry
from gridmon.model import (
    ALL_PHASES,
    BaseRecord,
    MeasurementPoint,
    PQEvent,
    RecordFlags,
    Resolution,
)

logger = logging.getLogger(__name__)

AGG_SPAN_S = 3  # device-side aggregation window, seconds
NOMINAL_CURRENT_A = 100.0
CURRENT_LAG_DEG = 25.0
FREQ_NOISE_SIGMA_HZ = 0.01

_PHASE_LETTERS = "ABC"


class InjectionKind(enum.Enum):
    SAG = "SAG"
    SWELL = "SWELL"
    INTERRUPTION = "INTERRUPTION"
    LINK_OUTAGE = "LINK_OUTAGE"


def phases_to_mask(phases: str) -> int:
    mask = 0
    for ch in phases.upper():
        idx = _PHASE_LETTERS.find(ch)
        if idx < 0:
            raise ValueError(f"unknown phase {ch!r}")
        mask |= 1 << idx
    if not mask:
        raise ValueError("empty phase set")
    return mask


def mask_to_phases(mask: int) -> str:
    return "".join(_PHASE_LETTERS[i] for i in range(3) if mask & (1 << i))


@dataclass(frozen=True, slots=True)
class Injection:
    """One scripted disturbance: an electrical event forced onto the
    masked phases, or a link outage (depth/phases ignored)."""

    kind: InjectionKind
    point_id: int
    start_s: int
    duration_s: int
    depth_pu: float = 0.0
    phase_mask: int = ALL_PHASES

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("injection duration must be positive")
        if self.kind is InjectionKind.SAG and not 0.1 <= self.depth_pu < 0.9:
            raise ValueError(f"sag depth {self.depth_pu} outside [0.1, 0.9)")
        if self.kind is InjectionKind.SWELL and not self.depth_pu > 1.1:
            raise ValueError(f"swell depth {self.depth_pu} must exceed 1.1")
        if self.kind is InjectionKind.INTERRUPTION and not 0 <= self.depth_pu < 0.1:
            raise ValueError(f"interruption depth {self.depth_pu} outside [0, 0.1)")

    def active(self, t_s: int) -> bool:
        return self.start_s <= t_s < self.start_s + self.duration_s


@dataclass(frozen=True, slots=True)
class DeviceSpec:
    point_id: int
    noise_sigma_pu: float = 0.005


@dataclass(frozen=True, slots=True)
class Scenario:
    seed: int
    duration_s: int
    devices: tuple[DeviceSpec, ...]
    injected: tuple[Injection, ...] = ()

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("scenario duration must be positive")
        ids = [d.point_id for d in self.devices]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate device point_id in scenario")

    def device_spec(self, point_id: int) -> DeviceSpec:
        for spec in self.devices:
            if spec.point_id == point_id:
                return spec
        raise KeyError(f"point {point_id} not in scenario")

    def electrical_injections(self, point_id: int) -> list[Injection]:
        return [
            i
            for i in self.injected
            if i.point_id == point_id and i.kind is not InjectionKind.LINK_OUTAGE
        ]

    def link_up(self, point_id: int, t_s: int) -> bool:
        for i in self.injected:
            if i.kind is InjectionKind.LINK_OUTAGE and i.point_id == point_id and i.active(t_s):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "devices": [
                {"point_id": d.point_id, "noise_sigma_pu": d.noise_sigma_pu}
                for d in self.devices
            ],
            "injected": [
                {
                    "kind": i.kind.value,
                    "point_id": i.point_id,
                    "start_s": i.start_s,
                    "duration_s": i.duration_s,
                    "depth_pu": i.depth_pu,
                    "phases": mask_to_phases(i.phase_mask),
                }
                for i in self.injected
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        devices = tuple(
            DeviceSpec(d["point_id"], d.get("noise_sigma_pu", 0.005))
            for d in raw["devices"]
        )
        injected = tuple(
            Injection(
                kind=InjectionKind(i["kind"]),
                point_id=i["point_id"],
                start_s=i["start_s"],
                duration_s=i["duration_s"],
                depth_pu=i.get("depth_pu", 0.0),
                phase_mask=phases_to_mask(i.get("phases", "ABC")),
            )
            for i in raw.get("injected", ())
        )
        return cls(raw["seed"], raw["duration_s"], devices, injected)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _sample_rng(seed: int, point_id: int, t_s: int) -> random.Random:
    digest = hashlib.blake2b(
        struct.pack(">QIQ", seed & (2**64 - 1), point_id, t_s), digest_size=8
    ).digest()
    return random.Random(int.from_bytes(digest, "big"))


def synthesize_base_record(
    scenario: Scenario,
    point: MeasurementPoint,
    t_s: int,
    injections: Optional[Sequence[Injection]] = None,
) -> tuple[BaseRecord, tuple[float, float, float]]:
    """One second of electrical state for one point.

    Nominal 1.0 pu / nominal frequency with Gaussian noise; phases under
    an active injected event are forced to the event depth exactly (no
    noise), so the expected detector output is computable in closed form.
    Currents, powers, THD and unbalance are derived through the pq ops.
    """
    if injections is None:
        injections = scenario.electrical_injections(point.point_id)
    spec = scenario.device_spec(point.point_id)
    rng = _sample_rng(scenario.seed, point.point_id, t_s)
    sigma = spec.noise_sigma_pu

    vrms = [1.0, 1.0, 1.0]
    freq = point.nominal_frequency_hz
    if sigma > 0:
        vrms = [max(0.0, v + rng.gauss(0.0, sigma)) for v in vrms]
        freq += rng.gauss(0.0, FREQ_NOISE_SIGMA_HZ)
    thd_ratios = [rng.uniform(0.01, 0.03) for _ in range(3)]
    if sigma > 0:
        irms = [max(0.0, NOMINAL_CURRENT_A * (1.0 + rng.gauss(0.0, sigma))) for _ in range(3)]
    else:
        irms = [NOMINAL_CURRENT_A] * 3

    for inj in injections:
        if inj.active(t_s):
            for phase in range(3):
                if inj.phase_mask & (1 << phase):
                    vrms[phase] = inj.depth_pu

    angles = (0.0, -120.0, 120.0)
    volts = [vrms[k] * point.nominal_voltage_v for k in range(3)]
    p_w, q_var, s_va = pq.power_triplet(
        [(volts[k], angles[k]) for k in range(3)],
        [(irms[k], angles[k] - CURRENT_LAG_DEG) for k in range(3)],
    )
    try:
        _, _, _, unbalance = pq.symmetrical_components(
            pq.Phasor(volts[0], angles[0]),
            pq.Phasor(volts[1], angles[1]),
            pq.Phasor(volts[2], angles[2]),
        )
    except pq.DegenerateSystem:
        unbalance = 0.0  # dead bus: ratio undefined, report zero
    thd_v = tuple(
        pq.thd(volts[k], [(5, volts[k] * thd_ratios[k])]) if volts[k] > 0 else 0.0
        for k in range(3)
    )
    record = BaseRecord(
        point_id=point.point_id,
        ts_ms=t_s * 1000,
        resolution=Resolution.R1S,
        flags=RecordFlags.NONE,
        frequency_hz=freq,
        vrms_pu=tuple(vrms),
        irms_a=tuple(irms),
        p_w=p_w,
        q_var=q_var,
        s_va=s_va,
        thd_v=thd_v,
        unbalance=unbalance,
        flicker_pst=0.0,
    )
    return record, tuple(vrms)


class SimDevice:
    """Measurement pipeline of one device: synthesis, event detection,
    3 s aggregation, and the sealed-frame journal."""

    def __init__(
        self,
        scenario: Scenario,
        point: MeasurementPoint,
        key: bytes,
        journal_dir: str | Path,
        fsync: bool = False,
        detector_config: Optional[pq.EventDetectorConfig] = None,
    ):
        self.scenario = scenario
        self.point = point
        self.device_id = point.point_id
        self.key = key
        self.journal = Journal(journal_dir, self.device_id, fsync=fsync)
        self.detector = pq.EventDetector(self.device_id, detector_config or pq.EventDetectorConfig())
        self._injections = scenario.electrical_injections(self.device_id)
        self._window: list[BaseRecord] = []
        self._pending_events: list[PQEvent] = []

    def step(self, t_s: int) -> list[LogEntry]:
        """Advance one simulated second; returns the frames journaled by
        this step (one DATA and possibly one EVENT frame every third
        second)."""
        record, vrms = synthesize_base_record(self.scenario, self.point, t_s, self._injections)
        self._pending_events.extend(self.detector.step(record.ts_ms, vrms))
        self._window.append(record)
        if len(self._window) == AGG_SPAN_S:
            return self._emit()
        return []

    def finish(self) -> list[LogEntry]:
        """Flush a partial aggregation window at scenario end."""
        if not self._window:
            return []
        return self._emit()

    def _emit(self) -> list[LogEntry]:
        aggregate = pq.aggregate_window(self._window, Resolution.R3S)
        self._window = []
        frames = [self._seal_and_journal(wire.FrameType.DATA, wire.encode_batch([aggregate]))]
        if self._pending_events:
            frames.append(
                self._seal_and_journal(
                    wire.FrameType.EVENT, wire.encode_event_batch(self._pending_events)
                )
            )
            self._pending_events = []
        return frames

    def _seal_and_journal(self, frame_type: wire.FrameType, payload: bytes) -> LogEntry:
        seq = self.journal.next_data_seq
        frame = wire.seal_frame(
            wire.FrameHeader(frame_type, self.device_id, seq), payload, self.key
        )
        self.journal.append(seq, int(frame_type), frame)
        return LogEntry(seq, int(frame_type), frame)

    def make_hello(self) -> bytes:
        seq = self.journal.reserve_ctrl_seq()
        return wire.seal_frame(
            wire.FrameHeader(wire.FrameType.HELLO, self.device_id, seq),
            wire.encode_u64(self.journal.last_data_seq),
            self.key,
        )

    def close(self) -> None:
        self.journal.close()


class Clock:
    """Pacing hook for the step loop.  The default is a virtual clock:
    simulated seconds take no wall time."""

    def sleep_until(self, t_s: int) -> None:
        pass


class WallClock(Clock):
    """Real-time pacing: one simulated second per wall second."""

    def __init__(self):
        self._start = time.monotonic()

    def sleep_until(self, t_s: int) -> None:
        target = self._start + t_s
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)


@dataclass
class DeviceStats:
    device_id: int
    frames_sent: int = 0
    hellos: int = 0
    retransmits: int = 0
    acked_seq: int = 0
    flushed: bool = False
    error: Optional[str] = None


class DeviceRunner(threading.Thread):
    """Drives one SimDevice through a scenario against a live center:
    steps the pipeline, honors link outages, reconnects with HELLO and
    journal replay, and flushes until everything is acknowledged."""

    def __init__(
        self,
        device: SimDevice,
        endpoint: tuple[str, int],
        clock: Optional[Clock] = None,
        connect_timeout: float = 2.0,
        flush_timeout: float = 30.0,
    ):
        super().__init__(name=f"device-{device.device_id}", daemon=True)
        self.device = device
        self.endpoint = endpoint
        self.clock = clock or Clock()
        self.connect_timeout = connect_timeout
        self.flush_timeout = flush_timeout
        self.stats = DeviceStats(device.device_id)
        self._conn: Optional[wire.FrameConn] = None
        self._sent_high = 0  # highest data seq handed to the socket at least once

    def run(self) -> None:
        try:
            self._run()
        except Exception as exc:  # surface in fleet results instead of dying silently
            logger.exception("device %d failed", self.device.device_id)
            self.stats.error = repr(exc)
        finally:
            self._disconnect()
            self.device.close()

    # -- scenario loop --------------------------------------------------

    def _run(self) -> None:
        scenario = self.device.scenario
        for t_s in range(scenario.duration_s):
            self.clock.sleep_until(t_s)
            frames = self.device.step(t_s)
            if not scenario.link_up(self.device.device_id, t_s):
                self._disconnect()
                continue
            self._transmit(frames)
            self._drain_acks(0)
        tail = self.device.finish()
        self._transmit(tail)
        self._flush()

    def _transmit(self, frames: Sequence[LogEntry]) -> None:
        if self._conn is None:
            # the reconnect replays everything unacked, which includes
            # any frames just journaled
            self._connect()
            return
        try:
            for entry in frames:
                if entry.seq <= self.stats.acked_seq:
                    continue
                if entry.seq <= self._sent_high:
                    self.stats.retransmits += 1
                self._conn.send_frame(entry.payload)
                self.stats.frames_sent += 1
                self._sent_high = max(self._sent_high, entry.seq)
        except OSError:
            self._disconnect()

    def _drain_acks(self, timeout: float) -> None:
        if self._conn is None:
            return
        try:
            while True:
                raw = self._conn.recv_frame(timeout)
                if raw is None:
                    return
                self._handle_center_frame(raw)
                timeout = 0
        except (wire.WireError, OSError):
            self._disconnect()

    def _handle_center_frame(self, raw: bytes) -> None:
        header, payload = wire.open_frame(raw, {self.device.device_id: self.device.key})
        if header.frame_type == wire.FrameType.ACK:
            cum = wire.decode_u64(payload)
            if cum > self.stats.acked_seq:
                self.stats.acked_seq = cum
                self.device.journal.trim(cum)
        elif header.frame_type == wire.FrameType.ERR:
            code, message = wire.decode_err(payload)
            logger.warning(
                "device %d got error %d from center: %s", self.device.device_id, code, message
            )

    # -- link management ------------------------------------------------

    def _connect(self) -> bool:
        try:
            sock = socket.create_connection(self.endpoint, timeout=self.connect_timeout)
        except OSError:
            return False
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = wire.FrameConn(sock)
        try:
            conn.send_frame(self.device.make_hello())
            self.stats.hellos += 1
            reply = conn.recv_frame(self.connect_timeout)
            if reply is None:
                raise wire.Truncated("no HELLO reply")
            header, payload = wire.open_frame(reply, {self.device.device_id: self.device.key})
            if header.frame_type != wire.FrameType.ACK:
                raise wire.WireError(f"unexpected HELLO reply type {header.frame_type}")
            cum = wire.decode_u64(payload)
        except (wire.WireError, OSError):
            conn.close()
            return False
        self.stats.acked_seq = max(self.stats.acked_seq, cum)
        self.device.journal.trim(cum)
        self._conn = conn
        # resume transmission at cum + 1: replay the unacked journal suffix
        self._transmit(self.device.journal.replay(cum))
        return self._conn is not None

    def _disconnect(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def _flush(self) -> None:
        """Block until every journaled frame is acknowledged (or the
        flush timeout passes)."""
        deadline = time.monotonic() + self.flush_timeout
        while time.monotonic() < deadline:
            if self.device.journal.unacked() == 0:
                self.stats.flushed = True
                return
            if self._conn is None:
                if not self._connect():
                    time.sleep(0.05)
                    continue
            self._drain_acks(0.2)
        self.stats.flushed = self.device.journal.unacked() == 0


def run_fleet(
    scenario: Scenario,
    points: dict[int, MeasurementPoint],
    keys: dict[int, bytes],
    endpoint: tuple[str, int],
    journal_dir: str | Path,
    clock: Optional[Clock] = None,
    flush_timeout: float = 30.0,
    journal_fsync: bool = False,
) -> list[DeviceStats]:
    """Run every scenario device to completion; one thread per device,
    nothing shared between them.  Returns per-device stats."""
    runners = []
    for spec in scenario.devices:
        point = points[spec.point_id]
        device = SimDevice(scenario, point, keys[spec.point_id], journal_dir, fsync=journal_fsync)
        runners.append(
            DeviceRunner(device, endpoint, clock=clock, flush_timeout=flush_timeout)
        )
    for r in runners:
        r.start()
    for r in runners:
        r.join()
    return [r.stats for r in runners]
