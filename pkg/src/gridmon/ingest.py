"""Center-side ingestion.

Accepts one TCP session per device, authenticates and decodes frames,
deduplicates by sequence number, appends accepted payloads to a per-device
write-ahead log, inserts into the tiered store, and returns cumulative
acks.  The WAL is the durability point: acks are only sent after a group
fsync, and startup replays the logs to rebuild both the store and the
per-device session state.

Rollups and demotion are driven by the data watermark (the end of the
newest 3 s record seen), never by the wall clock, so a virtually-clocked
fleet finalizes its 10-minute windows deterministically and re-running a
tick is a no-op.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
from pathlib import Path
from typing import Optional

from gridmon import kernels, logfile, pq, wire
from gridmon.model import BaseRecord, PointRegistry, Resolution, validate_record, window_align
from gridmon.store import EventStore, TieredStore

logger = logging.getLogger(__name__)

MAX_PENDING = 10_000
DEFAULT_ROLLUP_GRACE_MS = 30_000
CENTER_SEQ_BLOCK = 1 << 20

ERR_DECODE = 1
ERR_SEQ_SPACE = 2
ERR_PENDING_OVERFLOW = 3
ERR_BAD_TYPE = 4

# WAL channel for bulk imports; never a real device id.
IMPORT_CHANNEL = 0


class CorruptWal(Exception):
    pass


class PendingOverflow(Exception):
    pass


class SessionState:
    """Per-device dedup state: the highest contiguous durable seq plus a
    bounded sparse set of accepted seqs ahead of it."""

    def __init__(self, device_id: int):
        self.device_id = device_id
        self.cum_seq = 0
        self.pending: set[int] = set()

    def is_duplicate(self, seq: int) -> bool:
        return seq <= self.cum_seq or seq in self.pending

    def can_accept(self, seq: int) -> bool:
        return seq == self.cum_seq + 1 or len(self.pending) < MAX_PENDING

    def accept(self, seq: int) -> None:
        if seq == self.cum_seq + 1:
            self.cum_seq = seq
            while self.cum_seq + 1 in self.pending:
                self.cum_seq += 1
                self.pending.remove(self.cum_seq)
        else:
            if len(self.pending) >= MAX_PENDING:
                raise PendingOverflow(f"device {self.device_id} seq {seq}")
            self.pending.add(seq)


class Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self.frames = 0
        self.duplicates = 0
        self.decode_failures = 0
        self.invalid_records = 0
        self.records_inserted = 0
        self.records_imported = 0
        self.events_inserted = 0
        self.rollups = 0

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "frames": self.frames,
                "duplicates": self.duplicates,
                "decode_failures": self.decode_failures,
                "invalid_records": self.invalid_records,
                "records_inserted": self.records_inserted,
                "records_imported": self.records_imported,
                "events_inserted": self.events_inserted,
                "rollups": self.rollups,
            }


class CenterSeqAllocator:
    """Sequence numbers for center-sealed frames (ACK/ERR).

    Blocks are reserved on disk ahead of use, so a restart can never
    reissue a seq (it resumes at the persisted ceiling), which keeps the
    (key, nonce) pairs of center frames unique forever.
    """

    def __init__(self, path: str | Path, block: int = CENTER_SEQ_BLOCK):
        self.path = Path(path)
        self._block = block
        self._lock = threading.Lock()
        try:
            reserved = json.loads(self.path.read_text())["reserved"]
        except FileNotFoundError:
            reserved = wire.CENTER_SEQ_BASE
        self._next = reserved
        self._ceiling = reserved

    def take(self) -> int:
        with self._lock:
            if self._next >= self._ceiling:
                self._ceiling = self._next + self._block
                tmp = self.path.with_suffix(".seq.tmp")
                with open(tmp, "w") as fh:
                    fh.write(json.dumps({"reserved": self._ceiling}))
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path)
            seq = self._next
            self._next += 1
            return seq


class _DeviceState:
    __slots__ = ("lock", "session", "wal")

    def __init__(self, session: SessionState, wal: logfile.LogWriter):
        self.lock = threading.Lock()
        self.session = session
        self.wal = wal


class IngestCenter:
    """Protocol-independent core: frame processing, WAL, rollups."""

    def __init__(
        self,
        registry: PointRegistry,
        keys: dict[int, bytes],
        store: TieredStore,
        events: EventStore,
        wal_dir: str | Path,
        rollup_grace_ms: int = DEFAULT_ROLLUP_GRACE_MS,
        hot_window_ms: int = 48 * 3600 * 1000,
        wal_fsync: bool = True,
    ):
        self.registry = registry
        self.keys = keys
        self.store = store
        self.events = events
        self.wal_dir = Path(wal_dir)
        self.wal_dir.mkdir(parents=True, exist_ok=True)
        self.rollup_grace_ms = rollup_grace_ms
        self.hot_window_ms = hot_window_ms
        self.wal_fsync = wal_fsync
        self.counters = Counters()
        self.center_seq = CenterSeqAllocator(self.wal_dir / "center.seq")
        self._devices: dict[int, _DeviceState] = {}
        self._devices_lock = threading.Lock()
        self._rollup_lock = threading.Lock()
        self._watermark_ms = 0
        self._dirty_windows: set[tuple[int, int]] = set()
        self._demoted_mark = 0

    # -- device state -----------------------------------------------------

    def _device(self, device_id: int) -> _DeviceState:
        with self._devices_lock:
            state = self._devices.get(device_id)
            if state is None:
                wal = logfile.LogWriter(
                    self.wal_dir / f"{device_id}.wal", fsync=self.wal_fsync
                )
                state = self._devices[device_id] = _DeviceState(SessionState(device_id), wal)
            return state

    def cum_seq(self, device_id: int) -> int:
        return self._device(device_id).session.cum_seq

    # -- frame processing --------------------------------------------------

    def process_frame(
        self, header: wire.FrameHeader, payload: bytes
    ) -> tuple[Optional[int], Optional[bytes]]:
        """Handle one authenticated frame.  Returns (cumulative ack to
        send, error payload to send); either may be None.  Raises OSError
        if the WAL cannot be written (the session must then close without
        acking)."""
        state = self._device(header.device_id)
        with state.lock:
            return self._process_locked(state, header, payload)

    def _process_locked(self, state, header, payload):
        self.counters.bump("frames")
        session = state.session
        if header.frame_type == wire.FrameType.HELLO:
            # reply with durable cum_seq; the device resumes at cum + 1
            return session.cum_seq, None
        if header.frame_type not in (wire.FrameType.DATA, wire.FrameType.EVENT):
            return None, wire.encode_err(ERR_BAD_TYPE, f"unexpected frame type {header.frame_type}")
        if header.seq >= wire.DEVICE_CONTROL_SEQ_BASE or header.seq == 0:
            return None, wire.encode_err(ERR_SEQ_SPACE, f"seq {header.seq} outside data range")
        if session.is_duplicate(header.seq):
            self.counters.bump("duplicates")
            return session.cum_seq, None
        try:
            decoded = self._decode(header.frame_type, payload)
        except wire.WireError as exc:
            self.counters.bump("decode_failures")
            return None, wire.encode_err(ERR_DECODE, str(exc))
        if not session.can_accept(header.seq):
            return None, wire.encode_err(
                ERR_PENDING_OVERFLOW, f"seq {header.seq} too far beyond {session.cum_seq}"
            )
        state.wal.append(header.seq, int(header.frame_type), payload)
        self._apply(header.frame_type, payload, decoded, count=True)
        session.accept(header.seq)
        return session.cum_seq, None

    @staticmethod
    def _decode(frame_type: int, payload: bytes):
        if frame_type == wire.FrameType.DATA:
            return wire.decode_batch_rows(payload)
        return wire.decode_event_batch(payload)

    def _apply(self, frame_type: int, payload: bytes, decoded, count: bool) -> None:
        if frame_type == wire.FrameType.DATA:
            for i, row in enumerate(decoded):
                record = BaseRecord.from_row(row)
                rejection = validate_record(record, self.registry)
                if rejection is not None:
                    self.counters.bump("invalid_records")
                    logger.warning("dropping record from %d: %s", record.point_id, rejection)
                    continue
                # slice of the original payload: the stored bytes are the
                # exact bytes the device sealed
                offset = 2 + i * kernels.RECORD_SIZE
                self.store.insert_packed(payload[offset : offset + kernels.RECORD_SIZE])
                if count:
                    self.counters.bump("records_inserted")
                self.note_record(record.point_id, record.ts_ms, record.resolution)
        else:
            for event in decoded:
                if self.events.insert(event) and count:
                    self.counters.bump("events_inserted")

    def import_records(self, records: list[BaseRecord]) -> None:
        """Durable insert path for validated bulk-import records: they go
        through a dedicated WAL channel (device id 0) so a restart
        replays them exactly like wire data."""
        state = self._device(IMPORT_CHANNEL)
        with state.lock:
            for start in range(0, len(records), wire.MAX_BATCH_RECORDS):
                chunk = records[start : start + wire.MAX_BATCH_RECORDS]
                payload = wire.encode_batch(chunk)
                seq = state.session.cum_seq + 1
                state.wal.append(seq, int(wire.FrameType.DATA), payload)
                state.wal.sync()
                for i, record in enumerate(chunk):
                    offset = 2 + i * kernels.RECORD_SIZE
                    self.store.insert_packed(payload[offset : offset + kernels.RECORD_SIZE])
                    self.note_record(record.point_id, record.ts_ms, record.resolution)
                state.session.accept(seq)
                self.counters.bump("records_imported", len(chunk))

    def note_record(self, point_id: int, ts_ms: int, resolution: Resolution) -> None:
        """Advance the data watermark; mark the 10-minute window of a 3 s
        record for rollup.  Also used by the bulk-import path."""
        with self._rollup_lock:
            end = ts_ms + resolution.duration_ms
            if end > self._watermark_ms:
                self._watermark_ms = end
            if resolution is Resolution.R3S:
                self._dirty_windows.add((point_id, window_align(ts_ms, Resolution.R10MIN)))

    def wal_sync(self, device_id: int) -> None:
        """Group commit: flush (and fsync) the device's WAL.  Call before
        acking a batch."""
        state = self._device(device_id)
        with state.lock:
            state.wal.sync()

    # -- startup -----------------------------------------------------------

    def replay_wal(self) -> int:
        """Rebuild store contents and session states from the WAL; run
        before accepting connections.  Torn tails are dropped, a CRC
        failure before the tail refuses startup."""
        replayed = 0
        for path in sorted(self.wal_dir.glob("*.wal")):
            device_id = int(path.stem)
            try:
                entries, clean = logfile.read_log(path)
            except logfile.LogCorrupt as exc:
                raise CorruptWal(str(exc)) from None
            session = SessionState(device_id)
            for entry in entries:
                if session.is_duplicate(entry.seq):
                    continue
                try:
                    decoded = self._decode(entry.entry_type, entry.payload)
                    self._apply(entry.entry_type, entry.payload, decoded, count=False)
                except wire.WireError as exc:
                    # the frame was acked when first written, so the seq
                    # must be restored even if the payload is unusable
                    logger.error("wal %s seq %d undecodable: %s", path, entry.seq, exc)
                session.accept(entry.seq)
                replayed += 1
            wal = logfile.LogWriter(path, clean_length=clean, fsync=self.wal_fsync)
            with self._devices_lock:
                self._devices[device_id] = _DeviceState(session, wal)
        if replayed:
            logger.info("wal replay: %d frame(s)", replayed)
        return replayed

    # -- scheduled maintenance ----------------------------------------------

    def watermark_ms(self) -> int:
        with self._rollup_lock:
            return self._watermark_ms

    def rollup_tick(self, now_ms: Optional[int] = None) -> list[BaseRecord]:
        """Roll every closed, not-yet-finalized 10-minute window up from
        its stored 3 s records.  A window is closed once it ends at least
        the grace period before `now` (default: the data watermark).
        Re-invocation without new data is a no-op; late records re-mark
        their window and the rollup is recomputed (last writer wins)."""
        with self._rollup_lock:
            now = self._watermark_ms if now_ms is None else now_ms
            due = [
                (pid, win)
                for (pid, win) in self._dirty_windows
                if win + Resolution.R10MIN.duration_ms <= now - self.rollup_grace_ms
            ]
            for key in due:
                self._dirty_windows.remove(key)
        inserted = []
        for point_id, win in sorted(due):
            rows = self.store.query_rows(
                point_id, Resolution.R3S, win, win + Resolution.R10MIN.duration_ms
            )
            if not rows:
                continue
            records = [BaseRecord.from_row(kernels.unpack_record(r)) for r in rows]
            rollup = pq.aggregate_window(records, Resolution.R10MIN)
            self.store.insert(rollup)
            self.counters.bump("rollups")
            inserted.append(rollup)
        return inserted

    def demote_tick(self) -> list[Path]:
        """Demote hot records older than the hot window once per
        10 minutes of data time."""
        with self._rollup_lock:
            watermark = self._watermark_ms
            if watermark - self._demoted_mark < Resolution.R10MIN.duration_ms:
                return []
            self._demoted_mark = watermark
        return self.store.demote(watermark - self.hot_window_ms)

    def close(self) -> None:
        with self._devices_lock:
            for state in self._devices.values():
                with state.lock:
                    state.wal.close()


class IngestServer:
    """TCP listener: one connection per device, one handler thread per
    connection, cumulative ACK after each group-committed batch."""

    def __init__(self, center: IngestCenter, host: str = "127.0.0.1", port: int = 7450):
        self.center = center
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._accept_thread: Optional[threading.Thread] = None
        self._handlers: list[threading.Thread] = []

    def start(self) -> None:
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="ingest-accept", daemon=True
        )
        self._accept_thread.start()
        logger.info("ingest listening on %s:%d", self.host, self.port)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            handler = threading.Thread(
                target=self._serve_client, args=(sock, addr), daemon=True
            )
            handler.start()
            self._handlers.append(handler)

    def _serve_client(self, sock: socket.socket, addr) -> None:
        conn = wire.FrameConn(sock)
        device_id: Optional[int] = None
        try:
            while not self._stop.is_set():
                raw = conn.recv_frame(timeout=0.5)
                if raw is None:
                    continue
                batch = [raw]
                while True:
                    extra = conn.recv_frame(timeout=0)
                    if extra is None:
                        break
                    batch.append(extra)
                device_id = self._handle_batch(conn, batch, device_id)
        except wire.LinkClosed:
            pass
        except (wire.WireError, OSError) as exc:
            logger.warning("session %s closed: %s", addr, exc)
        finally:
            conn.close()

    def _handle_batch(
        self, conn: wire.FrameConn, batch: list[bytes], device_id: Optional[int]
    ) -> Optional[int]:
        cum: Optional[int] = None
        errors: list[bytes] = []
        for raw in batch:
            header, payload = wire.open_frame(raw, self.center.keys)
            if device_id is None:
                device_id = header.device_id
            elif header.device_id != device_id:
                raise wire.WireError("connection carries more than one device")
            ack, err = self.center.process_frame(header, payload)
            if ack is not None:
                cum = ack
            if err is not None:
                errors.append(err)
        if device_id is None:
            return None
        # durability before acknowledgment
        self.center.wal_sync(device_id)
        key = self.center.keys[device_id]
        if cum is not None:
            conn.send_frame(self._center_frame(wire.FrameType.ACK, device_id, wire.encode_u64(cum), key))
        for err in errors:
            conn.send_frame(self._center_frame(wire.FrameType.ERR, device_id, err, key))
        return device_id

    def _center_frame(self, frame_type: wire.FrameType, device_id: int, payload: bytes, key: bytes) -> bytes:
        header = wire.FrameHeader(frame_type, device_id, self.center.center_seq.take())
        return wire.seal_frame(header, payload, key)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2)
        for handler in self._handlers:
            handler.join(timeout=2)
