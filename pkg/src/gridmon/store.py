"""Two-tier record store: an in-memory hot tier for recent data and
immutable disk segments for history, queried as one.

Records live as packed wire rows throughout (the hot tier holds bytes,
segments hold the same bytes), so tier moves never re-encode and range
queries can be compared byte-for-byte against a flat reference.

Concurrency: one store-wide lock serializes inserts, queries, demotion
and purges.  At desk scale every operation is short, so the lock keeps
range queries trivially snapshot-consistent; demotion swaps a segment
into the catalog before dropping hot rows, and the hot tier wins ts
collisions, so no query can observe a record missing from both tiers.
"""

from __future__ import annotations

import bisect
import logging
import threading
from pathlib import Path
from typing import Optional, Sequence

from gridmon import kernels, logfile, segment as seg
from gridmon.model import BaseRecord, EventType, PQEvent, PointRegistry, Resolution
from gridmon.wire import encode_event_batch, decode_event_batch

logger = logging.getLogger(__name__)

DEFAULT_HOT_WINDOW_MS = 48 * 3600 * 1000

_EVENT_LOG_ENTRY = 1


class UnknownPoint(KeyError):
    pass


class _HotPartition:
    """Time-ordered packed rows of one (point, resolution)."""

    __slots__ = ("ts_list", "rows")

    def __init__(self):
        self.ts_list: list[int] = []
        self.rows: dict[int, bytes] = {}

    def put(self, ts: int, row: bytes) -> None:
        if ts not in self.rows:
            if self.ts_list and ts > self.ts_list[-1]:
                self.ts_list.append(ts)
            else:
                bisect.insort(self.ts_list, ts)
        self.rows[ts] = row

    def range(self, from_ms: int, to_ms: int) -> list[tuple[int, bytes]]:
        lo = bisect.bisect_left(self.ts_list, from_ms)
        hi = bisect.bisect_left(self.ts_list, to_ms)
        return [(ts, self.rows[ts]) for ts in self.ts_list[lo:hi]]

    def watermark(self) -> Optional[int]:
        return self.ts_list[0] if self.ts_list else None

    def __len__(self) -> int:
        return len(self.ts_list)


class TieredStore:
    def __init__(self, data_dir: str | Path, registry: PointRegistry):
        self.data_dir = Path(data_dir)
        self.registry = registry
        self._lock = threading.RLock()
        self._hot: dict[tuple[int, int], _HotPartition] = {}
        self._segments: dict[int, list[seg.Segment]] = {r.code: [] for r in Resolution}
        self._segment_seq = 0
        self._scan_segments()

    def _scan_segments(self) -> None:
        base = self.data_dir / "segments"
        for resolution in Resolution:
            res_dir = base / resolution.label
            if not res_dir.is_dir():
                continue
            for path in sorted(res_dir.glob("seg-*.emsg")):
                opened = seg.Segment(path)
                self._segments[resolution.code].append(opened)
                self._segment_seq += 1
        total = sum(len(v) for v in self._segments.values())
        if total:
            logger.info("segment catalog: %d segment(s)", total)

    # -- writes ---------------------------------------------------------

    def insert(self, record: BaseRecord) -> None:
        self.insert_packed(kernels.pack_record(record.to_row()))

    def insert_packed(self, row: bytes) -> None:
        """Insert one packed wire row; overwrites any record already at
        the same (point, resolution, ts)."""
        point_id, ts = seg.row_key(row)
        res_code = row[12]
        with self._lock:
            part = self._hot.get((point_id, res_code))
            if part is None:
                part = self._hot[(point_id, res_code)] = _HotPartition()
            part.put(ts, row)

    # -- queries --------------------------------------------------------

    def query_range(
        self, point_id: int, resolution: Resolution, from_ms: int, to_ms: int
    ) -> list[BaseRecord]:
        rows = self.query_rows(point_id, resolution, from_ms, to_ms)
        return [BaseRecord.from_row(kernels.unpack_record(r)) for r in rows]

    def query_rows(
        self, point_id: int, resolution: Resolution, from_ms: int, to_ms: int
    ) -> list[bytes]:
        """Packed rows with from_ms <= ts < to_ms, ascending, merged
        across both tiers with the hot tier winning ts collisions."""
        if point_id not in self.registry:
            raise UnknownPoint(point_id)
        if from_ms > to_ms:
            raise ValueError("from_ms must not exceed to_ms")
        with self._lock:
            part = self._hot.get((point_id, resolution.code))
            overlapping = [
                s for s in self._segments[resolution.code] if s.overlaps(from_ms, to_ms)
            ]
            if not overlapping:
                # hot-only: the partition is already ascending and unique
                return [row for _, row in part.range(from_ms, to_ms)] if part else []
            merged: dict[int, bytes] = {}
            for segment in overlapping:
                for row in segment.read_rows(point_id, from_ms, to_ms):
                    merged[seg.row_key(row)[1]] = row
            if part is not None:
                for ts, row in part.range(from_ms, to_ms):
                    merged[ts] = row
            return [merged[ts] for ts in sorted(merged)]

    # -- tier maintenance -----------------------------------------------

    def demote(self, cutoff_ms: int) -> list[Path]:
        """Move every hot record with ts < cutoff_ms into new segments
        (one per resolution per call).  The segment joins the catalog
        before its rows leave the hot tier, so concurrent queries never
        lose sight of a record; a crash in between only leaves a harmless
        hot/cold duplicate that the merge rule resolves."""
        written: list[Path] = []
        with self._lock:
            by_resolution: dict[int, list[bytes]] = {}
            for (point_id, res_code), part in self._hot.items():
                idx = bisect.bisect_left(part.ts_list, cutoff_ms)
                if idx:
                    rows = by_resolution.setdefault(res_code, [])
                    for ts in part.ts_list[:idx]:
                        rows.append(part.rows[ts])
            for res_code, rows in sorted(by_resolution.items()):
                resolution = Resolution.from_code(res_code)
                rows.sort(key=seg.row_key)
                path = self._segment_path(resolution, rows)
                seg.write_segment(path, resolution, rows)
                self._segments[res_code].append(seg.Segment(path))
                written.append(path)
                # Rows are durable in the catalog; now drop them from hot.
                for part in [
                    p for (pid, rc), p in self._hot.items() if rc == res_code
                ]:
                    idx = bisect.bisect_left(part.ts_list, cutoff_ms)
                    for ts in part.ts_list[:idx]:
                        del part.rows[ts]
                    del part.ts_list[:idx]
        if written:
            logger.info("demoted below %d into %d segment(s)", cutoff_ms, len(written))
        return written

    def _segment_path(self, resolution: Resolution, rows: Sequence[bytes]) -> Path:
        res_dir = self.data_dir / "segments" / resolution.label
        res_dir.mkdir(parents=True, exist_ok=True)
        min_ts = min(seg.row_key(r)[1] for r in rows)
        self._segment_seq += 1
        return res_dir / f"seg-{resolution.label}-{min_ts}-{self._segment_seq}.emsg"

    def retention_purge(self, keep_days: int, now_ms: int) -> list[Path]:
        """Delete whole segments whose newest record is older than the
        cutoff; segments straddling it are kept entirely."""
        if keep_days < 1:
            raise ValueError("keep_days must be >= 1")
        cutoff = now_ms - keep_days * 86_400_000
        deleted: list[Path] = []
        with self._lock:
            for res_code, segments in self._segments.items():
                keep = []
                for segment in segments:
                    if segment.max_ts < cutoff:
                        segment.path.unlink()
                        deleted.append(segment.path)
                    else:
                        keep.append(segment)
                self._segments[res_code] = keep
        if deleted:
            logger.info("retention purged %d segment(s)", len(deleted))
        return deleted

    # -- stats ----------------------------------------------------------

    def hot_record_count(self) -> int:
        with self._lock:
            return sum(len(p) for p in self._hot.values())

    def segment_count(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._segments.values())


class EventStore:
    """Append-only power-quality event log with an in-memory index.

    Events identical in (point, type, phase_mask, start, end) are stored
    once, which makes redelivered event frames idempotent.
    """

    def __init__(self, path: str | Path, fsync: bool = False):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._by_point: dict[int, list[PQEvent]] = {}
        self._keys: set[tuple] = set()
        self._count = 0
        entries, clean = logfile.read_log(self.path)
        for entry in entries:
            if entry.entry_type != _EVENT_LOG_ENTRY:
                continue
            for event in decode_event_batch(entry.payload):
                self._index(event)
        self._writer = logfile.LogWriter(self.path, clean_length=clean, fsync=fsync)
        self._next_seq = len(entries) + 1

    def _index(self, event: PQEvent) -> bool:
        key = event.dedup_key()
        if key in self._keys:
            return False
        self._keys.add(key)
        self._by_point.setdefault(event.point_id, []).append(event)
        self._count += 1
        return True

    def insert(self, event: PQEvent) -> bool:
        """Returns True when the event is new, False for a duplicate."""
        with self._lock:
            if not self._index(event):
                return False
            self._writer.append(self._next_seq, _EVENT_LOG_ENTRY, encode_event_batch([event]))
            self._next_seq += 1
            self._writer.sync()
            return True

    def query(
        self,
        point_id: int,
        from_ms: int,
        to_ms: int,
        event_type: Optional[EventType] = None,
    ) -> list[PQEvent]:
        """Events of one point overlapping [from_ms, to_ms), ascending by
        start time."""
        with self._lock:
            events = [
                e
                for e in self._by_point.get(point_id, [])
                if e.overlaps(from_ms, to_ms)
                and (event_type is None or e.event_type is event_type)
            ]
        events.sort(key=lambda e: (e.start_ms, e.end_ms, e.event_type.value, e.phase_mask))
        return events

    def count(self) -> int:
        with self._lock:
            return self._count

    def close(self) -> None:
        self._writer.close()
