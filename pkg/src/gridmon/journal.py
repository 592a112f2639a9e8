"""Device-side store-and-forward journal.

Sealed frames are appended (and implicitly sequence-numbered) before they
count as sent; the journal survives restarts and replays everything past
the server's cumulative ack.  A sidecar counter file persists the two
sequence allocators so no seq is ever reused under the device key:

    data frames     1, 2, 3, ...           journaled, replayable
    control frames  2^62 + 1, 2^62 + 2...  HELLO, never journaled

Control seqs are persisted at reservation time because the frame leaves
the process immediately; data seqs are recovered from the log itself
(next = last entry + 1), so appends stay single-write.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from gridmon import logfile
from gridmon.wire import DEVICE_CONTROL_SEQ_BASE


class CorruptJournal(Exception):
    pass


class Journal:
    def __init__(self, directory: str | Path, device_id: int, fsync: bool = False):
        self.device_id = device_id
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._log_path = self._dir / f"{device_id}.log"
        self._ctr_path = self._dir / f"{device_id}.ctr"
        self._fsync = fsync

        floor_data, next_ctrl = self._read_counters()
        try:
            entries, clean = logfile.read_log(self._log_path)
        except logfile.LogCorrupt as exc:
            raise CorruptJournal(str(exc)) from None
        self._entries: list[logfile.LogEntry] = entries
        self._writer = logfile.LogWriter(self._log_path, clean_length=clean, fsync=fsync)
        last_logged = entries[-1].seq if entries else 0
        self._next_data = max(floor_data, last_logged + 1)
        self._next_ctrl = next_ctrl

    def _read_counters(self) -> tuple[int, int]:
        try:
            raw = json.loads(self._ctr_path.read_text())
            return raw["next_data_seq"], raw["next_ctrl_seq"]
        except FileNotFoundError:
            return 1, DEVICE_CONTROL_SEQ_BASE + 1

    def _write_counters(self) -> None:
        tmp = self._ctr_path.with_suffix(".ctr.tmp")
        payload = json.dumps(
            {"next_data_seq": self._next_data, "next_ctrl_seq": self._next_ctrl}
        )
        with open(tmp, "w") as fh:
            fh.write(payload)
            fh.flush()
            if self._fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self._ctr_path)

    # -- sequence allocation ---------------------------------------------

    @property
    def next_data_seq(self) -> int:
        return self._next_data

    @property
    def last_data_seq(self) -> int:
        return self._next_data - 1

    def reserve_ctrl_seq(self) -> int:
        """Allocate a control-frame seq (HELLO); persisted immediately."""
        seq = self._next_ctrl
        self._next_ctrl += 1
        self._write_counters()
        return seq

    # -- frame log ---------------------------------------------------------

    def append(self, seq: int, frame_type: int, frame: bytes) -> None:
        """Record a sealed frame.  seq must be the journal's next data seq;
        the frame is durable (per the fsync policy) once this returns."""
        if seq != self._next_data:
            raise ValueError(f"seq {seq} is not the next data seq {self._next_data}")
        self._writer.append(seq, frame_type, frame)
        self._writer.sync()
        self._entries.append(logfile.LogEntry(seq, frame_type, frame))
        self._next_data = seq + 1

    def trim(self, cum_seq: int) -> int:
        """Drop exactly the entries with seq <= cum_seq (they are durably
        accepted by the center).  Returns the number removed."""
        keep = [e for e in self._entries if e.seq > cum_seq]
        removed = len(self._entries) - len(keep)
        if removed == 0:
            return 0
        self._writer.close()
        tmp = self._log_path.with_suffix(".log.tmp")
        with open(tmp, "wb") as fh:
            for entry in keep:
                fh.write(logfile.encode_entry(entry.seq, entry.entry_type, entry.payload))
            fh.flush()
            if self._fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self._log_path)
        self._entries = keep
        self._writer = logfile.LogWriter(self._log_path, fsync=self._fsync)
        self._write_counters()  # keeps next_data past trimmed seqs if the log is now empty
        return removed

    def replay(self, from_seq: int) -> list[logfile.LogEntry]:
        """All journaled frames with seq > from_seq, in order."""
        return [e for e in self._entries if e.seq > from_seq]

    def unacked(self) -> int:
        return len(self._entries)

    def close(self) -> None:
        self._writer.close()
