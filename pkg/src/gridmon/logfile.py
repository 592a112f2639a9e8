"""Length-prefixed, CRC-protected append-only log.

Shared substrate of the device store-and-forward journal and the server
write-ahead log.  Entry layout:

    length u32 | seq u64 | entry_type u8 | payload | crc32 u32

with length covering seq..payload and the CRC covering the same bytes.
A torn final entry (partial write at the tail) is silently dropped on
read; a CRC failure anywhere before the tail raises LogCorrupt.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

_LEN = struct.Struct(">I")
_BODY_HEAD = struct.Struct(">QB")
_CRC = struct.Struct(">I")

# seq + entry_type; the smallest legal body.
_MIN_BODY = _BODY_HEAD.size

MAX_ENTRY_PAYLOAD = 1 << 22


class LogCorrupt(Exception):
    """CRC failure before the tail of the log."""


@dataclass(frozen=True, slots=True)
class LogEntry:
    seq: int
    entry_type: int
    payload: bytes


def encode_entry(seq: int, entry_type: int, payload: bytes) -> bytes:
    body = _BODY_HEAD.pack(seq, entry_type) + payload
    return _LEN.pack(len(body)) + body + _CRC.pack(zlib.crc32(body))


def read_log(path: str | Path) -> tuple[list[LogEntry], int]:
    """Read every intact entry.  Returns (entries, clean_length) where
    clean_length is the byte offset just past the last intact entry;
    callers may truncate the file to it before appending."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        return [], 0
    entries: list[LogEntry] = []
    pos = 0
    size = len(data)
    while pos < size:
        if size - pos < _LEN.size:
            break  # torn length prefix
        (length,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + length + _CRC.size
        if length < _MIN_BODY or length > MAX_ENTRY_PAYLOAD + _MIN_BODY or end > size:
            break  # torn entry (or a length smashed by one): drop the tail
        body = data[pos + _LEN.size : pos + _LEN.size + length]
        (crc,) = _CRC.unpack_from(data, pos + _LEN.size + length)
        if crc != zlib.crc32(body):
            if end == size:
                break  # torn tail
            raise LogCorrupt(f"{path}: CRC mismatch at offset {pos}")
        seq, entry_type = _BODY_HEAD.unpack_from(body)
        entries.append(LogEntry(seq, entry_type, body[_MIN_BODY:]))
        pos = end
    return entries, pos


class LogWriter:
    """Appender for one log file.  Truncates any torn tail on open so the
    file always ends at an entry boundary."""

    def __init__(self, path: str | Path, clean_length: int | None = None, fsync: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        if clean_length is None:
            _, clean_length = read_log(self.path)
        self._fh = open(self.path, "ab")
        if self._fh.tell() != clean_length:
            self._fh.truncate(clean_length)
        self._dirty = False

    def append(self, seq: int, entry_type: int, payload: bytes) -> None:
        if len(payload) > MAX_ENTRY_PAYLOAD:
            raise ValueError("entry payload too large")
        self._fh.write(encode_entry(seq, entry_type, payload))
        self._dirty = True

    def sync(self) -> None:
        """Flush buffered entries; fsync when configured.  Group-commit
        callers batch several appends per sync."""
        if not self._dirty:
            return
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        self._dirty = False

    def close(self) -> None:
        if not self._fh.closed:
            self.sync()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
