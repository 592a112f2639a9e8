"""Immutable on-disk record segments (the cold tier).

File layout, all integers big-endian:

    header   magic "EMSG" | version u8 | resolution_code u8
             | min_ts u64 | max_ts u64 | point_count u32
    body     rows sorted by (point_id, ts_ms), fixed-size wire records
    footer   point_count x (point_id u32 | byte_offset u64 | row_count u32)
    trailer  footer_offset u64 | crc32 u32 over all preceding bytes

Segments are written once (tmp file + fsync + rename) and never modified;
the CRC is verified when a segment is opened.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Iterator, Optional

from gridmon import kernels
from gridmon.model import Resolution

MAGIC = b"EMSG"
VERSION = 1

_HEADER = struct.Struct(">4sBBQQI")
_INDEX_ENTRY = struct.Struct(">IQI")
_TRAILER = struct.Struct(">QI")

_ROW_KEY = struct.Struct(">IQ")  # point_id, ts_ms prefix of a packed row


class SegmentCorrupt(Exception):
    pass


class CrcMismatch(SegmentCorrupt):
    pass


class BadMagic(SegmentCorrupt):
    pass


class BadFooter(SegmentCorrupt):
    pass


def row_key(row: bytes) -> tuple[int, int]:
    """(point_id, ts_ms) of a packed record row."""
    return _ROW_KEY.unpack_from(row)


def write_segment(path: str | Path, resolution: Resolution, rows: list[bytes]) -> Path:
    """Write one segment from packed rows pre-sorted by (point_id, ts_ms).
    The file appears atomically: tmp file, fsync, rename."""
    if not rows:
        raise ValueError("refusing to write an empty segment")
    path = Path(path)
    index: list[tuple[int, int, int]] = []  # point_id, byte_offset, row_count
    min_ts: Optional[int] = None
    max_ts: Optional[int] = None
    prev_key: Optional[tuple[int, int]] = None
    offset = 0
    for row in rows:
        if len(row) != kernels.RECORD_SIZE:
            raise ValueError("row has wrong size")
        point_id, ts = row_key(row)
        key = (point_id, ts)
        if prev_key is not None and key <= prev_key:
            raise ValueError("rows must be strictly sorted by (point_id, ts_ms)")
        prev_key = key
        if not index or index[-1][0] != point_id:
            index.append((point_id, offset, 1))
        else:
            pid, off, count = index[-1]
            index[-1] = (pid, off, count + 1)
        min_ts = ts if min_ts is None else min(min_ts, ts)
        max_ts = ts if max_ts is None else max(max_ts, ts)
        offset += kernels.RECORD_SIZE

    header = _HEADER.pack(MAGIC, VERSION, resolution.code, min_ts, max_ts, len(index))
    footer = b"".join(_INDEX_ENTRY.pack(*entry) for entry in index)
    footer_offset = _HEADER.size + offset
    blob = header + b"".join(rows) + footer + struct.pack(">Q", footer_offset)
    blob += struct.pack(">I", zlib.crc32(blob))

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)
    return path


class Segment:
    """Reader over one immutable segment file.

    The whole file is checksummed once at open; row reads afterwards are
    a seek into the point's block plus a binary search on ts.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        data = self.path.read_bytes()
        if len(data) < _HEADER.size + _TRAILER.size:
            raise BadFooter(f"{path}: file too small")
        (crc,) = struct.unpack_from(">I", data, len(data) - 4)
        if crc != zlib.crc32(data[:-4]):
            raise CrcMismatch(str(path))
        magic, version, res_code, min_ts, max_ts, point_count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagic(str(path))
        if version != VERSION:
            raise BadMagic(f"{path}: unsupported version {version}")
        (footer_offset,) = struct.unpack_from(">Q", data, len(data) - 12)
        footer_end = len(data) - _TRAILER.size
        if (
            footer_offset < _HEADER.size
            or footer_offset > footer_end
            or footer_end - footer_offset != point_count * _INDEX_ENTRY.size
            or (footer_offset - _HEADER.size) % kernels.RECORD_SIZE != 0
        ):
            raise BadFooter(str(path))
        self.resolution = Resolution.from_code(res_code)
        self.min_ts = min_ts
        self.max_ts = max_ts
        self.index: dict[int, tuple[int, int]] = {}
        for i in range(point_count):
            point_id, byte_offset, row_count = _INDEX_ENTRY.unpack_from(
                data, footer_offset + i * _INDEX_ENTRY.size
            )
            self.index[point_id] = (byte_offset, row_count)
        self.row_count = (footer_offset - _HEADER.size) // kernels.RECORD_SIZE

    def overlaps(self, from_ms: int, to_ms: int) -> bool:
        return self.min_ts < to_ms and self.max_ts >= from_ms

    def read_rows(self, point_id: int, from_ms: int, to_ms: int) -> list[bytes]:
        """Packed rows of one point with from_ms <= ts < to_ms, ascending."""
        entry = self.index.get(point_id)
        if entry is None:
            return []
        byte_offset, row_count = entry
        size = kernels.RECORD_SIZE
        with open(self.path, "rb") as fh:
            fh.seek(_HEADER.size + byte_offset)
            block = fh.read(row_count * size)

        def ts_at(i: int) -> int:
            return struct.unpack_from(">Q", block, i * size + 4)[0]

        lo, hi = 0, row_count
        while lo < hi:  # first row with ts >= from_ms
            mid = (lo + hi) // 2
            if ts_at(mid) < from_ms:
                lo = mid + 1
            else:
                hi = mid
        start = lo
        hi = row_count
        while lo < hi:  # first row with ts >= to_ms
            mid = (lo + hi) // 2
            if ts_at(mid) < to_ms:
                lo = mid + 1
            else:
                hi = mid
        return [block[i * size : (i + 1) * size] for i in range(start, lo)]

    def iter_rows(self) -> Iterator[bytes]:
        size = kernels.RECORD_SIZE
        with open(self.path, "rb") as fh:
            fh.seek(_HEADER.size)
            for _ in range(self.row_count):
                yield fh.read(size)
