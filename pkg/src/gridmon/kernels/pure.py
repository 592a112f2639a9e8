"""Pure-Python record codec and aggregation kernels.

Fallback twin of the compiled `_ckernels` extension: identical functions,
identical bytes out.  `gridmon.kernels` picks one of the two at import.
"""

from __future__ import annotations

import math
import struct

NAME = "pure"

# Fixed wire layout of one record:
#   point_id u32 | ts_ms u64 | resolution_code u8 | flags u8 | 15 x f64,
# all big-endian.  Value order matches gridmon.model.VALUE_NAMES.
RECORD_STRUCT = struct.Struct(">IQBB15d")
RECORD_SIZE = RECORD_STRUCT.size  # 134
FIELD_COUNT = 19

# Value indices aggregated as sqrt(mean of squares); the rest average
# arithmetically.  1..6 = the per-phase voltage and current RMS columns.
RMS_VALUE_INDICES = frozenset(range(1, 7))


def pack_record(row: tuple) -> bytes:
    """row = (point_id, ts_ms, resolution_code, flags, *15 values)."""
    return RECORD_STRUCT.pack(*row)


def pack_records(rows: list) -> bytes:
    return b"".join(RECORD_STRUCT.pack(*row) for row in rows)


def unpack_record(data, offset: int = 0) -> tuple:
    if len(data) - offset < RECORD_SIZE:
        raise ValueError("buffer too short for record")
    row = RECORD_STRUCT.unpack_from(data, offset)
    if row[2] > 3:
        raise ValueError(f"bad resolution code {row[2]}")
    return row

def unpack_records(data, offset: int, count: int) -> list:
    if len(data) - offset < count * RECORD_SIZE:
        raise ValueError("buffer too short for record batch")
    rows = []
    for i in range(count):
        rows.append(unpack_record(data, offset + i * RECORD_SIZE))
    return rows


def aggregate_values(value_rows: list) -> tuple:
    """Combine 15-value rows into one window: RMS columns as
    square-mean-root, everything else as the arithmetic mean."""
    n = len(value_rows)
    if n == 0:
        raise ValueError("cannot aggregate an empty window")
    acc = [0.0] * 15
    for values in value_rows:
        for i in range(15):
            v = values[i]
            acc[i] += v * v if i in RMS_VALUE_INDICES else v
    out = [0.0] * 15
    for i in range(15):
        m = acc[i] / n
        out[i] = math.sqrt(m) if i in RMS_VALUE_INDICES else m
    return tuple(out)
