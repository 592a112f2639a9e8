# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled record codec and aggregation kernels.

Byte-for-byte equivalent to gridmon.kernels.pure; see that module for the
layout description.  The pure module is authoritative for semantics, this
one exists because packing/unpacking and window aggregation sit on every
data path (wire, WAL, segments, rollup).
"""

from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING
from libc.math cimport sqrt
from libc.stdint cimport uint8_t, uint32_t, uint64_t

NAME = "compiled"

DEF _RECORD_SIZE = 134
DEF _VALUE_COUNT = 15

RECORD_SIZE = _RECORD_SIZE
FIELD_COUNT = 19
RMS_VALUE_INDICES = frozenset(range(1, 7))


cdef inline void _put_u32(char *buf, uint32_t v) noexcept:
    buf[0] = <char>((v >> 24) & 0xFF)
    buf[1] = <char>((v >> 16) & 0xFF)
    buf[2] = <char>((v >> 8) & 0xFF)
    buf[3] = <char>(v & 0xFF)


cdef inline void _put_u64(char *buf, uint64_t v) noexcept:
    cdef int i
    for i in range(8):
        buf[i] = <char>((v >> (56 - 8 * i)) & 0xFF)


cdef inline uint32_t _get_u32(const unsigned char *buf) noexcept:
    return (<uint32_t>buf[0] << 24) | (<uint32_t>buf[1] << 16) | \
           (<uint32_t>buf[2] << 8) | <uint32_t>buf[3]


cdef inline uint64_t _get_u64(const unsigned char *buf) noexcept:
    cdef uint64_t v = 0
    cdef int i
    for i in range(8):
        v = (v << 8) | <uint64_t>buf[i]
    return v


cdef inline void _put_f64(char *buf, double d) noexcept:
    _put_u64(buf, (<uint64_t *>&d)[0])


cdef inline double _get_f64(const unsigned char *buf) noexcept:
    cdef uint64_t v = _get_u64(buf)
    return (<double *>&v)[0]


cdef void _pack_into(char *buf, row) except *:
    cdef int i
    _put_u32(buf, <uint32_t>row[0])
    _put_u64(buf + 4, <uint64_t>row[1])
    buf[12] = <char>(<uint8_t>row[2])
    buf[13] = <char>(<uint8_t>row[3])
    for i in range(_VALUE_COUNT):
        _put_f64(buf + 14 + 8 * i, <double>row[4 + i])


def pack_record(row):
    """row = (point_id, ts_ms, resolution_code, flags, *15 values)."""
    out = PyBytes_FromStringAndSize(NULL, _RECORD_SIZE)
    _pack_into(PyBytes_AS_STRING(out), row)
    return out


def pack_records(rows):
    cdef Py_ssize_t n = len(rows)
    out = PyBytes_FromStringAndSize(NULL, n * _RECORD_SIZE)
    cdef char *buf = PyBytes_AS_STRING(out)
    cdef Py_ssize_t i
    for i in range(n):
        _pack_into(buf + i * _RECORD_SIZE, rows[i])
    return out


cdef tuple _unpack_one(const unsigned char *p):
    cdef int code = p[12]
    if code > 3:
        raise ValueError(f"bad resolution code {code}")
    return (
        _get_u32(p),
        _get_u64(p + 4),
        code,
        <int>p[13],
        _get_f64(p + 14),
        _get_f64(p + 22),
        _get_f64(p + 30),
        _get_f64(p + 38),
        _get_f64(p + 46),
        _get_f64(p + 54),
        _get_f64(p + 62),
        _get_f64(p + 70),
        _get_f64(p + 78),
        _get_f64(p + 86),
        _get_f64(p + 94),
        _get_f64(p + 102),
        _get_f64(p + 110),
        _get_f64(p + 118),
        _get_f64(p + 126),
    )


def unpack_record(data, Py_ssize_t offset=0):
    cdef const unsigned char[:] view = data
    if view.shape[0] - offset < _RECORD_SIZE:
        raise ValueError("buffer too short for record")
    return _unpack_one(&view[offset])


def unpack_records(data, Py_ssize_t offset, Py_ssize_t count):
    cdef const unsigned char[:] view = data
    if view.shape[0] - offset < count * _RECORD_SIZE:
        raise ValueError("buffer too short for record batch")
    cdef Py_ssize_t i
    rows = []
    for i in range(count):
        rows.append(_unpack_one(&view[offset + i * _RECORD_SIZE]))
    return rows


def aggregate_values(value_rows):
    """Combine 15-value rows into one window: RMS columns (indices 1..6)
    as square-mean-root, everything else as the arithmetic mean."""
    cdef Py_ssize_t n = len(value_rows)
    if n == 0:
        raise ValueError("cannot aggregate an empty window")
    cdef double[15] acc
    cdef double v
    cdef int i
    for i in range(_VALUE_COUNT):
        acc[i] = 0.0
    for values in value_rows:
        for i in range(_VALUE_COUNT):
            v = <double>values[i]
            acc[i] += v * v if 1 <= i <= 6 else v
    out = [0.0] * _VALUE_COUNT
    for i in range(_VALUE_COUNT):
        v = acc[i] / n
        out[i] = sqrt(v) if 1 <= i <= 6 else v
    return tuple(out)
