"""Framed, authenticated device<->center protocol.

One frame = a 22-byte cleartext header followed by an AES-128-GCM
ciphertext (12-byte nonce derived from device_id||seq, 16-byte tag, the
header authenticated as associated data).  The header stays readable for
routing but any mutation of header or ciphertext fails authentication.

Nonce uniqueness relies on sequence numbers that are never reused under a
key.  Three disjoint seq ranges keep the two directions and the control
frames from colliding:

    device data frames     seq in [1, 2^62)        (journaled counter)
    device control frames  seq in [2^62, 2^63)     (HELLO)
    center frames          seq in [2^63, 2^64)     (ACK/ERR)
"""

from __future__ import annotations

import enum
import struct
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from gridmon import kernels
from gridmon.model import BaseRecord, EventType, PQEvent

MAGIC = b"EMON"
VERSION = 1
HEADER_SIZE = 22
TAG_SIZE = 16
KEY_SIZE = 16
MAX_BATCH_RECORDS = 500
EVENT_SIZE = 30

DEVICE_CONTROL_SEQ_BASE = 1 << 62
CENTER_SEQ_BASE = 1 << 63

# Largest ciphertext we will ever produce is a full record batch; anything
# claiming more is a framing attack or corruption.
MAX_PAYLOAD_LEN = 2 + MAX_BATCH_RECORDS * kernels.RECORD_SIZE + TAG_SIZE + 4096

_HEADER_STRUCT = struct.Struct(">4sBBIQI")
_EVENT_STRUCT = struct.Struct(">IBBQQd")
_U64 = struct.Struct(">Q")
_U16 = struct.Struct(">H")


class FrameType(enum.IntEnum):
    HELLO = 1
    DATA = 2
    EVENT = 3
    ACK = 4
    ERR = 5


class WireError(Exception):
    pass


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class UnknownDevice(WireError):
    pass


class AuthFailed(WireError):
    pass


class Truncated(WireError):
    pass


class FrameTooLarge(WireError):
    pass


class BadResolutionCode(WireError):
    pass


class BadEventType(WireError):
    pass


class CountMismatch(WireError):
    pass


@dataclass(frozen=True, slots=True)
class FrameHeader:
    """Routing fields of one frame.  The on-wire payload length is derived
    from the payload at seal time and is not part of the value."""

    frame_type: int
    device_id: int
    seq: int


def nonce_for(device_id: int, seq: int) -> bytes:
    return device_id.to_bytes(4, "big") + seq.to_bytes(8, "big")


class NonceAudit:
    """Test instrumentation: records every (key, nonce) pair sealed while
    active and collects duplicates."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seen: set[tuple[bytes, bytes]] = set()
        self.duplicates: list[tuple[bytes, bytes]] = []

    def record(self, key: bytes, nonce: bytes) -> None:
        with self._lock:
            pair = (key, nonce)
            if pair in self._seen:
                self.duplicates.append(pair)
            else:
                self._seen.add(pair)

    def __len__(self) -> int:
        return len(self._seen)


_active_audit: Optional[NonceAudit] = None

# AESGCM construction costs about as much as a small decrypt; sessions
# reuse one long-lived key, so cache the cipher objects.
_cipher_cache: dict[bytes, AESGCM] = {}


def _cipher(key: bytes) -> AESGCM:
    cipher = _cipher_cache.get(key)
    if cipher is None:
        if len(key) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes")
        cipher = _cipher_cache[key] = AESGCM(key)
    return cipher


@contextmanager
def audit_nonces():
    """Enable (key, nonce) duplicate tracking for all seal_frame calls in
    this process while the context is active."""
    global _active_audit
    audit = NonceAudit()
    _active_audit = audit
    try:
        yield audit
    finally:
        _active_audit = None


def seal_frame(header: FrameHeader, payload: bytes, key: bytes) -> bytes:
    """Serialize and encrypt one frame.  The caller guarantees the seq has
    never been sealed under this key before."""
    cipher = _cipher(key)
    header_bytes = _HEADER_STRUCT.pack(
        MAGIC,
        VERSION,
        header.frame_type,
        header.device_id,
        header.seq,
        len(payload) + TAG_SIZE,
    )
    nonce = nonce_for(header.device_id, header.seq)
    if _active_audit is not None:
        _active_audit.record(key, nonce)
    ciphertext = cipher.encrypt(nonce, payload, header_bytes)
    return header_bytes + ciphertext


def parse_header(data: bytes) -> tuple[FrameHeader, int]:
    """Parse the 22 cleartext header bytes; returns (header, payload_len).
    Only framing is checked here, authenticity comes from open_frame."""
    if len(data) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, frame_type, device_id, seq, payload_len = _HEADER_STRUCT.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(magic.hex())
    if version != VERSION:
        raise BadVersion(str(version))
    if payload_len < TAG_SIZE:
        raise Truncated(f"payload_len {payload_len} below tag size")
    if payload_len > MAX_PAYLOAD_LEN:
        raise FrameTooLarge(str(payload_len))
    return FrameHeader(frame_type, device_id, seq), payload_len


def open_frame(data: bytes, keys: Mapping[int, bytes]) -> tuple[FrameHeader, bytes]:
    """Parse and authenticate one complete frame."""
    header, payload_len = parse_header(data)
    if len(data) != HEADER_SIZE + payload_len:
        raise Truncated(
            f"frame is {len(data)} bytes, header declares {HEADER_SIZE + payload_len}"
        )
    key = keys.get(header.device_id)
    if key is None:
        raise UnknownDevice(str(header.device_id))
    nonce = nonce_for(header.device_id, header.seq)
    try:
        payload = _cipher(key).decrypt(nonce, data[HEADER_SIZE:], data[:HEADER_SIZE])
    except InvalidTag:
        raise AuthFailed(f"device {header.device_id} seq {header.seq}") from None
    return header, payload


def encode_batch(records: list[BaseRecord]) -> bytes:
    if len(records) > MAX_BATCH_RECORDS:
        raise ValueError(f"batch of {len(records)} exceeds {MAX_BATCH_RECORDS}")
    return _U16.pack(len(records)) + kernels.pack_records([r.to_row() for r in records])


def decode_batch(data: bytes) -> list[BaseRecord]:
    rows = decode_batch_rows(data)
    return [BaseRecord.from_row(row) for row in rows]


def decode_batch_rows(data: bytes) -> list[tuple]:
    """decode_batch without materializing BaseRecord objects."""
    if len(data) < 2:
        raise Truncated("batch shorter than its count field")
    (count,) = _U16.unpack_from(data)
    if count > MAX_BATCH_RECORDS:
        raise CountMismatch(f"count {count} exceeds {MAX_BATCH_RECORDS}")
    expected = 2 + count * kernels.RECORD_SIZE
    if len(data) < expected:
        raise Truncated(f"batch of {count} needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise CountMismatch(f"{len(data) - expected} trailing bytes after {count} records")
    try:
        return kernels.unpack_records(data, 2, count)
    except ValueError as exc:
        raise BadResolutionCode(str(exc)) from None


def encode_event_batch(events: list[PQEvent]) -> bytes:
    out = [_U16.pack(len(events))]
    for e in events:
        out.append(
            _EVENT_STRUCT.pack(
                e.point_id, e.event_type.value, e.phase_mask, e.start_ms, e.end_ms, e.extreme_pu
            )
        )
    return b"".join(out)


def decode_event_batch(data: bytes) -> list[PQEvent]:
    if len(data) < 2:
        raise Truncated("event batch shorter than its count field")
    (count,) = _U16.unpack_from(data)
    expected = 2 + count * EVENT_SIZE
    if len(data) < expected:
        raise Truncated(f"event batch of {count} needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise CountMismatch(f"{len(data) - expected} trailing bytes after {count} events")
    events = []
    for i in range(count):
        point_id, type_code, phase_mask, start_ms, end_ms, extreme = _EVENT_STRUCT.unpack_from(
            data, 2 + i * EVENT_SIZE
        )
        try:
            event_type = EventType.from_code(type_code)
        except ValueError as exc:
            raise BadEventType(str(exc)) from None
        events.append(PQEvent(point_id, event_type, phase_mask, start_ms, end_ms, extreme))
    return events


def encode_u64(value: int) -> bytes:
    """Payload of HELLO (last journaled seq) and ACK (cumulative seq)."""
    return _U64.pack(value)


def decode_u64(data: bytes) -> int:
    if len(data) != 8:
        raise Truncated(f"expected 8-byte payload, got {len(data)}")
    return _U64.unpack(data)[0]


def encode_err(code: int, message: str) -> bytes:
    return _U16.pack(code) + message.encode("utf-8")


def decode_err(data: bytes) -> tuple[int, str]:
    if len(data) < 2:
        raise Truncated("error payload shorter than its code")
    return _U16.unpack_from(data)[0], data[2:].decode("utf-8", errors="replace")


def load_keys(path: str | Path) -> dict[int, bytes]:
    """Read `keys.tsv`: one `device_id<TAB>hex-key` line per device."""
    keys: dict[int, bytes] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                device_field, key_field = line.split("\t")
                device_id = int(device_field)
                key = bytes.fromhex(key_field)
            except ValueError:
                raise ValueError(f"{path}:{line_no}: malformed key line") from None
            if len(key) != KEY_SIZE:
                raise ValueError(f"{path}:{line_no}: key must be {KEY_SIZE} bytes")
            if device_id in keys:
                raise ValueError(f"{path}:{line_no}: duplicate device {device_id}")
            keys[device_id] = key
    return keys


def recv_exact(sock, n: int) -> Optional[bytes]:
    """Read exactly n bytes from a socket.  Returns None on a clean EOF
    before the first byte; raises Truncated on EOF mid-read."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise Truncated(f"connection closed {remaining} bytes short")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Optional[bytes]:
    """Read one complete raw frame (header + ciphertext) off a socket.
    Returns None on clean EOF at a frame boundary."""
    head = recv_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    _, payload_len = parse_header(head)
    body = recv_exact(sock, payload_len)
    if body is None:
        raise Truncated("connection closed before frame payload")
    return head + body


class LinkClosed(WireError):
    """Peer closed the connection."""


class FrameConn:
    """Frame reader/writer over one TCP socket with an internal receive
    buffer, so frames can be drained with a zero timeout without ever
    splitting a partially received frame."""

    def __init__(self, sock):
        self.sock = sock
        self._buf = bytearray()

    def send_frame(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _buffered_frame(self) -> Optional[bytes]:
        if len(self._buf) < HEADER_SIZE:
            return None
        _, payload_len = parse_header(bytes(self._buf[:HEADER_SIZE]))
        total = HEADER_SIZE + payload_len
        if len(self._buf) < total:
            return None
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return frame

    def recv_frame(self, timeout: Optional[float] = None) -> Optional[bytes]:
        """Next complete frame, or None when no frame arrives within the
        timeout (timeout=None blocks; timeout=0 drains what has already
        arrived).  Raises LinkClosed on EOF and Truncated on EOF inside a
        frame.  Partial frames stay buffered across calls."""
        frame = self._buffered_frame()
        if frame is not None:
            return frame
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if deadline is None:
                self.sock.settimeout(None)
            else:
                remaining = deadline - time.monotonic()
                self.sock.settimeout(remaining if remaining > 0 else 1e-6)
            try:
                chunk = self.sock.recv(65536)
            except (TimeoutError, BlockingIOError):
                return None
            if not chunk:
                if self._buf:
                    raise Truncated("connection closed inside a frame")
                raise LinkClosed("connection closed")
            self._buf.extend(chunk)
            frame = self._buffered_frame()
            if frame is not None:
                return frame
            if deadline is not None and time.monotonic() >= deadline:
                return None

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
