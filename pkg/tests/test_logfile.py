import random

import pytest
from hypothesis import given, settings, strategies as st

from gridmon import logfile


def write_entries(path, entries, fsync=False):
    with logfile.LogWriter(path, fsync=fsync) as writer:
        for seq, entry_type, payload in entries:
            writer.append(seq, entry_type, payload)


class TestRoundTrip:
    def test_append_read(self, tmp_path):
        path = tmp_path / "a.log"
        entries = [(1, 2, b"alpha"), (2, 3, b""), (3, 2, b"x" * 1000)]
        write_entries(path, entries)
        got, clean = logfile.read_log(path)
        assert [(e.seq, e.entry_type, e.payload) for e in got] == entries
        assert clean == path.stat().st_size

    def test_missing_file(self, tmp_path):
        assert logfile.read_log(tmp_path / "none.log") == ([], 0)

    def test_payload_size_limit(self, tmp_path):
        with logfile.LogWriter(tmp_path / "a.log") as writer:
            with pytest.raises(ValueError):
                writer.append(1, 1, b"x" * (logfile.MAX_ENTRY_PAYLOAD + 1))


class TestTornTail:
    def test_truncation_at_every_offset(self, tmp_path):
        path = tmp_path / "a.log"
        entries = [(i, 2, bytes([i]) * (i * 3)) for i in range(1, 6)]
        write_entries(path, entries)
        blob = path.read_bytes()
        boundaries = []
        pos = 0
        for seq, entry_type, payload in entries:
            pos += len(logfile.encode_entry(seq, entry_type, payload))
            boundaries.append(pos)
        for cut in range(len(blob) + 1):
            trimmed = tmp_path / "cut.log"
            trimmed.write_bytes(blob[:cut])
            got, clean = logfile.read_log(trimmed)
            expected_n = sum(1 for b in boundaries if b <= cut)
            assert len(got) == expected_n, f"cut at {cut}"
            assert clean == (boundaries[expected_n - 1] if expected_n else 0)

    def test_writer_truncates_torn_tail(self, tmp_path):
        path = tmp_path / "a.log"
        write_entries(path, [(1, 2, b"alpha"), (2, 2, b"beta")])
        size = path.stat().st_size
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00\x10partial")
        with logfile.LogWriter(path) as writer:
            writer.append(3, 2, b"gamma")
        got, _ = logfile.read_log(path)
        assert [e.seq for e in got] == [1, 2, 3]
        assert path.stat().st_size == size + len(logfile.encode_entry(3, 2, b"gamma"))


class TestCorruption:
    def test_midfile_crc_failure_raises(self, tmp_path):
        path = tmp_path / "a.log"
        write_entries(path, [(1, 2, b"alpha"), (2, 2, b"beta")])
        blob = bytearray(path.read_bytes())
        blob[7] ^= 0xFF  # inside the first entry's body
        path.write_bytes(bytes(blob))
        with pytest.raises(logfile.LogCorrupt):
            logfile.read_log(path)

    def test_tail_crc_failure_dropped(self, tmp_path):
        path = tmp_path / "a.log"
        write_entries(path, [(1, 2, b"alpha"), (2, 2, b"beta")])
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF  # the final entry's CRC byte
        path.write_bytes(bytes(blob))
        got, clean = logfile.read_log(path)
        assert [e.seq for e in got] == [1]


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.binary(max_size=40), min_size=0, max_size=8),
    st.integers(min_value=0, max_value=600),
)
def test_truncation_prefix_property(tmp_path_factory, payloads, cut):
    tmp = tmp_path_factory.mktemp("log")
    path = tmp / "p.log"
    entries = [(i + 1, 1, p) for i, p in enumerate(payloads)]
    write_entries(path, entries)
    blob = path.read_bytes()
    path.write_bytes(blob[: min(cut, len(blob))])
    got, _ = logfile.read_log(path)
    assert [(e.seq, e.payload) for e in got] == [(s, p) for s, _, p in entries][: len(got)]
