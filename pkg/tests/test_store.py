import random

import pytest

from conftest import make_points, random_record
from gridmon import kernels, segment
from gridmon.model import EventType, PQEvent, PointRegistry, Resolution
from gridmon.store import EventStore, TieredStore, UnknownPoint
from oracles import FlatStoreReference


@pytest.fixture
def store(tmp_path, registry):
    return TieredStore(tmp_path, registry)


def rec(rng, point_id=1, ts_ms=0, resolution=Resolution.R3S):
    return random_record(rng, point_id=point_id, resolution=resolution, ts_ms=ts_ms)


class TestInsertQuery:
    def test_read_your_write(self, store):
        rng = random.Random(1)
        record = rec(rng, ts_ms=3000)
        store.insert(record)
        assert store.query_range(1, Resolution.R3S, 3000, 3001) == [record]

    def test_last_writer_wins(self, store):
        rng = random.Random(2)
        first, second = rec(rng, ts_ms=3000), rec(rng, ts_ms=3000)
        store.insert(first)
        store.insert(second)
        assert store.query_range(1, Resolution.R3S, 0, 10**12) == [second]
        assert store.hot_record_count() == 1

    def test_random_insert_order_returns_ascending(self, store):
        rng = random.Random(3)
        ts_values = [t * 3000 for t in range(50)]
        rng.shuffle(ts_values)
        for ts in ts_values:
            store.insert(rec(rng, ts_ms=ts))
        got = store.query_range(1, Resolution.R3S, 0, 10**12)
        assert [r.ts_ms for r in got] == sorted(ts_values)

    def test_empty_and_half_open(self, store):
        assert store.query_range(1, Resolution.R3S, 0, 10**12) == []
        rng = random.Random(4)
        store.insert(rec(rng, ts_ms=3000))
        assert store.query_range(1, Resolution.R3S, 3000, 3000) == []
        assert store.query_range(1, Resolution.R3S, 0, 3000) == []
        assert len(store.query_range(1, Resolution.R3S, 3000, 6000)) == 1

    def test_unknown_point(self, store):
        with pytest.raises(UnknownPoint):
            store.query_range(999, Resolution.R3S, 0, 1)

    def test_bad_range(self, store):
        with pytest.raises(ValueError):
            store.query_range(1, Resolution.R3S, 10, 0)

    def test_resolutions_are_isolated(self, store):
        rng = random.Random(5)
        store.insert(rec(rng, ts_ms=3000, resolution=Resolution.R3S))
        store.insert(rec(rng, ts_ms=3000, resolution=Resolution.R1S))
        assert len(store.query_range(1, Resolution.R3S, 0, 10**9)) == 1
        assert len(store.query_range(1, Resolution.R1S, 0, 10**9)) == 1
        assert len(store.query_range(1, Resolution.R10MIN, 0, 10**9)) == 0


class TestDemote:
    def test_query_unchanged_after_demote(self, store):
        rng = random.Random(6)
        for point in (1, 2):
            for t in range(40):
                store.insert(rec(rng, point_id=point, ts_ms=t * 3000))
        before = {
            p: store.query_rows(p, Resolution.R3S, 0, 10**12) for p in (1, 2)
        }
        written = store.demote(cutoff_ms=60_000)
        assert len(written) == 1
        assert store.hot_record_count() == 2 * 20
        assert store.segment_count() == 1
        for p in (1, 2):
            assert store.query_rows(p, Resolution.R3S, 0, 10**12) == before[p]

    def test_demote_nothing_old(self, store):
        rng = random.Random(7)
        store.insert(rec(rng, ts_ms=9000))
        assert store.demote(cutoff_ms=9000) == []
        assert store.segment_count() == 0

    def test_demote_multiple_resolutions(self, store):
        rng = random.Random(8)
        store.insert(rec(rng, ts_ms=3000, resolution=Resolution.R3S))
        store.insert(rec(rng, ts_ms=1000, resolution=Resolution.R1S))
        written = store.demote(cutoff_ms=10**9)
        assert len(written) == 2
        assert store.hot_record_count() == 0

    def test_hot_wins_over_cold_duplicate(self, store, tmp_path):
        """Crash between segment write and hot removal leaves the record
        in both tiers; the hot copy must win."""
        rng = random.Random(9)
        stale = rec(rng, ts_ms=3000)
        fresh = rec(rng, ts_ms=3000)
        seg_dir = tmp_path / "segments" / "3s"
        seg_dir.mkdir(parents=True)
        segment.write_segment(
            seg_dir / "seg-3s-3000-1.emsg",
            Resolution.R3S,
            [kernels.pack_record(stale.to_row())],
        )
        reopened = TieredStore(tmp_path, store.registry)
        assert reopened.query_range(1, Resolution.R3S, 0, 10**9) == [stale]
        reopened.insert(fresh)  # WAL replay would re-insert the newer copy
        assert reopened.query_range(1, Resolution.R3S, 0, 10**9) == [fresh]

    def test_segments_survive_restart(self, store, tmp_path, registry):
        rng = random.Random(10)
        for t in range(10):
            store.insert(rec(rng, ts_ms=t * 3000))
        store.demote(cutoff_ms=10**9)
        reopened = TieredStore(tmp_path, registry)
        assert reopened.segment_count() == 1
        assert len(reopened.query_range(1, Resolution.R3S, 0, 10**9)) == 10

    def test_segment_files_immutable_after_demote(self, store, tmp_path):
        rng = random.Random(11)
        for t in range(10):
            store.insert(rec(rng, ts_ms=t * 3000))
        (path,) = store.demote(cutoff_ms=10**9)
        blob = path.read_bytes()
        for t in range(10, 20):
            store.insert(rec(rng, ts_ms=t * 3000))
        store.demote(cutoff_ms=2 * 10**9)
        assert path.read_bytes() == blob


class TestRetention:
    def _fill_and_demote(self, store, rng, day, point_id=1):
        base = day * 86_400_000
        for t in range(5):
            store.insert(rec(rng, point_id=point_id, ts_ms=base + t * 3000))
        store.demote(cutoff_ms=base + 10**6)

    def test_nothing_newer_deleted(self, store):
        rng = random.Random(12)
        self._fill_and_demote(store, rng, day=100)
        assert store.retention_purge(keep_days=7, now_ms=101 * 86_400_000) == []
        assert store.segment_count() == 1

    def test_expired_segment_deleted(self, store):
        rng = random.Random(13)
        self._fill_and_demote(store, rng, day=1)
        deleted = store.retention_purge(keep_days=7, now_ms=30 * 86_400_000)
        assert len(deleted) == 1
        assert store.segment_count() == 0
        assert not deleted[0].exists()
        assert store.query_range(1, Resolution.R3S, 0, 10**12) == []

    def test_straddling_segment_kept(self, store):
        rng = random.Random(14)
        cutoff_day = 10
        base = cutoff_day * 86_400_000
        store.insert(rec(rng, ts_ms=base - 3000))
        store.insert(rec(rng, ts_ms=base + 3000))
        store.demote(cutoff_ms=10**15)
        assert store.retention_purge(keep_days=1, now_ms=base + 86_400_000) == []
        assert len(store.query_range(1, Resolution.R3S, 0, 10**15)) == 2

    def test_keep_days_validation(self, store):
        with pytest.raises(ValueError):
            store.retention_purge(keep_days=0, now_ms=0)


class TestOracleEquivalence:
    def test_randomized_interleaving(self, tmp_path):
        points = make_points(4)
        registry = PointRegistry(points)
        store = TieredStore(tmp_path, registry)
        reference = FlatStoreReference()
        rng = random.Random(4242)
        resolutions = [Resolution.R1S, Resolution.R3S]
        max_seen = 0
        for _ in range(4000):
            op = rng.random()
            if op < 0.7:
                point = rng.choice(points).point_id
                resolution = rng.choice(resolutions)
                ts = rng.randrange(0, 400) * resolution.duration_ms
                row = kernels.pack_record(
                    random_record(rng, point_id=point, resolution=resolution, ts_ms=ts).to_row()
                )
                store.insert_packed(row)
                reference.insert(row)
                max_seen = max(max_seen, ts)
            elif op < 0.95:
                point = rng.choice(points).point_id
                resolution = rng.choice(resolutions)
                a = rng.randrange(0, 500) * resolution.duration_ms
                b = rng.randrange(0, 500) * resolution.duration_ms
                lo, hi = min(a, b), max(a, b)
                assert store.query_rows(point, resolution, lo, hi) == reference.query(
                    point, resolution.code, lo, hi
                )
            else:
                store.demote(cutoff_ms=rng.randrange(0, max_seen + 2))
        for point in (p.point_id for p in points):
            for resolution in resolutions:
                assert store.query_rows(point, resolution, 0, 10**15) == reference.query(
                    point, resolution.code, 0, 10**15
                )


class TestEventStore:
    def _event(self, point=1, start=1000, end=2000, etype=EventType.SAG, mask=1, extreme=0.5):
        return PQEvent(point, etype, mask, start, end, extreme)

    def test_insert_query(self, tmp_path):
        events = EventStore(tmp_path / "events.log")
        e = self._event()
        assert events.insert(e)
        assert events.query(1, 0, 10**9) == [e]
        assert events.query(2, 0, 10**9) == []

    def test_duplicate_stored_once(self, tmp_path):
        events = EventStore(tmp_path / "events.log")
        e = self._event()
        assert events.insert(e)
        assert not events.insert(e)
        assert events.count() == 1

    def test_overlap_semantics(self, tmp_path):
        events = EventStore(tmp_path / "events.log")
        e = self._event(start=1000, end=2000)
        events.insert(e)
        assert events.query(1, 1500, 3000) == [e]  # straddles `from`
        assert events.query(1, 2000, 3000) == []
        assert events.query(1, 0, 1000) == []

    def test_type_filter(self, tmp_path):
        events = EventStore(tmp_path / "events.log")
        sag = self._event()
        swell = self._event(start=5000, end=6000, etype=EventType.SWELL, extreme=1.2)
        events.insert(sag)
        events.insert(swell)
        assert events.query(1, 0, 10**9, EventType.SWELL) == [swell]
        assert events.query(1, 0, 10**9) == [sag, swell]

    def test_persistence_across_reopen(self, tmp_path):
        path = tmp_path / "events.log"
        events = EventStore(path)
        e1 = self._event()
        e2 = self._event(start=7000, end=9000, mask=2)
        events.insert(e1)
        events.insert(e2)
        events.close()
        reopened = EventStore(path)
        assert reopened.query(1, 0, 10**9) == [e1, e2]
        assert not reopened.insert(e1)
        assert reopened.count() == 2
