import cmath
import math
import random

import pytest
from hypothesis import given, strategies as st

from conftest import make_record, random_record
from gridmon import pq
from gridmon.model import EventType, PQEvent, RecordFlags, Resolution, validate_record
from gridmon.pq import EventDetector, EventDetectorConfig, Phasor
from oracles import aggregate_reference, detect_events_reference


def sequence_oracle(va, vb, vc):
    """Independent complex-arithmetic decomposition."""
    a = cmath.exp(2j * math.pi / 3)
    zs = [cmath.rect(m, math.radians(d)) for m, d in (va, vb, vc)]
    pos = (zs[0] + a * zs[1] + a * a * zs[2]) / 3
    neg = (zs[0] + a * a * zs[1] + a * zs[2]) / 3
    zero = sum(zs) / 3
    return pos, neg, zero


class TestSymmetricalComponents:
    def test_balanced_system_has_zero_unbalance(self):
        _, _, _, u2 = pq.symmetrical_components(
            Phasor(1, 0), Phasor(1, -120), Phasor(1, 120)
        )
        assert u2 == pytest.approx(0.0, abs=1e-12)

    def test_phase_loss_gives_half(self):
        pos, neg, _ = sequence_oracle((1, 0), (1, -120), (0, 0))
        assert abs(neg) / abs(pos) == pytest.approx(0.5, rel=1e-9)
        _, _, _, u2 = pq.symmetrical_components(Phasor(1, 0), Phasor(1, -120), Phasor(0, 0))
        assert u2 == pytest.approx(0.5, rel=1e-9)

    def test_in_phase_set_is_degenerate(self):
        # oracle: all energy lands in the zero sequence
        pos, _, zero = sequence_oracle((1, 0), (1, 0), (1, 0))
        assert abs(pos) < 1e-12 and abs(zero) == pytest.approx(1.0)
        with pytest.raises(pq.DegenerateSystem):
            pq.symmetrical_components(Phasor(1, 0), Phasor(1, 0), Phasor(1, 0))

    @given(
        st.lists(
            st.tuples(
                st.floats(0.1, 10.0),
                st.floats(-180.0, 179.0),
            ),
            min_size=3,
            max_size=3,
        )
    )
    def test_reconstruction(self, polar):
        phasors = [Phasor(m, d) for m, d in polar]
        try:
            pos, neg, zero, _ = pq.symmetrical_components(*phasors)
        except pq.DegenerateSystem:
            return
        rebuilt = pos.to_complex() + neg.to_complex() + zero.to_complex()
        assert abs(rebuilt - phasors[0].to_complex()) < 1e-10

    @given(
        st.floats(0.1, 5.0),
        st.floats(0.1, 5.0),
        st.floats(0.1, 5.0),
        st.floats(1e-3, 1e3),
    )
    def test_unbalance_scale_invariant(self, ma, mb, mc, scale):
        try:
            _, _, _, u2 = pq.symmetrical_components(
                Phasor(ma, 0), Phasor(mb, -120), Phasor(mc, 120)
            )
            _, _, _, u2s = pq.symmetrical_components(
                Phasor(ma * scale, 0), Phasor(mb * scale, -120), Phasor(mc * scale, 120)
            )
        except pq.DegenerateSystem:
            return
        assert u2s == pytest.approx(u2, rel=1e-12, abs=1e-12)

    def test_phasor_angle_normalization(self):
        assert Phasor(1, 180).angle_deg == -180.0
        assert Phasor(1, 540).angle_deg == -180.0
        assert Phasor(1, -180).angle_deg == -180.0
        assert -180 <= Phasor(1, 359.5).angle_deg < 180

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            Phasor(-1, 0)


class TestThd:
    def test_no_harmonics(self):
        assert pq.thd(100.0, []) == 0.0

    def test_single_harmonic(self):
        assert pq.thd(100.0, [(5, 5.0)]) == pytest.approx(0.05, rel=1e-9)

    def test_two_harmonics(self):
        assert math.sqrt(9 + 16) / 100 == pytest.approx(0.05)
        assert pq.thd(100.0, [(3, 3.0), (4, 4.0)]) == pytest.approx(0.05, rel=1e-9)

    def test_zero_fundamental(self):
        with pytest.raises(pq.ZeroFundamental):
            pq.thd(0.0, [(3, 1.0)])

    def test_order_bounds_and_duplicates(self):
        with pytest.raises(ValueError):
            pq.thd(100.0, [(1, 1.0)])
        with pytest.raises(ValueError):
            pq.thd(100.0, [(51, 1.0)])
        with pytest.raises(ValueError):
            pq.thd(100.0, [(3, 1.0), (3, 2.0)])


class TestPowerTriplet:
    def test_unity_power_factor(self):
        p, q, s = pq.power_triplet([(230, 0), (0, 0), (0, 0)], [(10, 0), (0, 0), (0, 0)])
        assert (p, q, s) == (2300.0, 0.0, 2300.0)

    def test_sixty_degree_lag(self):
        p, q, s = pq.power_triplet([(230, 0), (0, 0), (0, 0)], [(10, -60), (0, 0), (0, 0)])
        assert p == pytest.approx(2300 * math.cos(math.radians(60)), rel=1e-9)
        assert q == pytest.approx(2300 * math.sin(math.radians(60)), rel=1e-9)
        assert p == pytest.approx(1150.0, rel=1e-9)
        assert q == pytest.approx(1991.858428704209, rel=1e-9)
        assert s == pytest.approx(2300.0, rel=1e-9)

    def test_zero_current(self):
        assert pq.power_triplet([(230, 0)] * 3, [(0, 0)] * 3) == (0.0, 0.0, 0.0)

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            pq.power_triplet([(230, 0), (-1, 0), (0, 0)], [(0, 0)] * 3)

    @given(
        st.lists(st.floats(0, 1e3), min_size=6, max_size=6),
        st.lists(st.floats(-180, 180), min_size=6, max_size=6),
    )
    def test_power_inequalities(self, mags, angles):
        v = [(mags[k], angles[k]) for k in range(3)]
        i = [(mags[3 + k], angles[3 + k]) for k in range(3)]
        p, q, s = pq.power_triplet(v, i)
        assert abs(p) <= s * (1 + 1e-12) + 1e-9
        assert abs(q) <= s * (1 + 1e-12) + 1e-9
        assert p * p + q * q <= (s * s) * (1 + 1e-9) + 1e-9

    def test_single_phase_equality(self):
        p, q, s = pq.power_triplet([(230, 10), (0, 0), (0, 0)], [(7, -33), (0, 0), (0, 0)])
        assert p * p + q * q == pytest.approx(s * s, rel=1e-9)


class TestAggregateWindow:
    def test_symmetric_mean(self):
        records = [
            make_record(ts_ms=t * 1000, frequency_hz=f)
            for t, f in ((0, 49.9), (1, 50.0), (2, 50.1))
        ]
        out = pq.aggregate_window(records, Resolution.R3S)
        assert out.frequency_hz == pytest.approx(50.0, rel=1e-12)
        assert out.ts_ms == 0
        assert out.resolution is Resolution.R3S
        assert not out.flags & RecordFlags.INCOMPLETE

    def test_rms_and_incomplete(self):
        records = [
            make_record(ts_ms=0, vrms_pu=(3.0, 1.0, 1.0)),
            make_record(ts_ms=1000, vrms_pu=(4.0, 1.0, 1.0)),
        ]
        out = pq.aggregate_window(records, Resolution.R3S)
        assert out.vrms_pu[0] == pytest.approx(math.sqrt((9 + 16) / 2), rel=1e-12)
        assert out.flags & RecordFlags.INCOMPLETE  # 2 < 3 expected inputs

    def test_full_ten_minute_window(self):
        rng = random.Random(5)
        records = [random_record(rng, ts_ms=t * 3000) for t in range(200)]
        out = pq.aggregate_window(records, Resolution.R10MIN)
        assert out.ts_ms == 0
        assert not out.flags & RecordFlags.INCOMPLETE
        want = aggregate_reference([r.values() for r in records])
        for g, w in zip(out.values(), want):
            assert g == pytest.approx(w, rel=1e-9)

    def test_flag_union(self):
        records = [
            make_record(ts_ms=0, flags=RecordFlags.CLOCK_UNSYNCED),
            make_record(ts_ms=1000),
            make_record(ts_ms=2000),
        ]
        out = pq.aggregate_window(records, Resolution.R3S)
        assert out.flags & RecordFlags.CLOCK_UNSYNCED
        assert not out.flags & RecordFlags.INCOMPLETE

    def test_errors(self):
        with pytest.raises(pq.EmptyWindow):
            pq.aggregate_window([], Resolution.R3S)
        with pytest.raises(pq.MixedKeys):
            pq.aggregate_window(
                [make_record(point_id=1), make_record(point_id=2, ts_ms=1000)],
                Resolution.R3S,
            )
        with pytest.raises(pq.MixedKeys):
            pq.aggregate_window(
                [make_record(), make_record(ts_ms=3000, resolution=Resolution.R3S)],
                Resolution.R10MIN,
            )
        with pytest.raises(pq.OutOfWindow):
            pq.aggregate_window(
                [make_record(ts_ms=0), make_record(ts_ms=3000)], Resolution.R3S
            )
        with pytest.raises(ValueError):
            pq.aggregate_window([make_record(resolution=Resolution.R3S)], Resolution.R1S)

    def test_composition_three_stage_vs_direct(self):
        rng = random.Random(77)
        base = [random_record(rng, resolution=Resolution.R1S, ts_ms=t * 1000) for t in range(600)]
        direct = pq.aggregate_window(base, Resolution.R10MIN)
        staged_3s = [
            pq.aggregate_window(base[i : i + 3], Resolution.R3S) for i in range(0, 600, 3)
        ]
        staged = pq.aggregate_window(staged_3s, Resolution.R10MIN)
        for g, w in zip(staged.values(), direct.values()):
            assert g == pytest.approx(w, rel=1e-9)
        assert staged.ts_ms == direct.ts_ms == 0

    def test_aggregate_of_valid_records_validates(self, registry):
        rng = random.Random(21)
        for _ in range(50):
            records = [
                random_record(rng, point_id=3, resolution=Resolution.R1S, ts_ms=t * 1000)
                for t in range(rng.randint(1, 3))
            ]
            assert all(validate_record(r, registry) is None for r in records)
            out = pq.aggregate_window(records, Resolution.R3S)
            assert validate_record(out, registry) is None


def run_trace(detector, trace):
    events = []
    for ts, vrms in trace:
        events.extend(detector.step(ts, vrms))
    return events


def phase_a_trace(values, step_ms=1000):
    return [((i + 1) * step_ms, (v, 1.0, 1.0)) for i, v in enumerate(values)]


class TestEventDetector:
    def test_simple_sag(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([1.0, 1.0, 0.85, 0.85, 1.0]))
        # starts at the first 0.85 sample, ends at the recovery sample
        assert events == [PQEvent(1, EventType.SAG, 1, 3000, 5000, 0.85)]

    def test_simple_swell(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([1.0, 1.15, 1.0]))
        assert len(events) == 1
        e = events[0]
        assert e.event_type is EventType.SWELL
        assert (e.start_ms, e.end_ms, e.extreme_pu) == (2000, 3000, 1.15)

    def test_hysteresis_holds_event_open(self):
        detector = EventDetector(1)
        events = run_trace(
            detector, phase_a_trace([0.895, 0.905, 0.895, 0.905, 0.895, 0.905])
        )
        assert events == []  # recovery requires >= 0.92
        assert detector.open_phases() == 1

    def test_recovery_exactly_at_band_edge(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([0.85, 0.92]))
        assert len(events) == 1 and events[0].end_ms == 2000

    def test_interruption_escalates_to_sag(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([1.0, 0.05, 0.5, 1.0]))
        assert [e.event_type for e in events] == [EventType.INTERRUPTION, EventType.SAG]
        interruption, sag = events
        assert (interruption.start_ms, interruption.end_ms) == (2000, 3000)
        assert interruption.extreme_pu == 0.05
        assert (sag.start_ms, sag.end_ms) == (3000, 4000)
        assert sag.extreme_pu == 0.5

    def test_interruption_direct_recovery(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([0.05, 1.0]))
        assert [e.event_type for e in events] == [EventType.INTERRUPTION]

    def test_interruption_priority_over_sag(self):
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([0.05, 0.05, 1.0]))
        assert events[0].event_type is EventType.INTERRUPTION
        assert events[0].extreme_pu == 0.05

    def test_sag_does_not_demote_to_interruption(self):
        # a sag that deepens below 0.1 stays one sag event
        detector = EventDetector(1)
        events = run_trace(detector, phase_a_trace([0.5, 0.05, 0.5, 1.0]))
        assert [e.event_type for e in events] == [EventType.SAG]
        assert events[0].extreme_pu == 0.05

    def test_per_phase_events_stay_separate(self):
        detector = EventDetector(1)
        trace = [
            (1000, (0.7, 0.7, 1.0)),
            (2000, (1.0, 0.7, 1.0)),
            (3000, (1.0, 1.0, 1.0)),
        ]
        events = run_trace(detector, trace)
        assert len(events) == 2
        masks = sorted(e.phase_mask for e in events)
        assert masks == [1, 2]
        by_mask = {e.phase_mask: e for e in events}
        assert by_mask[1].end_ms == 2000
        assert by_mask[2].end_ms == 3000

    def test_non_monotonic_ts_rejected(self):
        detector = EventDetector(1)
        detector.step(1000, (1.0, 1.0, 1.0))
        with pytest.raises(pq.NonMonotonicTimestamp):
            detector.step(1000, (1.0, 1.0, 1.0))

    def test_event_invariants_hold(self):
        detector = EventDetector(1)
        rng = random.Random(3)
        values = [rng.choice([1.0, 0.85, 0.5, 0.05, 1.2, 0.95]) for _ in range(500)]
        events = run_trace(detector, phase_a_trace(values))
        for e in events:
            assert e.start_ms < e.end_ms
            if e.event_type is EventType.SAG:
                assert e.extreme_pu < 0.9
            elif e.event_type is EventType.SWELL:
                assert e.extreme_pu > 1.1
            else:
                assert e.extreme_pu < 0.1
        # non-overlap per (phase, type)
        by_type = {}
        for e in events:
            by_type.setdefault(e.event_type, []).append(e)
        for group in by_type.values():
            for prev, cur in zip(group, group[1:]):
                assert prev.end_ms <= cur.start_ms

    def test_matches_reference_scan(self):
        cfg = EventDetectorConfig()
        rng = random.Random(97)
        for _ in range(50):
            values = [
                rng.choice([1.0, 0.99, 0.91, 0.89, 0.5, 0.11, 0.09, 0.05, 1.09, 1.11, 1.3])
                for _ in range(rng.randint(5, 120))
            ]
            trace = [((i + 1) * 1000, v) for i, v in enumerate(values)]
            expected = detect_events_reference(1, trace, cfg)
            detector = EventDetector(1, cfg)
            got = run_trace(detector, [(ts, (v, 1.0, 1.0)) for ts, v in trace])
            assert got == expected

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            EventDetectorConfig(hysteresis_pu=0.0)
        with pytest.raises(ValueError):
            EventDetectorConfig(interruption_threshold_pu=0.89)
        with pytest.raises(ValueError):
            EventDetectorConfig(swell_threshold_pu=0.8)
