"""Benchmarks: end-to-end ingest throughput, store query latency, and a
compiled-vs-pure kernel comparison."""

from __future__ import annotations

import random
import statistics
import tempfile
import time
from pathlib import Path

from gridmon import kernels
from gridmon.config import ServerConfig
from gridmon.device import DeviceSpec, Scenario, run_fleet
from gridmon.model import Resolution
from gridmon.server import CenterServer


def _percentiles(samples: list[float]) -> dict[str, float]:
    ordered = sorted(samples)

    def pct(p: float) -> float:
        idx = min(len(ordered) - 1, max(0, round(p / 100 * (len(ordered) - 1))))
        return ordered[idx]

    return {"p50": pct(50), "p95": pct(95), "p99": pct(99)}


def _write_fleet_files(workdir: Path, devices: int) -> tuple[Path, Path, Path]:
    rng = random.Random(1234)
    points = workdir / "points.csv"
    keys = workdir / "keys.tsv"
    tokens = workdir / "tokens.tsv"
    with open(points, "w") as fh:
        fh.write("point_id,name,nominal_voltage_v,nominal_frequency_hz\n")
        for i in range(1, devices + 1):
            fh.write(f"{i},bench-{i},230.0,50.0\n")
    with open(keys, "w") as fh:
        for i in range(1, devices + 1):
            fh.write(f"{i}\t{rng.randbytes(16).hex()}\n")
    tokens.write_text("bench-token\tREAD,EXPORT,IMPORT\tALL\n")
    return points, keys, tokens


def ingest_bench(devices: int = 20, minutes: int = 2) -> list[str]:
    """Run a synthetic fleet against an in-process center on loopback and
    report ingest throughput plus hot-tier query latency percentiles."""
    lines = [f"ingest bench: {devices} device(s), {minutes} simulated minute(s)"]
    with tempfile.TemporaryDirectory(prefix="gridmon-bench-") as tmp:
        workdir = Path(tmp)
        points_file, keys_file, tokens_file = _write_fleet_files(workdir, devices)
        config = ServerConfig(
            listen_port=0,
            http_port=0,
            data_dir=str(workdir / "data"),
            wal_dir=str(workdir / "wal"),
            points_file=str(points_file),
            keys_file=str(keys_file),
            tokens_file=str(tokens_file),
            rollup_grace_ms=0,
        )
        server = CenterServer(config)
        server.start()
        try:
            scenario = Scenario(
                seed=7,
                duration_s=minutes * 60,
                devices=tuple(DeviceSpec(i) for i in range(1, devices + 1)),
            )
            points = {p.point_id: p for p in server.registry}
            started = time.perf_counter()
            stats = run_fleet(
                scenario,
                points,
                server.keys,
                ("127.0.0.1", server.ingest_port),
                workdir / "journal",
                flush_timeout=60.0,
            )
            elapsed = time.perf_counter() - started
            frames = sum(s.frames_sent for s in stats)
            records = server.center.counters.snapshot()["records_inserted"]
            lines.append(
                f"  fleet wall time {elapsed:.2f}s, {frames} frames "
                f"({frames / elapsed:,.0f}/s), {records} records ({records / elapsed:,.0f}/s)"
            )
            lines.append(f"  flushed {sum(1 for s in stats if s.flushed)}/{len(stats)} devices")

            rng = random.Random(99)
            span_ms = minutes * 60 * 1000
            latencies = []
            for _ in range(200):
                point = rng.randrange(1, devices + 1)
                t0 = time.perf_counter()
                server.store.query_range(point, Resolution.R3S, 0, span_ms)
                latencies.append((time.perf_counter() - t0) * 1000)
            pct = _percentiles(latencies)
            lines.append(
                "  full-range R3S query latency: "
                f"p50 {pct['p50']:.3f} ms, p95 {pct['p95']:.3f} ms, p99 {pct['p99']:.3f} ms"
            )
        finally:
            server.stop()
    return lines


def _bench_backend(backend, rows, value_rows, repeat: int = 5) -> dict[str, float]:
    blob = backend.pack_records(rows)
    results = {}
    t0 = time.perf_counter()
    for _ in range(repeat):
        backend.pack_records(rows)
    results["pack"] = repeat * len(rows) / (time.perf_counter() - t0)
    t0 = time.perf_counter()
    for _ in range(repeat):
        backend.unpack_records(blob, 0, len(rows))
    results["unpack"] = repeat * len(rows) / (time.perf_counter() - t0)
    t0 = time.perf_counter()
    for _ in range(repeat):
        backend.aggregate_values(value_rows)
    results["aggregate"] = repeat * len(value_rows) / (time.perf_counter() - t0)
    return results


def kernel_compare_report(n_rows: int = 20_000) -> list[str]:
    """Throughput of every available kernel backend on the three hot
    operations (records/second)."""
    rng = random.Random(5)
    rows = [
        (
            rng.randrange(2**32),
            rng.randrange(2**48),
            rng.randrange(4),
            rng.randrange(4),
            *[rng.uniform(-1e6, 1e6) for _ in range(15)],
        )
        for _ in range(n_rows)
    ]
    value_rows = [r[4:] for r in rows]
    lines = [f"kernel backends over {n_rows} rows (records/s):"]
    measured = {}
    for backend in kernels.available_backends():
        results = _bench_backend(backend, rows, value_rows)
        measured[backend.NAME] = results
        lines.append(
            f"  {backend.NAME:>8}: pack {results['pack']:>12,.0f}  "
            f"unpack {results['unpack']:>12,.0f}  aggregate {results['aggregate']:>12,.0f}"
        )
    if "compiled" in measured and "pure" in measured:
        for op in ("pack", "unpack", "aggregate"):
            ratio = measured["compiled"][op] / measured["pure"][op]
            lines.append(f"  speedup {op}: {ratio:.1f}x")
    lines.append(f"active backend: {kernels.BACKEND}")
    return lines
