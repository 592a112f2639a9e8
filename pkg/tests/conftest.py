import json
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridmon.model import (
    BaseRecord,
    MeasurementPoint,
    PointRegistry,
    RecordFlags,
    Resolution,
)

ADMIN_TOKEN = "admin-token"
READER_TOKEN = "reader-token"  # READ on points 1,2 only
IMPORT_TOKEN = "import-token"
EXPORT_TOKEN = "export-token"


def build_workdir(
    root: Path,
    device_ids=(1, 2, 3),
    key_seed=1,
    rollup_grace_ms=0,
    wal_fsync=True,
    hot_window_hours=48.0,
    retention_days=365,
):
    """Write points.csv / keys.tsv / tokens.tsv / config.json for a test
    center under `root`; returns the paths."""
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(key_seed)
    points = root / "points.csv"
    with open(points, "w") as fh:
        fh.write("point_id,name,nominal_voltage_v,nominal_frequency_hz\n")
        for i in device_ids:
            fh.write(f"{i},point-{i},230.0,50.0\n")
    keys = root / "keys.tsv"
    with open(keys, "w") as fh:
        for i in device_ids:
            fh.write(f"{i}\t{rng.randbytes(16).hex()}\n")
    tokens = root / "tokens.tsv"
    tokens.write_text(
        f"{ADMIN_TOKEN}\tREAD,EXPORT,IMPORT\tALL\n"
        f"{READER_TOKEN}\tREAD\t1,2\n"
        f"{IMPORT_TOKEN}\tIMPORT\tALL\n"
        f"{EXPORT_TOKEN}\tEXPORT\tALL\n"
    )
    config = root / "config.json"
    config.write_text(
        json.dumps(
            {
                "listen_port": 0,
                "http_port": 0,
                "data_dir": "data",
                "wal_dir": "wal",
                "points_file": "points.csv",
                "keys_file": "keys.tsv",
                "tokens_file": "tokens.tsv",
                "rollup_grace_ms": rollup_grace_ms,
                "wal_fsync": wal_fsync,
                "hot_window_hours": hot_window_hours,
                "retention_days": retention_days,
            },
            indent=2,
        )
    )
    return {"root": root, "config": config, "points": points, "keys": keys, "tokens": tokens}


def make_record(
    point_id=1,
    ts_ms=0,
    resolution=Resolution.R1S,
    flags=RecordFlags.NONE,
    frequency_hz=50.0,
    vrms_pu=(1.0, 1.0, 1.0),
    irms_a=(100.0, 100.0, 100.0),
    p_w=60000.0,
    q_var=20000.0,
    s_va=69000.0,
    thd_v=(0.02, 0.02, 0.02),
    unbalance=0.01,
    flicker_pst=0.0,
):
    return BaseRecord(
        point_id=point_id,
        ts_ms=ts_ms,
        resolution=resolution,
        flags=flags,
        frequency_hz=frequency_hz,
        vrms_pu=vrms_pu,
        irms_a=irms_a,
        p_w=p_w,
        q_var=q_var,
        s_va=s_va,
        thd_v=thd_v,
        unbalance=unbalance,
        flicker_pst=flicker_pst,
    )


def random_record(rng: random.Random, point_id=1, resolution=Resolution.R3S, ts_ms=None):
    """A registry-valid record with randomized values."""
    if ts_ms is None:
        ts_ms = rng.randrange(0, 10**9) * resolution.duration_ms
    p = rng.uniform(-5e5, 5e5)
    q = rng.uniform(-5e5, 5e5)
    s = abs(p) * rng.uniform(1.0, 1.6) + abs(q)
    return make_record(
        point_id=point_id,
        ts_ms=ts_ms,
        resolution=resolution,
        frequency_hz=rng.uniform(49.5, 50.5),
        vrms_pu=tuple(rng.uniform(0.0, 1.3) for _ in range(3)),
        irms_a=tuple(rng.uniform(0.0, 400.0) for _ in range(3)),
        p_w=p,
        q_var=q,
        s_va=s,
        thd_v=tuple(rng.uniform(0.0, 0.2) for _ in range(3)),
        unbalance=rng.uniform(0.0, 0.3),
        flicker_pst=rng.uniform(0.0, 2.0),
    )


def make_points(n, start_id=1):
    return [
        MeasurementPoint(point_id=start_id + i, name=f"point-{start_id + i}", nominal_voltage_v=230.0)
        for i in range(n)
    ]


@pytest.fixture
def registry():
    return PointRegistry(make_points(8))


def spawn_server(config_path, watch_dir=None):
    """Launch `gridmon serve` in a subprocess; returns
    (process, ingest_port, http_port) once it reports its listen ports."""
    import re
    import subprocess

    cmd = [sys.executable, "-m", "gridmon.cli", "serve", "--config", str(config_path)]
    if watch_dir:
        cmd += ["--watch-dir", str(watch_dir)]
    proc = subprocess.Popen(
        cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True
    )
    banner = re.compile(r"ingest [\d.]+:(\d+), http [\d.]+:(\d+)")
    lines = []
    while True:
        line = proc.stdout.readline()
        if not line:
            proc.kill()
            raise RuntimeError(f"server failed to start (rc={proc.poll()}):\n" + "".join(lines))
        lines.append(line)
        found = banner.search(line)
        if found:
            return proc, int(found.group(1)), int(found.group(2))
