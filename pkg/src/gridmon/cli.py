"""Command-line entry points: serve, simulate, query, demote, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import urllib.error
import urllib.request
from pathlib import Path

from gridmon import wire
from gridmon.api import ApiError, parse_timestamp
from gridmon.config import ServerConfig
from gridmon.device import Scenario, WallClock, run_fleet
from gridmon.ingest import IngestCenter
from gridmon.model import PointRegistry
from gridmon.server import CenterServer
from gridmon.store import EventStore, TieredStore

logger = logging.getLogger(__name__)


def _fail(message: str, code: int = 1) -> int:
    print(f"gridmon: {message}", file=sys.stderr)
    return code


def cmd_serve(args) -> int:
    try:
        config = ServerConfig.load(args.config)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot load config: {exc}")
    try:
        server = CenterServer(config)
    except Exception as exc:
        return _fail(f"startup failed: {exc}")
    server.start(watch_dir=args.watch_dir)
    print(
        f"gridmon center up: ingest {server.ingest_server.host}:{server.ingest_port}, "
        f"http {server.api_server.host}:{server.http_port}",
        flush=True,
    )

    def _shutdown(signum, frame):
        server.stop()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    server.run_until_stopped()
    return 0


def cmd_simulate(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
        registry = PointRegistry.load_csv(args.points)
        keys = wire.load_keys(args.keys)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot load inputs: {exc}")
    host, _, port = args.endpoint.rpartition(":")
    if not host or not port.isdigit():
        return _fail(f"bad endpoint {args.endpoint!r}, expected host:port")
    points = {p.point_id: p for p in registry}
    missing = [d.point_id for d in scenario.devices if d.point_id not in points or d.point_id not in keys]
    if missing:
        return _fail(f"scenario devices missing from points/keys: {missing}")
    stats = run_fleet(
        scenario,
        points,
        keys,
        (host, int(port)),
        args.journal_dir,
        clock=WallClock() if args.realtime else None,
        flush_timeout=args.flush_timeout,
    )
    sent = sum(s.frames_sent for s in stats)
    retransmits = sum(s.retransmits for s in stats)
    flushed = sum(1 for s in stats if s.flushed)
    errors = [s for s in stats if s.error]
    print(
        f"simulated {len(stats)} device(s): {sent} frame(s) sent, "
        f"{retransmits} retransmit(s), {flushed}/{len(stats)} fully acknowledged"
    )
    for s in errors:
        print(f"  device {s.device_id} error: {s.error}", file=sys.stderr)
    return 0 if flushed == len(stats) and not errors else 1


def _http_get(endpoint: str, path: str, token: str):
    request = urllib.request.Request(
        endpoint.rstrip("/") + path, headers={"Authorization": f"Bearer {token}"}
    )
    with urllib.request.urlopen(request, timeout=10) as response:
        return json.loads(response.read())


def cmd_query(args) -> int:
    from urllib.parse import urlencode

    try:
        from_ms = parse_timestamp(args.time_from)
        to_ms = parse_timestamp(args.time_to)
    except ApiError as exc:
        return _fail(exc.message)
    params = urlencode(
        {
            "point": args.point,
            "param": args.param,
            "res": args.res,
            "from": from_ms,
            "to": to_ms,
        }
    )
    try:
        payload = _http_get(args.endpoint, f"/api/v1/series?{params}", args.token)
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode(errors="replace")
        return _fail(f"query failed: {exc.code} {detail}")
    except urllib.error.URLError as exc:
        return _fail(f"endpoint unreachable: {exc.reason}")
    writer = csv.writer(sys.stdout)
    writer.writerow(["ts_ms", args.param, "flags"])
    for ts, value, flags in payload["values"]:
        writer.writerow([ts, value, flags])
    return 0


def cmd_demote(args) -> int:
    """Offline demotion: rebuild the store from the WAL, then move
    everything older than the cutoff into segments.  Run this only while
    the server is stopped; the next serve start will replay the WAL and
    resolve any hot/cold overlap via the hot-wins merge."""
    try:
        config = ServerConfig.load(args.config)
        cutoff_ms = parse_timestamp(args.cutoff)
    except (OSError, ValueError, ApiError) as exc:
        return _fail(str(exc))
    registry = PointRegistry.load_csv(config.points_file)
    store = TieredStore(config.data_dir, registry)
    events = EventStore(Path(config.data_dir) / "events.log", fsync=False)
    center = IngestCenter(
        registry, {}, store, events, config.wal_dir, wal_fsync=False
    )
    center.replay_wal()
    written = store.demote(cutoff_ms)
    center.close()
    events.close()
    for path in written:
        print(path)
    print(f"demoted records below {cutoff_ms} into {len(written)} segment(s)")
    return 0


def cmd_bench(args) -> int:
    from gridmon import bench

    if args.kernels:
        for line in bench.kernel_compare_report():
            print(line)
        return 0
    report = bench.ingest_bench(devices=args.devices, minutes=args.minutes)
    for line in report:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridmon",
        description="Centralized power-quality monitoring: encrypted ingest, tiered storage, HTTP query API.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the monitoring center")
    p_serve.add_argument("--config", required=True, help="JSON config file (see docs/config.md)")
    p_serve.add_argument(
        "--watch-dir",
        help="poll this directory for CSV drops and feed them through the bulk import path",
    )
    p_serve.set_defaults(func=cmd_serve)

    p_sim = sub.add_parser("simulate", help="run a device fleet against a live center")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON (see docs/scenario.md)")
    p_sim.add_argument("--endpoint", required=True, help="center ingest address, host:port")
    p_sim.add_argument("--points", default="points.csv")
    p_sim.add_argument("--keys", default="keys.tsv")
    p_sim.add_argument("--journal-dir", default="journal")
    p_sim.add_argument("--flush-timeout", type=float, default=30.0)
    p_sim.add_argument(
        "--realtime", action="store_true", help="pace one simulated second per wall second"
    )
    p_sim.set_defaults(func=cmd_simulate)

    p_query = sub.add_parser("query", help="query a series and print CSV")
    p_query.add_argument("--endpoint", default="http://127.0.0.1:7451")
    p_query.add_argument("--token", required=True)
    p_query.add_argument("--point", required=True, type=int)
    p_query.add_argument("--param", required=True)
    p_query.add_argument("--res", required=True)
    p_query.add_argument("--from", dest="time_from", required=True)
    p_query.add_argument("--to", dest="time_to", required=True)
    p_query.set_defaults(func=cmd_query)

    p_demote = sub.add_parser("demote", help="offline demotion of old hot records to segments")
    p_demote.add_argument("--config", required=True)
    p_demote.add_argument("--cutoff", required=True, help="epoch ms or ISO-8601")
    p_demote.set_defaults(func=cmd_demote)

    p_bench = sub.add_parser("bench", help="ingest throughput and query latency")
    p_bench.add_argument("--devices", type=int, default=20)
    p_bench.add_argument("--minutes", type=int, default=2)
    p_bench.add_argument(
        "--kernels", action="store_true", help="compare compiled vs pure-python kernels"
    )
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
