"""The composed center process: WAL replay, TCP ingest listener, HTTP
facade, and the background maintenance loop (rollups, demotion,
retention), assembled from a ServerConfig.

Maintenance runs on data time (the ingest watermark), so a virtually
clocked fleet drives rollup and demotion deterministically and an idle
server does nothing.
"""

from __future__ import annotations

import logging
import threading
import time
from pathlib import Path
from typing import Optional

from gridmon import wire
from gridmon.api import ApiServer, Facade, TokenTable
from gridmon.config import ServerConfig
from gridmon.ingest import IngestCenter, IngestServer
from gridmon.model import PointRegistry
from gridmon.store import EventStore, TieredStore

logger = logging.getLogger(__name__)

MAINTENANCE_INTERVAL_S = 0.25
RETENTION_INTERVAL_S = 60.0


class CenterServer:
    """Owns every component of one monitoring center."""

    def __init__(self, config: ServerConfig):
        self.config = config
        Path(config.data_dir).mkdir(parents=True, exist_ok=True)
        self.registry = PointRegistry.load_csv(config.points_file)
        self.keys = wire.load_keys(config.keys_file)
        self.tokens = TokenTable.load(config.tokens_file)
        self.store = TieredStore(config.data_dir, self.registry)
        self.events = EventStore(Path(config.data_dir) / "events.log", fsync=config.wal_fsync)
        self.center = IngestCenter(
            self.registry,
            self.keys,
            self.store,
            self.events,
            config.wal_dir,
            rollup_grace_ms=config.rollup_grace_ms,
            hot_window_ms=config.hot_window_ms,
            wal_fsync=config.wal_fsync,
        )
        self.facade = Facade(self.registry, self.store, self.events, self.tokens, self.center)
        self.ingest_server: Optional[IngestServer] = None
        self.api_server: Optional[ApiServer] = None
        self._stop = threading.Event()
        self._maintenance: Optional[threading.Thread] = None
        self._watch_dir: Optional[Path] = None

    @property
    def ingest_port(self) -> int:
        return self.ingest_server.port

    @property
    def http_port(self) -> int:
        return self.api_server.port

    def start(self, watch_dir: Optional[str] = None) -> None:
        replayed = self.center.replay_wal()
        if replayed:
            logger.info("recovered %d frame(s) from the WAL", replayed)
        self.ingest_server = IngestServer(
            self.center, self.config.listen_host, self.config.listen_port
        )
        self.ingest_server.start()
        self.api_server = ApiServer(self.facade, self.config.http_host, self.config.http_port)
        self.api_server.start()
        if watch_dir:
            self._watch_dir = Path(watch_dir)
            self._watch_dir.mkdir(parents=True, exist_ok=True)
        self._maintenance = threading.Thread(
            target=self._maintenance_loop, name="maintenance", daemon=True
        )
        self._maintenance.start()

    def _maintenance_loop(self) -> None:
        last_retention = 0.0
        while not self._stop.is_set():
            try:
                self.center.rollup_tick()
                self.center.demote_tick()
                now = time.monotonic()
                if now - last_retention >= RETENTION_INTERVAL_S:
                    last_retention = now
                    watermark = self.center.watermark_ms()
                    if watermark:
                        self.store.retention_purge(self.config.retention_days, watermark)
                if self._watch_dir is not None:
                    self._poll_watch_dir()
            except Exception:
                logger.exception("maintenance pass failed")
            self._stop.wait(MAINTENANCE_INTERVAL_S)

    def _poll_watch_dir(self) -> None:
        """File-drop alias of the bulk import endpoint: every *.csv in the
        watch directory goes through the same import path, then gets
        renamed .imported (or .failed)."""
        for path in sorted(self._watch_dir.glob("*.csv")):
            try:
                report = self.facade.import_bulk_trusted(path.read_text())
                logger.info(
                    "imported %s: %d accepted, %d rejected",
                    path.name,
                    report["accepted"],
                    len(report["rejected"]),
                )
                path.rename(path.with_suffix(".csv.imported"))
            except Exception as exc:
                logger.error("import of %s failed: %s", path.name, exc)
                path.rename(path.with_suffix(".csv.failed"))

    def run_until_stopped(self) -> None:
        """Block until stop() is called (e.g. from a signal handler)."""
        self._stop.wait()

    def stop(self) -> None:
        self._stop.set()
        if self._maintenance is not None:
            self._maintenance.join(timeout=3)
        if self.ingest_server is not None:
            self.ingest_server.stop()
        if self.api_server is not None:
            self.api_server.stop()
        self.center.close()
        self.events.close()
