"""HTTP/JSON query facade: series, events, points, status, export, and
bulk CSV import, with static-token authorization.

Handlers are pure projections of store state; the only write path is the
bulk import, which funnels through the same validation and insert
contract as wire ingestion.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from gridmon import kernels
from gridmon.ingest import IngestCenter
from gridmon.model import (
    VALUE_INDEX,
    VALUE_NAMES,
    BaseRecord,
    EventType,
    PointRegistry,
    RecordFlags,
    Resolution,
    validate_record,
    window_align,
)
from gridmon.store import EventStore, TieredStore, UnknownPoint

logger = logging.getLogger(__name__)

SCOPE_READ = "READ"
SCOPE_EXPORT = "EXPORT"
SCOPE_IMPORT = "IMPORT"
_SCOPES = {SCOPE_READ, SCOPE_EXPORT, SCOPE_IMPORT}

_EPOCH_MS_RE = re.compile(r"-?\d+$")
IMPORT_HEADER = ["point_id", "timestamp", "parameter", "value"]


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass(frozen=True, slots=True)
class ApiToken:
    token: str
    scopes: frozenset[str]
    points: Optional[frozenset[int]]  # None = all points

    def allows_point(self, point_id: int) -> bool:
        return self.points is None or point_id in self.points


class TokenTable:
    """Static token list from `tokens.tsv`:
    token<TAB>scope,scope<TAB>point,point|ALL."""

    def __init__(self, tokens: list[ApiToken]):
        self._by_value = {t.token: t for t in tokens}

    def authenticate(self, token_value: Optional[str]) -> ApiToken:
        token = self._by_value.get(token_value) if token_value else None
        if token is None:
            raise ApiError(401, "missing or unknown token")
        return token

    @classmethod
    def load(cls, path: str | Path) -> "TokenTable":
        tokens = []
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
                value, scopes_field, points_field = parts
                scopes = frozenset(s.strip().upper() for s in scopes_field.split(",") if s.strip())
                if not scopes <= _SCOPES:
                    raise ValueError(f"{path}:{line_no}: unknown scope in {scopes_field!r}")
                if points_field.strip().upper() == "ALL":
                    points = None
                else:
                    points = frozenset(int(p) for p in points_field.split(",") if p.strip())
                tokens.append(ApiToken(value, scopes, points))
        return cls(tokens)


def parse_timestamp(value: str) -> int:
    """Epoch milliseconds from either a decimal epoch-ms string or an
    ISO-8601 datetime (naive values are taken as UTC)."""
    value = value.strip()
    if _EPOCH_MS_RE.fullmatch(value):
        return int(value)
    try:
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise ApiError(400, f"bad timestamp {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


class Facade:
    """Protocol-independent endpoint logic (the HTTP layer is a thin
    shim over this, and tests may call it directly)."""

    def __init__(
        self,
        registry: PointRegistry,
        store: TieredStore,
        events: EventStore,
        tokens: TokenTable,
        center: Optional[IngestCenter] = None,
    ):
        self.registry = registry
        self.store = store
        self.events = events
        self.tokens = tokens
        self.center = center

    # -- helpers ----------------------------------------------------------

    def _auth(self, token_value: Optional[str], scope: str) -> ApiToken:
        token = self.tokens.authenticate(token_value)
        if scope not in token.scopes:
            raise ApiError(403, f"token lacks {scope} scope")
        return token

    def _check_point(self, token: ApiToken, point_id: int) -> None:
        if not token.allows_point(point_id):
            raise ApiError(403, f"token not authorized for point {point_id}")
        if point_id not in self.registry:
            raise ApiError(404, f"unknown point {point_id}")

    @staticmethod
    def _parse_point(raw: str) -> int:
        try:
            return int(raw)
        except ValueError:
            raise ApiError(400, f"bad point id {raw!r}") from None

    @staticmethod
    def _parse_res(raw: str) -> Resolution:
        try:
            return Resolution.from_label(raw)
        except ValueError:
            raise ApiError(400, f"bad resolution {raw!r}") from None

    @staticmethod
    def _parse_bounds(from_raw: str, to_raw: str) -> tuple[int, int]:
        from_ms = parse_timestamp(from_raw)
        to_ms = parse_timestamp(to_raw)
        if from_ms > to_ms:
            raise ApiError(400, "from must not exceed to")
        return from_ms, to_ms

    # -- endpoints --------------------------------------------------------

    def series(self, token_value, point_raw, param, res_raw, from_raw, to_raw) -> dict:
        token = self._auth(token_value, SCOPE_READ)
        point_id = self._parse_point(point_raw)
        if param not in VALUE_INDEX:
            raise ApiError(400, f"unknown parameter {param!r}")
        resolution = self._parse_res(res_raw)
        from_ms, to_ms = self._parse_bounds(from_raw, to_raw)
        self._check_point(token, point_id)
        rows = self.store.query_rows(point_id, resolution, from_ms, to_ms)
        column = 4 + VALUE_INDEX[param]
        values = []
        for packed in rows:
            row = kernels.unpack_record(packed)
            values.append([row[1], row[column], row[3]])
        return {
            "point_id": point_id,
            "parameter": param,
            "resolution": resolution.label,
            "from_ms": from_ms,
            "to_ms": to_ms,
            "values": values,
        }

    def events_endpoint(self, token_value, point_raw, from_raw, to_raw, type_raw=None) -> list[dict]:
        token = self._auth(token_value, SCOPE_READ)
        point_id = self._parse_point(point_raw)
        from_ms, to_ms = self._parse_bounds(from_raw, to_raw)
        event_type = None
        if type_raw:
            try:
                event_type = EventType[type_raw.upper()]
            except KeyError:
                raise ApiError(400, f"bad event type {type_raw!r}") from None
        self._check_point(token, point_id)
        return [
            {
                "point_id": e.point_id,
                "event_type": e.event_type.name,
                "phase_mask": e.phase_mask,
                "start_ms": e.start_ms,
                "end_ms": e.end_ms,
                "extreme_pu": e.extreme_pu,
            }
            for e in self.events.query(point_id, from_ms, to_ms, event_type)
        ]

    def points(self, token_value) -> list[dict]:
        token = self._auth(token_value, SCOPE_READ)
        return [
            {
                "point_id": p.point_id,
                "name": p.name,
                "nominal_voltage_v": p.nominal_voltage_v,
                "nominal_frequency_hz": p.nominal_frequency_hz,
            }
            for p in self.registry
            if token.allows_point(p.point_id)
        ]

    def status(self, token_value) -> dict:
        self.tokens.authenticate(token_value)
        counters = self.center.counters.snapshot() if self.center else {}
        return {
            **counters,
            "hot_records": self.store.hot_record_count(),
            "segments": self.store.segment_count(),
            "events": self.events.count(),
            "points": len(self.registry),
            "kernel_backend": kernels.BACKEND,
        }

    def export_csv(self, token_value, point_raw, res_raw, from_raw, to_raw) -> str:
        token = self._auth(token_value, SCOPE_EXPORT)
        point_id = self._parse_point(point_raw)
        resolution = self._parse_res(res_raw)
        from_ms, to_ms = self._parse_bounds(from_raw, to_raw)
        self._check_point(token, point_id)
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["point_id", "ts_ms", "resolution", "flags", *VALUE_NAMES])
        for packed in self.store.query_rows(point_id, resolution, from_ms, to_ms):
            row = kernels.unpack_record(packed)
            writer.writerow([row[0], row[1], resolution.label, row[3], *row[4:]])
        return out.getvalue()

    def import_bulk(self, token_value, body: str, res_raw: str = "10min") -> dict:
        """CSV bulk import: rows grouped by (point, window-aligned ts)
        into partial records flagged INCOMPLETE.  Per-line rejection
        report; duplicate (point, ts, parameter) rows: last one wins."""
        token = self._auth(token_value, SCOPE_IMPORT)
        return self._import(token, body, res_raw)

    def import_bulk_trusted(self, body: str, res_raw: str = "10min") -> dict:
        """Import path for local file drops (the serve --watch-dir alias):
        same grouping and validation, no token required."""
        return self._import(ApiToken("<local>", frozenset({SCOPE_IMPORT}), None), body, res_raw)

    def _import(self, token: ApiToken, body: str, res_raw: str) -> dict:
        resolution = self._parse_res(res_raw)
        reader = csv.reader(io.StringIO(body))
        try:
            header = next(reader)
        except StopIteration:
            raise ApiError(400, "empty import body") from None
        if [h.strip() for h in header] != IMPORT_HEADER:
            raise ApiError(400, f"bad header {header}, expected {IMPORT_HEADER}")

        rejected: list[dict] = []
        groups: dict[tuple[int, int], dict[str, float]] = {}
        group_lines: dict[tuple[int, int], list[int]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                if len(row) != 4:
                    raise ApiError(400, f"expected 4 fields, got {len(row)}")
                point_id = self._parse_point(row[0])
                ts_ms = parse_timestamp(row[1])
                if ts_ms < 0:
                    raise ApiError(400, "negative timestamp")
                param = row[2].strip()
                if param not in VALUE_INDEX:
                    raise ApiError(400, f"unknown parameter {param!r}")
                try:
                    value = float(row[3])
                except ValueError:
                    raise ApiError(400, f"bad value {row[3]!r}") from None
                if not token.allows_point(point_id):
                    raise ApiError(403, f"token not authorized for point {point_id}")
                if point_id not in self.registry:
                    raise ApiError(404, f"unknown point {point_id}")
            except ApiError as exc:
                rejected.append({"line": line_no, "reason": exc.message})
                continue
            key = (point_id, window_align(ts_ms, resolution))
            groups.setdefault(key, {})[param] = value
            group_lines.setdefault(key, []).append(line_no)

        accepted = 0
        accepted_records = []
        for (point_id, ts_ms), params in groups.items():
            values = [0.0] * len(VALUE_NAMES)
            for name, value in params.items():
                values[VALUE_INDEX[name]] = value
            record = BaseRecord.from_row(
                (point_id, ts_ms, resolution.code, int(RecordFlags.INCOMPLETE), *values)
            )
            rejection = validate_record(record, self.registry)
            lines = group_lines[(point_id, ts_ms)]
            if rejection is not None:
                rejected.extend({"line": n, "reason": str(rejection)} for n in lines)
                continue
            accepted_records.append(record)
            accepted += len(lines)
        if self.center is not None:
            # durable path: WAL first, then store (replayed on restart)
            self.center.import_records(accepted_records)
        else:
            for record in accepted_records:
                self.store.insert(record)
        rejected.sort(key=lambda r: r["line"])
        return {"accepted": accepted, "rejected": rejected}


class _Handler(BaseHTTPRequestHandler):
    facade: Facade  # injected by ApiServer via subclassing

    def _token(self) -> Optional[str]:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer ") :].strip()
        return None

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload) -> None:
        self._send(status, json.dumps(payload).encode(), "application/json")

    def _param(self, query: dict, name: str) -> str:
        values = query.get(name)
        if not values:
            raise ApiError(400, f"missing query parameter {name!r}")
        return values[0]

    def _route(self, method: str) -> None:
        url = urlparse(self.path)
        query = parse_qs(url.query)
        token = self._token()
        facade = self.facade
        try:
            if method == "GET" and url.path == "/api/v1/series":
                self._send_json(
                    200,
                    facade.series(
                        token,
                        self._param(query, "point"),
                        self._param(query, "param"),
                        self._param(query, "res"),
                        self._param(query, "from"),
                        self._param(query, "to"),
                    ),
                )
            elif method == "GET" and url.path == "/api/v1/events":
                self._send_json(
                    200,
                    facade.events_endpoint(
                        token,
                        self._param(query, "point"),
                        self._param(query, "from"),
                        self._param(query, "to"),
                        query.get("type", [None])[0],
                    ),
                )
            elif method == "GET" and url.path == "/api/v1/points":
                self._send_json(200, facade.points(token))
            elif method == "GET" and url.path == "/api/v1/status":
                self._send_json(200, facade.status(token))
            elif method == "GET" and url.path == "/api/v1/export":
                body = facade.export_csv(
                    token,
                    self._param(query, "point"),
                    self._param(query, "res"),
                    self._param(query, "from"),
                    self._param(query, "to"),
                )
                self._send(200, body.encode(), "text/csv")
            elif method == "POST" and url.path == "/api/v1/import/bulk":
                length = int(self.headers.get("Content-Length", "0"))
                body = self.rfile.read(length).decode("utf-8", errors="replace")
                self._send_json(
                    200,
                    facade.import_bulk(token, body, query.get("res", ["10min"])[0]),
                )
            else:
                raise ApiError(404, f"no such endpoint {url.path}")
        except ApiError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except UnknownPoint as exc:
            self._send_json(404, {"error": f"unknown point {exc}"})
        except Exception:
            logger.exception("unhandled API error for %s", self.path)
            self._send_json(500, {"error": "internal error"})

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")

    def log_message(self, fmt, *args):
        logger.debug("http: " + fmt, *args)


class ApiServer:
    """Threaded HTTP server wrapper around a Facade."""

    def __init__(self, facade: Facade, host: str = "127.0.0.1", port: int = 7451):
        handler = type("BoundHandler", (_Handler,), {"facade": facade})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self.host, self.port = self._httpd.server_address[:2]
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="api-http", daemon=True
        )
        self._thread.start()
        logger.info("http api listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)
