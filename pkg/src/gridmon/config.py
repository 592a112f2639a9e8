"""Server configuration file (JSON) for `gridmon serve`."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ServerConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 7450
    http_host: str = "127.0.0.1"
    http_port: int = 7451
    data_dir: str = "data"
    wal_dir: str = "wal"
    points_file: str = "points.csv"
    keys_file: str = "keys.tsv"
    tokens_file: str = "tokens.tsv"
    hot_window_hours: float = 48.0
    retention_days: int = 365
    rollup_grace_ms: int = 30_000
    wal_fsync: bool = True

    def __post_init__(self):
        if self.hot_window_hours <= 0:
            raise ValueError("hot_window_hours must be positive")
        if self.retention_days < 1:
            raise ValueError("retention_days must be >= 1")
        if self.rollup_grace_ms < 0:
            raise ValueError("rollup_grace_ms must be non-negative")

    @property
    def hot_window_ms(self) -> int:
        return int(self.hot_window_hours * 3600 * 1000)

    @classmethod
    def load(cls, path: str | Path) -> "ServerConfig":
        """Read a JSON config; unknown keys are rejected, relative paths
        resolve against the config file's directory."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        base = path.parent
        for name in ("data_dir", "wal_dir", "points_file", "keys_file", "tokens_file"):
            value = getattr(cfg, name)
            setattr(cfg, name, str((base / value).resolve()))
        return cfg

    def dump(self, path: str | Path) -> None:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")
