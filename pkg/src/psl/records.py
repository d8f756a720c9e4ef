"""Append-only JSON-lines record store.

Line schema (field order is fixed)::

    {"version": 1, "run_id": str, "timestamp": str (UTC ISO-8601),
     "fingerprint": str (sha256 hex of the resolved config), "kind": str,
     "keys": {str: str | float | int | null}, "value": float, "seed": int}
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

RECORD_VERSION = 1
KINDS = ("clean_acc", "robust_err", "quant_acc", "filter_norms", "preact_mean", "corruption_acc")


@dataclass
class ResultRecord:
    run_id: str
    fingerprint: str
    kind: str
    keys: dict
    value: float
    seed: int
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    version: int = RECORD_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")

    def to_line(self) -> str:
        d = asdict(self)
        ordered = {k: d[k] for k in ("version", "run_id", "timestamp", "fingerprint",
                                     "kind", "keys", "value", "seed")}
        return json.dumps(ordered, sort_keys=False) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "ResultRecord":
        d = json.loads(line)
        if d.get("version") != RECORD_VERSION:
            raise ValueError(f"unsupported record version {d.get('version')!r}")
        return cls(**d)


class RecordStore:
    """Serialises appends; each record is one ``write`` of one whole line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, records: Iterable[ResultRecord]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                for rec in records:
                    os.write(fd, rec.to_line().encode("utf-8"))
            finally:
                os.close(fd)

    def __iter__(self) -> Iterator[ResultRecord]:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.endswith("\n"):
                    log.warning("%s:%d: ignoring partial trailing line", self.path, n)
                    break
                yield ResultRecord.from_line(line)

    def records(self, kind: str | None = None) -> list[ResultRecord]:
        return [r for r in self if kind is None or r.kind == kind]

    def latest(self, kind: str) -> list[ResultRecord]:
        """Most recent record per distinct ``keys`` value, in first-seen order."""
        out: dict[str, ResultRecord] = {}
        for r in self.records(kind):
            out[json.dumps(r.keys, sort_keys=True)] = r
        return list(out.values())
