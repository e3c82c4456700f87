"""Append-only JSONL event log: the server's write-ahead persistence.

One JSON object per line with a dense `index` field. Records are flushed and
fsynced before the caller acknowledges anything to a client. Replay refuses
to proceed past the first corrupt record and reports its byte offset.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Iterator


class LogCorruptError(Exception):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt log record at byte offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def read_records(path: Path) -> Iterator[dict]:
    """Yield records in order; raise LogCorruptError at the first bad one."""
    offset = 0
    index = 0
    with open(path, "rb") as fh:
        for line in fh:
            stripped = line.strip()
            if stripped:
                try:
                    record = json.loads(stripped.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise LogCorruptError(offset, str(exc)) from exc
                if not isinstance(record, dict) or record.get("index") != index:
                    raise LogCorruptError(offset, f"expected index {index}")
                yield record
                index += 1
            offset += len(line)


class EventLog:
    """Durable appender; safe for concurrent use."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next_index = sum(1 for _ in read_records(self.path)) if self.path.exists() else 0
        self._fh = open(self.path, "ab")

    @property
    def next_index(self) -> int:
        return self._next_index

    def append(self, record: dict) -> int:
        with self._lock:
            index = self._next_index
            payload = dict(record, index=index)
            line = json.dumps(payload, separators=(",", ":"), sort_keys=True) + "\n"
            self._fh.write(line.encode("utf-8"))
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._next_index = index + 1
            return index

    def close(self) -> None:
        with self._lock:
            self._fh.close()
