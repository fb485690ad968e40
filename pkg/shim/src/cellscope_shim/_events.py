"""Line-delimited event-log writer.

One JSON object per line, UTF-8, compact separators, header first, every
append flushed and fsynced before the call returns. Readers of the
proxy-written store format must accept these files byte for byte, so the
field sets and key order here are fixed and must not drift.
"""

from __future__ import annotations

import json
import os
import platform
import time
from pathlib import Path

__version__ = "0.1.0"

EVENTS_FILENAME = "events.jsonl"
INVALID_KEY = "capture_failure"

PENDING = "pending"
OK = "ok"
ERROR = "error"
ABORTED = "aborted"
COMPLETED = (OK, ERROR, ABORTED)


def now_ms() -> int:
    return int(time.time() * 1000)


def _encode(obj: dict) -> bytes:
    return (json.dumps(obj, ensure_ascii=False,
                       separators=(",", ":")) + "\n").encode("utf-8")


def environment(session_start=None, notebook_meta=None) -> dict:
    """Header environment block; key order is part of the format."""
    return {
        "interpreter_version": platform.python_version(),
        "packages": [],
        "notebook_meta": dict(notebook_meta or {}),
        "session_start": now_ms() if session_start is None else int(session_start),
        "tool_version": __version__,
        "warning": False,
    }


class EventWriter:
    """Single-document appender following the capture ledger protocol:
    ahead before anything else about the log, a pending record auto-aborts
    when a new ahead arrives, completion must name the pending log."""

    def __init__(self, store_path, document_id: str, env: dict | None = None,
                 participant_meta: dict | None = None):
        self.document_id = document_id
        doc_dir = Path(store_path) / document_id
        if doc_dir.exists():
            raise FileExistsError(
                f"document {document_id!r} already exists in store")
        doc_dir.mkdir(parents=True)
        self.path = doc_dir / EVENTS_FILENAME
        self._fh = open(self.path, "ab")
        self._next_id = 0
        self._pending: int | None = None
        try:
            self._write({"event": "header", "document_id": document_id,
                         "env": env or environment()})
            for key, value in (participant_meta or {}).items():
                self._write({"event": "meta", "scope": "document",
                             "key": str(key), "value": str(value)})
            dir_fd = os.open(doc_dir, os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
        except OSError:
            self._fh.close()
            raise

    def _write(self, event: dict) -> None:
        self._fh.write(_encode(event))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append_ahead(self, source: str, ts: int | None = None) -> int:
        if self._pending is not None:
            # a new request while one is outstanding means the old one was
            # interrupted; the ledger records that before moving on
            self.complete(self._pending, ABORTED)
        log_id = self._next_id
        self._write({"event": "ahead", "log_id": log_id,
                     "ts_ahead": now_ms() if ts is None else int(ts),
                     "source": source})
        self._next_id = log_id + 1
        self._pending = log_id
        return log_id

    def complete(self, log_id: int, status: str, stdout: str = "",
                 stderr: str = "", ename: str | None = None,
                 evalue: str | None = None, traceback: list[str] | None = None,
                 ts: int | None = None) -> None:
        if status not in COMPLETED:
            raise ValueError(f"invalid completion status {status!r}")
        if log_id != self._pending:
            raise ValueError(
                f"complete for log {log_id}, but pending is {self._pending}")
        if (status == ERROR) != (ename is not None):
            raise ValueError("ename present iff status is error")
        self._write({"event": "complete", "log_id": log_id,
                     "ts_reply": now_ms() if ts is None else int(ts),
                     "status": status, "stdout": stdout, "stderr": stderr,
                     "ename": ename, "evalue": evalue, "traceback": traceback})
        self._pending = None

    def mark_invalid(self, cause: str) -> None:
        """Fail-closed flag. Best effort: a dead store cannot refuse harder."""
        try:
            self._write({"event": "meta", "scope": "document",
                         "key": INVALID_KEY, "value": str(cause)})
        except OSError:
            pass

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None
