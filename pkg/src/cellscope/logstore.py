"""Durable execution ledger: documents, cell executions, source lines.

A document is one participant session. It lives in its own directory under
the store as a single append-only file of line-delimited JSON events
(header, ahead, complete, meta). Every append is flushed and fsync'd before
the call returns, so anything acknowledged survives a crash at any later
instant. On load the event stream is replayed into the nested
document -> logs -> lines structure that the rest of the toolkit consumes.
"""

from __future__ import annotations

import json
import os
import re
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

# Execution statuses.
PENDING = "pending"
OK = "ok"
ERROR = "error"
ABORTED = "aborted"
STATUSES = frozenset({PENDING, OK, ERROR, ABORTED})
COMPLETED_STATUSES = frozenset({OK, ERROR, ABORTED})

EVENTS_FILENAME = "events.jsonl"
CKPT_DIRNAME = "ckpt"

# Reserved document-meta key. Present => document is invalid and its value is
# the failure cause. `DocumentRecord.valid` is derived from it so that the
# flag round-trips through the four fixed event kinds.
INVALID_KEY = "capture_failure"

FORMAT_ERROR_NAMES = frozenset({"SyntaxError", "IndentationError", "TabError"})

# Traceback frames that point back into the executed cell. The last such
# frame names the failing line (1-based in tracebacks).
_CELL_FRAME_RES = (
    re.compile(r"Cell In\[\d+\],\s+line\s+(\d+)"),
    re.compile(r'File "<[^"]*>",\s+line\s+(\d+)'),
)

LineRef = tuple[int, int]


class LogStoreError(Exception):
    """Base error for ledger operations."""


class ProtocolStateError(LogStoreError):
    """The append/complete lifecycle was violated (desynchronization)."""


class UnresolvedIdError(LogStoreError):
    """An addressed document/log/line id does not resolve."""


class DocumentInvalidError(LogStoreError):
    """Writes were attempted on a document flagged invalid."""


class MalformedLogError(LogStoreError):
    """The event file is structurally broken at a known byte offset."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


def now_ms() -> int:
    return int(time.time() * 1000)


def split_lines(source: str) -> list[str]:
    """Physical-newline split; len == 1 + newline count, blanks included."""
    return source.split("\n")


def derive_failing_line_index(traceback_frames: list[str], line_count: int) -> int | None:
    """0-based index of the failing cell line, from the last frame that
    references the cell; None when not derivable or out of range."""
    last = None
    for frame in traceback_frames:
        for rx in _CELL_FRAME_RES:
            for m in rx.finditer(frame):
                last = int(m.group(1))
    if last is None:
        return None
    idx = last - 1
    if 0 <= idx < line_count:
        return idx
    return None


@dataclass
class EnvSnapshot:
    interpreter_version: str = ""
    packages: list[tuple[str, str]] = field(default_factory=list)
    notebook_meta: dict[str, str] = field(default_factory=dict)
    session_start: int = 0
    tool_version: str = ""
    warning: bool = False

    def to_dict(self) -> dict:
        return {
            "interpreter_version": self.interpreter_version,
            "packages": [[n, v] for n, v in self.packages],
            "notebook_meta": dict(self.notebook_meta),
            "session_start": self.session_start,
            "tool_version": self.tool_version,
            "warning": self.warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSnapshot":
        return cls(
            interpreter_version=d.get("interpreter_version", ""),
            packages=[(p[0], p[1]) for p in d.get("packages", [])],
            notebook_meta=dict(d.get("notebook_meta", {})),
            session_start=int(d.get("session_start", 0)),
            tool_version=d.get("tool_version", ""),
            warning=bool(d.get("warning", False)),
        )


@dataclass
class ErrorInfo:
    ename: str
    evalue: str = ""
    traceback: list[str] = field(default_factory=list)
    failing_line_index: int | None = None

    def to_dict(self) -> dict:
        return {
            "ename": self.ename,
            "evalue": self.evalue,
            "traceback": list(self.traceback),
            "failing_line_index": self.failing_line_index,
        }


@dataclass
class LineRecord:
    line_index: int
    text: str
    meta: dict[str, str] = field(default_factory=dict)


@dataclass
class ExecutionRecord:
    log_id: int
    ts_ahead: int
    source: str
    status: str = PENDING
    ts_reply: int | None = None
    stdout: str = ""
    stderr: str = ""
    error: ErrorInfo | None = None
    lines: list[LineRecord] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lines:
            self.lines = [LineRecord(i, t) for i, t in enumerate(split_lines(self.source))]

    def line(self, index: int) -> LineRecord:
        if not 0 <= index < len(self.lines):
            raise UnresolvedIdError(f"no line {index} in log {self.log_id}")
        return self.lines[index]


@dataclass
class DocumentRecord:
    document_id: str
    env: EnvSnapshot = field(default_factory=EnvSnapshot)
    logs: list[ExecutionRecord] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)
    # Byte offset of a truncated trailing event (crash tail), load-time only.
    truncated_tail: int | None = None

    @property
    def valid(self) -> bool:
        return INVALID_KEY not in self.meta

    def log(self, log_id: int) -> ExecutionRecord:
        for rec in self.logs:
            if rec.log_id == log_id:
                return rec
        raise UnresolvedIdError(f"no log {log_id} in document {self.document_id}")

    def has_log(self, log_id: int) -> bool:
        return any(rec.log_id == log_id for rec in self.logs)

    def line(self, ref: LineRef) -> LineRecord:
        return self.log(ref[0]).line(ref[1])

    def iter_lines(self):
        for rec in self.logs:
            for ln in rec.lines:
                yield rec, ln

    def pending_log(self) -> ExecutionRecord | None:
        for rec in self.logs:
            if rec.status == PENDING:
                return rec
        return None


# ---------------------------------------------------------------------------
# Consolidated (nested) JSON view


def record_to_dict(rec: ExecutionRecord) -> dict:
    return {
        "log_id": rec.log_id,
        "ts_ahead": rec.ts_ahead,
        "ts_reply": rec.ts_reply,
        "source": rec.source,
        "status": rec.status,
        "stdout": rec.stdout,
        "stderr": rec.stderr,
        "error": rec.error.to_dict() if rec.error else None,
        "meta": dict(rec.meta),
        "lines": [
            {"line_index": ln.line_index, "text": ln.text, "meta": dict(ln.meta)}
            for ln in rec.lines
        ],
    }


def document_to_dict(doc: DocumentRecord) -> dict:
    return {
        "document_id": doc.document_id,
        "valid": doc.valid,
        "env": doc.env.to_dict(),
        "meta": dict(doc.meta),
        "logs": [record_to_dict(rec) for rec in doc.logs],
    }


# ---------------------------------------------------------------------------
# Event encoding


def _encode_event(obj: dict) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def _header_event(doc: DocumentRecord) -> dict:
    return {
        "event": "header",
        "document_id": doc.document_id,
        "env": doc.env.to_dict(),
    }


def _ahead_event(rec: ExecutionRecord) -> dict:
    return {
        "event": "ahead",
        "log_id": rec.log_id,
        "ts_ahead": rec.ts_ahead,
        "source": rec.source,
    }


def _complete_event(rec: ExecutionRecord) -> dict:
    ev = {
        "event": "complete",
        "log_id": rec.log_id,
        "ts_reply": rec.ts_reply,
        "status": rec.status,
        "stdout": rec.stdout,
        "stderr": rec.stderr,
        "ename": rec.error.ename if rec.error else None,
        "evalue": rec.error.evalue if rec.error else None,
        "traceback": rec.error.traceback if rec.error else None,
    }
    return ev


def _meta_event(scope: str, key: str, value: str, log_id: int | None = None,
                line_index: int | None = None) -> dict:
    ev: dict = {"event": "meta", "scope": scope, "key": key, "value": value}
    if log_id is not None:
        ev["log_id"] = log_id
    if line_index is not None:
        ev["line_index"] = line_index
    return ev


# ---------------------------------------------------------------------------
# Writer


class DocumentWriter:
    """Single writer for one document. All appends are synchronous: the
    event is on disk before the call returns."""

    def __init__(self, path: Path, record: DocumentRecord, fh):
        self.path = Path(path)
        self.record = record
        self._fh = fh

    def _append(self, event: dict) -> None:
        if not self.record.valid:
            raise DocumentInvalidError(
                f"document {self.record.document_id} is flagged invalid")
        data = _encode_event(event)
        try:
            self._fh.write(data)
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            # Fail closed: no further events may be written.
            self.record.meta.setdefault(INVALID_KEY, f"write failure: {exc}")
            raise

    def append_ahead(self, source: str, ts: int | None = None) -> int:
        """Log the intended code before it runs. Returns the new log_id."""
        ts = now_ms() if ts is None else int(ts)
        pending = self.record.pending_log()
        if pending is not None:
            # Kernel interrupt/restart: the old request will never complete.
            self.complete_log(pending.log_id, ABORTED, "", "", None, ts)
        log_id = self.record.logs[-1].log_id + 1 if self.record.logs else 0
        rec = ExecutionRecord(log_id=log_id, ts_ahead=ts, source=source)
        self._append(_ahead_event(rec))
        self.record.logs.append(rec)
        return log_id

    def complete_log(self, log_id: int, status: str, stdout: str = "",
                     stderr: str = "", error: ErrorInfo | None = None,
                     ts_reply: int | None = None) -> ExecutionRecord:
        if status not in COMPLETED_STATUSES:
            raise ValueError(f"invalid completion status {status!r}")
        if not self.record.has_log(log_id):
            raise ProtocolStateError(f"complete for unknown log {log_id}")
        rec = self.record.log(log_id)
        if rec.status != PENDING:
            raise ProtocolStateError(
                f"log {log_id} already completed with status {rec.status}")
        if (status == ERROR) != (error is not None):
            raise ValueError("error info present iff status is error")
        rec.status = status
        rec.stdout = stdout
        rec.stderr = stderr
        rec.error = error
        rec.ts_reply = now_ms() if ts_reply is None else int(ts_reply)
        if error is not None and error.failing_line_index is None:
            error.failing_line_index = derive_failing_line_index(
                error.traceback, len(rec.lines))
        self._append(_complete_event(rec))
        return rec

    def attach_metadata(self, ident, key: str, value: str) -> None:
        """Attach key=value at document (str id), log (int id) or line
        ((log_id, line_index)) granularity. Re-attachment overwrites."""
        key = str(key)
        value = str(value)
        if isinstance(ident, str):
            if ident != self.record.document_id:
                raise UnresolvedIdError(f"unknown document id {ident!r}")
            self._append(_meta_event("document", key, value))
            self.record.meta[key] = value
        elif isinstance(ident, int):
            rec = self.record.log(ident)
            self._append(_meta_event("log", key, value, log_id=ident))
            rec.meta[key] = value
        elif isinstance(ident, tuple) and len(ident) == 2:
            ln = self.record.line((int(ident[0]), int(ident[1])))
            self._append(_meta_event("line", key, value,
                                     log_id=int(ident[0]), line_index=int(ident[1])))
            ln.meta[key] = value
        else:
            raise UnresolvedIdError(f"unaddressable id {ident!r}")

    def mark_invalid(self, cause: str) -> None:
        """Flag the document invalid (fail-closed). Best effort on disk:
        if the flagging write itself fails the in-memory flag still holds."""
        if not self.record.valid:
            return
        try:
            self._append(_meta_event("document", INVALID_KEY, cause))
        except OSError:
            pass
        self.record.meta[INVALID_KEY] = cause

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            finally:
                self._fh = None


# ---------------------------------------------------------------------------
# Store paths and lifecycle


def document_dir(store_path, document_id: str) -> Path:
    return Path(store_path) / document_id


def events_path(store_path, document_id: str) -> Path:
    return document_dir(store_path, document_id) / EVENTS_FILENAME


def checkpoint_dir(store_path, document_id: str) -> Path:
    return document_dir(store_path, document_id) / CKPT_DIRNAME


def list_documents(store_path) -> list[str]:
    store = Path(store_path)
    if not store.is_dir():
        return []
    out = []
    for child in sorted(store.iterdir()):
        if child.is_dir() and (child / EVENTS_FILENAME).is_file():
            out.append(child.name)
    return out


def new_document_id() -> str:
    return secrets.token_hex(16)


def open_document(store_path, participant_meta: dict | None = None,
                  env: EnvSnapshot | None = None,
                  document_id: str | None = None) -> DocumentWriter:
    """Create a fresh document. The header is durable before return; on any
    failure nothing is left behind."""
    store = Path(store_path)
    if document_id is None:
        document_id = new_document_id()
        while document_dir(store, document_id).exists():
            document_id = new_document_id()
    doc_dir = document_dir(store, document_id)
    if doc_dir.exists():
        raise LogStoreError(f"document id {document_id!r} already exists in store")
    meta = {str(k): str(v) for k, v in (participant_meta or {}).items()}
    record = DocumentRecord(document_id=document_id,
                            env=env or EnvSnapshot(), meta=meta)
    doc_dir.mkdir(parents=True)
    path = doc_dir / EVENTS_FILENAME
    try:
        fh = open(path, "ab")
        try:
            fh.write(_encode_event(_header_event(record)))
            for key, value in record.meta.items():
                fh.write(_encode_event(_meta_event("document", key, value)))
            fh.flush()
            os.fsync(fh.fileno())
            dir_fd = os.open(doc_dir, os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
        except Exception:
            fh.close()
            raise
    except Exception:
        # No partial file left behind.
        if path.exists():
            path.unlink()
        doc_dir.rmdir()
        raise
    return DocumentWriter(path, record, fh)


def open_for_append(path) -> DocumentWriter:
    """Reopen an existing document for further appends (metadata, analysis
    tags). A torn crash tail is trimmed first: the torn event never
    completed its append, so dropping it is sound. Still single-writer."""
    path = _resolve_events_path(path)
    record = load_document(path)
    if record.truncated_tail is not None:
        with open(path, "r+b") as fh:
            fh.truncate(record.truncated_tail)
        record.truncated_tail = None
    fh = open(path, "ab")
    return DocumentWriter(path, record, fh)


def _resolve_events_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / EVENTS_FILENAME
    return p


def load_document(path) -> DocumentRecord:
    """Replay the event file into a DocumentRecord.

    A torn final event (crash tail) is tolerated and reported through
    `truncated_tail`; damage anywhere else raises MalformedLogError with
    the byte offset.
    """
    path = _resolve_events_path(path)
    data = path.read_bytes()
    if not data.strip():
        raise MalformedLogError(f"{path} is empty, not a document", 0)

    # (offset, chunk) for every non-empty physical line.
    chunks: list[tuple[int, bytes]] = []
    offset = 0
    for raw in data.split(b"\n"):
        if raw.strip():
            chunks.append((offset, raw))
        offset += len(raw) + 1

    doc: DocumentRecord | None = None
    truncated: int | None = None
    for pos, (off, raw) in enumerate(chunks):
        is_last = pos == len(chunks) - 1
        try:
            event = json.loads(raw.decode("utf-8"))
            if not isinstance(event, dict) or "event" not in event:
                raise ValueError("not an event object")
        except (ValueError, UnicodeDecodeError):
            if is_last:
                truncated = off
                break
            raise MalformedLogError("unparseable event record", off) from None
        try:
            doc = _apply_event(doc, event)
        except MalformedLogError:
            raise
        except LogStoreError as exc:
            if is_last:
                # A torn multi-event append (e.g. complete flushed without
                # its ahead) counts as tail damage.
                truncated = off
                break
            raise MalformedLogError(str(exc), off) from None
    if doc is None:
        raise MalformedLogError(f"{path} has no readable header", 0)
    doc.truncated_tail = truncated
    return doc


def _apply_event(doc: DocumentRecord | None, event: dict) -> DocumentRecord:
    kind = event["event"]
    if doc is None:
        if kind != "header":
            raise LogStoreError(f"first event is {kind!r}, expected header")
        return DocumentRecord(
            document_id=str(event["document_id"]),
            env=EnvSnapshot.from_dict(event.get("env", {})),
        )
    if kind == "header":
        raise LogStoreError("duplicate header event")
    if kind == "ahead":
        rec = ExecutionRecord(
            log_id=int(event["log_id"]),
            ts_ahead=int(event["ts_ahead"]),
            source=str(event["source"]),
        )
        doc.logs.append(rec)
    elif kind == "complete":
        log_id = int(event["log_id"])
        if not doc.has_log(log_id):
            raise LogStoreError(f"complete for unknown log {log_id}")
        rec = doc.log(log_id)
        if rec.status != PENDING:
            raise LogStoreError(f"duplicate completion for log {log_id}")
        rec.status = str(event["status"])
        rec.ts_reply = int(event["ts_reply"]) if event.get("ts_reply") is not None else None
        rec.stdout = str(event.get("stdout") or "")
        rec.stderr = str(event.get("stderr") or "")
        if event.get("ename"):
            rec.error = ErrorInfo(
                ename=str(event["ename"]),
                evalue=str(event.get("evalue") or ""),
                traceback=[str(t) for t in (event.get("traceback") or [])],
            )
            rec.error.failing_line_index = derive_failing_line_index(
                rec.error.traceback, len(rec.lines))
    elif kind == "meta":
        scope = event.get("scope")
        key = str(event["key"])
        value = str(event["value"])
        if scope == "document":
            doc.meta[key] = value
        elif scope == "log":
            log_id = int(event["log_id"])
            if not doc.has_log(log_id):
                raise LogStoreError(f"meta for unknown log {log_id}")
            doc.log(log_id).meta[key] = value
        elif scope == "line":
            log_id = int(event["log_id"])
            line_index = int(event["line_index"])
            if not doc.has_log(log_id) or not 0 <= line_index < len(doc.log(log_id).lines):
                raise LogStoreError(f"meta for unknown line ({log_id},{line_index})")
            doc.log(log_id).lines[line_index].meta[key] = value
        else:
            raise LogStoreError(f"unknown meta scope {scope!r}")
    else:
        raise LogStoreError(f"unknown event kind {kind!r}")
    return doc


def write_document(doc: DocumentRecord, path) -> Path:
    """Emit a complete in-memory document as a fresh event file.
    load_document(write_document(d)) is structurally equal to d."""
    path = _resolve_events_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_encode_event(_header_event(doc)))
        for key, value in doc.meta.items():
            fh.write(_encode_event(_meta_event("document", key, value)))
        for rec in doc.logs:
            fh.write(_encode_event(_ahead_event(rec)))
            if rec.status != PENDING:
                fh.write(_encode_event(_complete_event(rec)))
            for key, value in rec.meta.items():
                fh.write(_encode_event(_meta_event("log", key, value, log_id=rec.log_id)))
            for ln in rec.lines:
                for key, value in ln.meta.items():
                    fh.write(_encode_event(_meta_event(
                        "line", key, value, log_id=rec.log_id, line_index=ln.line_index)))
        fh.flush()
        os.fsync(fh.fileno())
    return path


# ---------------------------------------------------------------------------
# Validation


@dataclass
class Finding:
    code: str
    where: str
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "where": self.where, "message": self.message}


@dataclass
class ValidationReport:
    document_id: str
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, code: str, where: str, message: str) -> None:
        self.findings.append(Finding(code, where, message))

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "ok": self.ok,
            "findings": [f.to_dict() for f in self.findings],
        }


def validate_document(doc: DocumentRecord) -> ValidationReport:
    """Check every structural invariant; an empty report means all hold."""
    report = ValidationReport(doc.document_id)
    prev_id = None
    for pos, rec in enumerate(doc.logs):
        where = f"log {rec.log_id}"
        if prev_id is None:
            if rec.log_id != 0:
                report.add("id_gap", where,
                           f"first log_id is {rec.log_id}, expected 0")
        elif rec.log_id <= prev_id:
            report.add("id_order", where, f"log_id {rec.log_id} after {prev_id}")
        elif rec.log_id > prev_id + 1:
            report.add("id_gap", where, f"gap after {prev_id}")
        prev_id = rec.log_id

        if rec.status not in STATUSES:
            report.add("bad_status", where, f"unknown status {rec.status!r}")
        if rec.status == PENDING:
            if pos != len(doc.logs) - 1:
                report.add("mid_sequence_pending", where,
                           "pending record before the final log")
            if rec.ts_reply is not None:
                report.add("pending_reply", where, "pending record has ts_reply")
            if rec.stdout or rec.stderr or rec.error is not None:
                report.add("pending_payload", where,
                           "pending record carries streams or error")
        else:
            if rec.ts_reply is None:
                report.add("missing_reply", where,
                           f"{rec.status} record without ts_reply")
        if (rec.status == ERROR) != (rec.error is not None):
            report.add("error_mismatch", where,
                       "error info present iff status is error")
        if rec.error is not None and not rec.error.ename:
            report.add("empty_ename", where, "error with empty ename")

        expected = split_lines(rec.source)
        if len(rec.lines) != len(expected):
            report.add("line_count", where,
                       f"{len(rec.lines)} line records for {len(expected)} source lines")
        else:
            for i, (ln, text) in enumerate(zip(rec.lines, expected)):
                if ln.line_index != i:
                    report.add("line_index", f"line ({rec.log_id},{i})",
                               f"line_index {ln.line_index}, expected {i}")
                if ln.text != text:
                    report.add("line_text", f"line ({rec.log_id},{i})",
                               "line text does not match source split")

    names = [n for n, _ in doc.env.packages]
    if names != sorted(names):
        report.add("env_packages_order", "env", "packages not sorted by name")
    if len(names) != len(set(names)):
        report.add("env_packages_dup", "env", "duplicate package names")
    return report
