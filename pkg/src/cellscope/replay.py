"""Checkpointed state reconstruction.

Checkpoints are taken during a session by appending a save snippet to
cells that land on an interval boundary: the snippet pickles the user's
variables inside the kernel and writes them next to the log store.  A
replay later rebuilds the state at any log by loading the nearest usable
checkpoint, re-creating imports and definitions from the log text, and
re-running only the cells past the checkpoint against a fresh kernel.
The transcript of a replay carries per-cell outcomes and per-variable
content digests so two reconstructions can be compared.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
import shutil
import tempfile
import textwrap
from dataclasses import dataclass, field
from pathlib import Path

from . import logstore, pyast
from .capture import split_endpoints
from .kernelclient import KernelClient, KernelTimeout, parse_text_expression
from .logstore import DocumentRecord, ExecutionRecord

DEFAULT_INTERVAL = 10
MANIFEST_NAME = "manifest.json"
BLOB_SUFFIX = ".blob"

EXACT = "exact"
SOFT = "soft"
MISMATCH = "mismatch"

_EMPTY_DIGEST = hashlib.sha256(b"").hexdigest()


class ReplayError(RuntimeError):
    pass


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class Checkpoint:
    """A saved variable snapshot: blob files plus their content digests."""

    document_id: str
    at_log: int
    variables: dict[str, tuple[str, str]]  # name -> (blob path, sha256)
    skipped: list[tuple[str, str]]         # (name, reason)
    created: int = 0


@dataclass
class PreambleItem:
    kind: str   # "import" | "def"
    name: str
    text: str
    origin: tuple[int, int]  # (log_id, first line index)


@dataclass
class ReplayPlan:
    target_log: int
    base: Checkpoint | None          # None = replay from scratch
    preamble: list[PreambleItem]
    run: list[int]                   # contiguous log ids to re-execute


@dataclass
class TranscriptEntry:
    log_id: int
    status: str
    ename: str | None = None
    evalue: str | None = None
    stdout_digest: str = _EMPTY_DIGEST

    def to_dict(self) -> dict:
        return {
            "log_id": self.log_id,
            "status": self.status,
            "ename": self.ename,
            "evalue": self.evalue,
            "stdout_digest": self.stdout_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptEntry":
        return cls(int(d["log_id"]), d["status"], d.get("ename"),
                   d.get("evalue"), d.get("stdout_digest", _EMPTY_DIGEST))


@dataclass
class ReplayTranscript:
    """Outcome of one replay run: per-cell results and the variable
    digests observed once the target log was reached."""

    document_id: str
    target_log: int
    base: int | None
    entries: list[TranscriptEntry] = field(default_factory=list)
    variables: dict[str, str] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "target_log": self.target_log,
            "base": self.base,
            "entries": [e.to_dict() for e in self.entries],
            "variables": dict(self.variables),
            "skipped": [list(s) for s in self.skipped],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayTranscript":
        return cls(
            document_id=d["document_id"],
            target_log=int(d["target_log"]),
            base=d.get("base"),
            entries=[TranscriptEntry.from_dict(e) for e in d.get("entries", [])],
            variables=dict(d.get("variables", {})),
            skipped=[tuple(s) for s in d.get("skipped", [])],
        )


@dataclass
class MatchEntry:
    log_id: int
    verdict: str
    detail: str = ""


@dataclass
class MatchReport:
    document_id: str
    entries: list[MatchEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.verdict == EXACT for e in self.entries)

    def counts(self) -> dict[str, int]:
        out = {EXACT: 0, SOFT: 0, MISMATCH: 0}
        for e in self.entries:
            out[e.verdict] = out.get(e.verdict, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "ok": self.ok,
            "counts": self.counts(),
            "entries": [{"log_id": e.log_id, "verdict": e.verdict,
                         "detail": e.detail} for e in self.entries],
        }


# ---------------------------------------------------------------------------
# Statement-level bookkeeping over the log text


def _stmt_bound_names(node: ast.AST) -> list[str]:
    """Names a statement binds at module scope, in binding order.  Function,
    class and comprehension bodies introduce their own scope and are not
    descended into."""
    out: list[str] = []

    def visit(n: ast.AST) -> None:
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            out.append(n.name)
            return
        if isinstance(n, (ast.Lambda, ast.ListComp, ast.SetComp,
                          ast.DictComp, ast.GeneratorExp)):
            return
        if isinstance(n, ast.Import):
            for alias in n.names:
                out.append(alias.asname or alias.name.split(".")[0])
            return
        if isinstance(n, ast.ImportFrom):
            for alias in n.names:
                if alias.name != "*":
                    out.append(alias.asname or alias.name)
            return
        if isinstance(n, ast.Name):
            if isinstance(n.ctx, ast.Store):
                out.append(n.id)
            return
        for child in ast.iter_child_nodes(n):
            visit(child)

    visit(node)
    return out


def _statement_execution(rec: ExecutionRecord, module: ast.Module):
    """Yield (stmt, executed) for the cell's top-level statements.  Only
    statements that finished before the failing line count as executed in
    an errored cell; aborted and pending cells executed nothing."""
    if rec.status == logstore.OK:
        for stmt in module.body:
            yield stmt, True
        return
    if rec.status == logstore.ERROR:
        idx = rec.error.failing_line_index if rec.error else None
        for stmt in module.body:
            end = (stmt.end_lineno or stmt.lineno) - 1
            yield stmt, idx is not None and end < idx
        return
    for stmt in module.body:
        yield stmt, False


def user_assigned_names(doc: DocumentRecord, up_to_log: int | None = None
                        ) -> list[str]:
    """Names the user bound at top level across executed statements of
    logs <= up_to_log, ordered by first assignment."""
    seen: set[str] = set()
    out: list[str] = []
    for rec, tree in pyast.iter_parsed_logs(doc, up_to_log):
        for stmt, executed in _statement_execution(rec, tree.module):
            if not executed:
                continue
            for name in _stmt_bound_names(stmt):
                if name not in seen:
                    seen.add(name)
                    out.append(name)
    return out


def _imports_within(stmt: ast.stmt):
    """Import statements reachable at runtime from a top-level statement:
    the statement itself or ones nested in control flow, but never inside
    a def, class or lambda body."""
    if isinstance(stmt, (ast.Import, ast.ImportFrom)):
        yield stmt
        return
    if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef,
                         ast.ClassDef, ast.Lambda)):
        return
    for child in ast.iter_child_nodes(stmt):
        yield from _imports_within(child)


def collect_preamble(doc: DocumentRecord, up_to_log: int | None
                     ) -> list[PreambleItem]:
    """Imports and top-level definitions from executed statements of logs
    <= up_to_log, in execution order.  Re-running the items in order
    reproduces the original bindings; later redefinitions win by
    position, so duplicates are kept."""
    items: list[PreambleItem] = []
    for rec, tree in pyast.iter_parsed_logs(doc, up_to_log):
        lines = logstore.split_lines(rec.source)
        for stmt, executed in _statement_execution(rec, tree.module):
            if not executed:
                continue
            if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef,
                                 ast.ClassDef)):
                start = stmt.lineno - 1
                for deco in stmt.decorator_list:
                    start = min(start, deco.lineno - 1)
                end = (stmt.end_lineno or stmt.lineno) - 1
                text = textwrap.dedent("\n".join(lines[start:end + 1]))
                items.append(PreambleItem("def", stmt.name, text,
                                          (rec.log_id, start)))
                continue
            for node in _imports_within(stmt):
                start = node.lineno - 1
                end = (node.end_lineno or node.lineno) - 1
                text = textwrap.dedent("\n".join(lines[start:end + 1]))
                bound = ", ".join(_stmt_bound_names(node))
                items.append(PreambleItem("import", bound, text,
                                          (rec.log_id, start)))
    return items


# ---------------------------------------------------------------------------
# Checkpoint instrumentation

# Kernel-side snippets use _cs_ck_/_cs_rp_ prefixes so they cannot collide
# with user variables, which the explicit name lists keep out anyway.

_SAVE_TEMPLATE = """\
import hashlib as _cs_ck_hashlib
import json as _cs_ck_json
import os as _cs_ck_os
import pickle as _cs_ck_pickle
import time as _cs_ck_time
import types as _cs_ck_types
_cs_ck_dir = %(dir)s
_cs_ck_os.makedirs(_cs_ck_dir, exist_ok=True)
_cs_ck_vars = {}
_cs_ck_skipped = []
for _cs_ck_name in %(names)s:
    if _cs_ck_name not in globals():
        continue
    _cs_ck_value = globals()[_cs_ck_name]
    if isinstance(_cs_ck_value, _cs_ck_types.ModuleType):
        _cs_ck_skipped.append([_cs_ck_name, "module"])
        continue
    if isinstance(_cs_ck_value, (_cs_ck_types.FunctionType,
                                 _cs_ck_types.BuiltinFunctionType,
                                 _cs_ck_types.MethodType)):
        _cs_ck_skipped.append([_cs_ck_name, "function"])
        continue
    if isinstance(_cs_ck_value, type):
        _cs_ck_skipped.append([_cs_ck_name, "class"])
        continue
    try:
        _cs_ck_blob = _cs_ck_pickle.dumps(_cs_ck_value, protocol=4)
    except Exception as _cs_ck_exc:
        _cs_ck_skipped.append(
            [_cs_ck_name, type(_cs_ck_exc).__name__ + ": " + str(_cs_ck_exc)])
        continue
    with open(_cs_ck_os.path.join(_cs_ck_dir, _cs_ck_name + "%(suffix)s"),
              "wb") as _cs_ck_fh:
        _cs_ck_fh.write(_cs_ck_blob)
    _cs_ck_vars[_cs_ck_name] = _cs_ck_hashlib.sha256(_cs_ck_blob).hexdigest()
with open(_cs_ck_os.path.join(_cs_ck_dir, %(manifest)s), "w") as _cs_ck_fh:
    _cs_ck_json.dump({"document_id": %(doc)s, "at_log": %(log)d,
                      "created": int(_cs_ck_time.time() * 1000),
                      "variables": _cs_ck_vars,
                      "skipped": _cs_ck_skipped}, _cs_ck_fh, sort_keys=True)
"""


def is_checkpoint_boundary(log_id: int, interval_policy) -> bool:
    """True when a checkpoint should be taken after this log.  The policy
    is an interval (every Nth log, counting from 0) or a callable."""
    if callable(interval_policy):
        return bool(interval_policy(log_id))
    interval = int(interval_policy)
    if interval <= 0:
        return False
    return (log_id + 1) % interval == 0


def save_snippet(names, dest_dir, document_id: str, at_log: int) -> str:
    """Kernel-side code that pickles the named variables into dest_dir and
    writes a manifest of digests and skips.  Modules, functions and
    classes are skipped by kind; anything the pickler rejects is skipped
    with the failure text."""
    return _SAVE_TEMPLATE % {
        "dir": repr(str(dest_dir)),
        "names": repr(tuple(names)),
        "suffix": BLOB_SUFFIX,
        "manifest": repr(MANIFEST_NAME),
        "doc": repr(document_id),
        "log": at_log,
    }


def instrument_checkpoint(source: str, interval_policy, log_id: int, *,
                          document_id: str = "", ckpt_root="",
                          user_names=()) -> str:
    """Append the variable-save snippet when log_id lands on a checkpoint
    boundary.  Off-boundary or unparseable cells come back unchanged;
    instrumentation itself never fails."""
    if not is_checkpoint_boundary(log_id, interval_policy):
        return source
    if isinstance(pyast.parse_cell(source), pyast.SyntaxFailure):
        return source
    dest = Path(str(ckpt_root)) / str(log_id)
    body = source if source.endswith("\n") else source + "\n"
    return body + save_snippet(user_names, dest, document_id, log_id)


# ---------------------------------------------------------------------------
# Checkpoints on disk


def checkpoint_path(store_path, document_id: str, at_log: int) -> Path:
    return logstore.checkpoint_dir(store_path, document_id) / str(at_log)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        variables = {
            name: (str(path / (name + BLOB_SUFFIX)), digest)
            for name, digest in manifest["variables"].items()
        }
        return Checkpoint(
            document_id=manifest["document_id"],
            at_log=int(manifest["at_log"]),
            variables=variables,
            skipped=[tuple(s) for s in manifest.get("skipped", [])],
            created=int(manifest.get("created", 0)),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ReplayError(f"unreadable checkpoint manifest in {path}: {exc}")


def list_checkpoints(store_path, document_id: str) -> list[Checkpoint]:
    root = logstore.checkpoint_dir(store_path, document_id)
    if not root.is_dir():
        return []
    out = []
    for child in root.iterdir():
        if not (child.is_dir() and child.name.isdigit()):
            continue
        try:
            out.append(load_checkpoint(child))
        except ReplayError:
            continue
    out.sort(key=lambda c: c.at_log)
    return out


def verify_checkpoint(ckpt: Checkpoint) -> None:
    """Re-hash every blob against the manifest before anything gets
    executed; a missing or tampered blob names its variable."""
    for name in sorted(ckpt.variables):
        blob_path, digest = ckpt.variables[name]
        try:
            data = Path(blob_path).read_bytes()
        except OSError as exc:
            raise ReplayError(
                f"checkpoint blob for variable {name!r} unreadable: {exc}")
        if _sha(data) != digest:
            raise ReplayError(
                f"checkpoint blob for variable {name!r} fails digest check")


# ---------------------------------------------------------------------------
# Planning


def plan_replay(doc: DocumentRecord, target_log: int,
                checkpoints) -> ReplayPlan:
    """Pick the latest checkpoint at or before the target whose anchor log
    completed without error, then plan what still has to run.  With no
    usable checkpoint the plan starts from scratch and the preamble is
    empty, since the run covers every log anyway."""
    doc.log(target_log)
    usable = [
        c for c in checkpoints
        if c.at_log <= target_log and doc.has_log(c.at_log)
        and doc.log(c.at_log).status in (logstore.OK, logstore.ABORTED)
    ]
    base = max(usable, key=lambda c: c.at_log, default=None)
    if base is None:
        run = [rec.log_id for rec in doc.logs if rec.log_id <= target_log]
        preamble: list[PreambleItem] = []
    else:
        run = [rec.log_id for rec in doc.logs
               if base.at_log < rec.log_id <= target_log]
        preamble = collect_preamble(doc, base.at_log)
    return ReplayPlan(target_log, base, preamble, run)


# ---------------------------------------------------------------------------
# Execution

_LOAD_TEMPLATE = """\
import pickle as _cs_rp_pickle
for _cs_rp_name, _cs_rp_path in %(pairs)s:
    with open(_cs_rp_path, "rb") as _cs_rp_fh:
        globals()[_cs_rp_name] = _cs_rp_pickle.load(_cs_rp_fh)
"""

# Digest collection mirrors the save snippet's kind exclusions silently:
# modules, functions and classes are rebuilt from preamble or imports, so
# only pickler rejections are worth reporting.
_DIGEST_TEMPLATE = """\
import hashlib as _cs_rp_hashlib
import json as _cs_rp_json
import pickle as _cs_rp_pickle
import types as _cs_rp_types
_cs_rp_digests = {}
_cs_rp_skipped = []
for _cs_rp_name in %(names)s:
    if _cs_rp_name not in globals():
        continue
    _cs_rp_value = globals()[_cs_rp_name]
    if isinstance(_cs_rp_value, (_cs_rp_types.ModuleType,
                                 _cs_rp_types.FunctionType,
                                 _cs_rp_types.BuiltinFunctionType,
                                 _cs_rp_types.MethodType, type)):
        continue
    try:
        _cs_rp_blob = _cs_rp_pickle.dumps(_cs_rp_value, protocol=4)
    except Exception as _cs_rp_exc:
        _cs_rp_skipped.append(
            [_cs_rp_name, type(_cs_rp_exc).__name__ + ": " + str(_cs_rp_exc)])
        continue
    _cs_rp_digests[_cs_rp_name] = _cs_rp_hashlib.sha256(_cs_rp_blob).hexdigest()
"""

_STATE_EXPR = ('_cs_rp_json.dumps({"variables": _cs_rp_digests, '
               '"skipped": _cs_rp_skipped}, sort_keys=True)')


def _connect(kernel_endpoints, key: bytes) -> KernelClient:
    shell, iopub = split_endpoints(kernel_endpoints)
    client = KernelClient(shell, iopub, key=key)
    try:
        client.sync()
    except KernelTimeout:
        client.close()
        raise ReplayError(f"kernel unreachable at {shell}")
    return client


def _entry_from_result(log_id: int, result) -> TranscriptEntry:
    return TranscriptEntry(log_id, result.status, result.ename,
                           result.evalue, _sha(result.stdout.encode("utf-8")))


def _skipped_entry(rec: ExecutionRecord) -> TranscriptEntry:
    # aborted and pending cells never ran originally; copy the status so
    # the transcript still has one entry per planned log
    return TranscriptEntry(rec.log_id, rec.status)


def _collect_state(client: KernelClient, names, timeout: float
                   ) -> tuple[dict[str, str], list[tuple[str, str]]]:
    code = _DIGEST_TEMPLATE % {"names": repr(tuple(names))}
    result = client.execute(code, timeout=timeout,
                            user_expressions={"state": _STATE_EXPR})
    if result.status != "ok":
        raise ReplayError(
            f"variable digest collection failed: {result.ename}: {result.evalue}")
    payload = parse_text_expression(
        result.reply_content.get("user_expressions", {}).get("state"))
    if payload is None:
        raise ReplayError("variable digest collection returned no state")
    state = json.loads(payload)
    return dict(state["variables"]), [tuple(s) for s in state["skipped"]]


def execute_replay(doc: DocumentRecord, plan: ReplayPlan, kernel_endpoints,
                   key: bytes = b"", timeout: float = 30.0
                   ) -> ReplayTranscript:
    """Drive the plan against a fresh kernel: verify and load the base
    checkpoint, re-create imports and definitions, then re-run the
    remaining cells in order.  Cells that error keep the run going, the
    way the original session did; aborted and pending cells are skipped
    with their status copied."""
    if plan.base is not None:
        verify_checkpoint(plan.base)
    client = _connect(kernel_endpoints, key)
    try:
        if plan.preamble:
            code = "\n\n".join(item.text for item in plan.preamble)
            result = client.execute(code, timeout=timeout)
            if result.status != "ok":
                raise ReplayError(
                    f"preamble failed: {result.ename}: {result.evalue}")
        if plan.base is not None and plan.base.variables:
            pairs = sorted((name, path) for name, (path, _)
                           in plan.base.variables.items())
            code = _LOAD_TEMPLATE % {"pairs": repr(pairs)}
            result = client.execute(code, timeout=timeout)
            if result.status != "ok":
                raise ReplayError(
                    f"checkpoint load failed: {result.ename}: {result.evalue}")
        entries = []
        for log_id in plan.run:
            rec = doc.log(log_id)
            if rec.status in (logstore.ABORTED, logstore.PENDING):
                entries.append(_skipped_entry(rec))
                continue
            result = client.execute(rec.source, timeout=timeout)
            entries.append(_entry_from_result(log_id, result))
        names = user_assigned_names(doc, plan.target_log)
        variables, skipped = _collect_state(client, names, timeout)
    finally:
        client.close()
    return ReplayTranscript(
        document_id=doc.document_id,
        target_log=plan.target_log,
        base=plan.base.at_log if plan.base is not None else None,
        entries=entries,
        variables=variables,
        skipped=skipped,
    )


def materialize_checkpoints(doc: DocumentRecord, store_path,
                            kernel_endpoints, interval=DEFAULT_INTERVAL,
                            key: bytes = b"", fresh: bool = True,
                            timeout: float = 30.0
                            ) -> tuple[list[Checkpoint], ReplayTranscript]:
    """Re-run a recorded document start to finish, instrumenting boundary
    cells so checkpoints land on disk under the store.  Error cells are
    never instrumented and never anchor a checkpoint; an aborted cell on
    a boundary contributes the save snippet alone, so the snapshot holds
    the state the session actually had there.  Returns the checkpoints
    plus the transcript of the drive."""
    root = logstore.checkpoint_dir(store_path, doc.document_id)
    if fresh and root.exists():
        shutil.rmtree(root)
    if not doc.logs:
        return [], ReplayTranscript(doc.document_id, -1, None)
    client = _connect(kernel_endpoints, key)
    try:
        entries = []
        for rec in doc.logs:
            boundary = is_checkpoint_boundary(rec.log_id, interval)
            if rec.status in (logstore.ABORTED, logstore.PENDING):
                if boundary and rec.status == logstore.ABORTED:
                    names = user_assigned_names(doc, rec.log_id)
                    code = save_snippet(names, root / str(rec.log_id),
                                        doc.document_id, rec.log_id)
                    result = client.execute(code, timeout=timeout)
                    if result.status != "ok":
                        raise ReplayError(
                            f"checkpoint save at log {rec.log_id} failed: "
                            f"{result.ename}: {result.evalue}")
                entries.append(_skipped_entry(rec))
                continue
            source = rec.source
            if boundary and rec.status == logstore.OK:
                source = instrument_checkpoint(
                    rec.source, interval, rec.log_id,
                    document_id=doc.document_id, ckpt_root=root,
                    user_names=user_assigned_names(doc, rec.log_id))
            result = client.execute(source, timeout=timeout)
            entries.append(_entry_from_result(rec.log_id, result))
        target = doc.logs[-1].log_id
        names = user_assigned_names(doc, target)
        variables, skipped = _collect_state(client, names, timeout)
    finally:
        client.close()
    transcript = ReplayTranscript(doc.document_id, target, None, entries,
                                  variables, skipped)
    return list_checkpoints(store_path, doc.document_id), transcript


# ---------------------------------------------------------------------------
# Validation

_ADDR_RE = re.compile(r"0x[0-9a-fA-F]+")
_SEED_RE = re.compile(r"\bseed[ =:]+\d+", re.IGNORECASE)


def _tmp_patterns() -> list[re.Pattern]:
    roots = {tempfile.gettempdir(), "/tmp"}
    return [re.compile(re.escape(root) + r"[\w./-]*")
            for root in sorted(roots, key=len, reverse=True)]


_TMP_RES = _tmp_patterns()


def normalize_nondeterminism(text: str) -> str:
    """Mask value fragments that legitimately vary between runs: heap
    addresses, temp-file paths, seed numbers."""
    out = _ADDR_RE.sub("<addr>", text)
    for rx in _TMP_RES:
        out = rx.sub("<tmp>", out)
    return _SEED_RE.sub("seed <n>", out)


def _verdict(rec: ExecutionRecord, entry: TranscriptEntry
             ) -> tuple[str, str]:
    if rec.status != entry.status:
        return MISMATCH, f"status {rec.status!r} vs {entry.status!r}"
    if rec.status != logstore.ERROR:
        return EXACT, ""
    orig_ename = rec.error.ename if rec.error else ""
    orig_evalue = rec.error.evalue if rec.error else ""
    ename = entry.ename or ""
    evalue = entry.evalue or ""
    if orig_ename != ename:
        return MISMATCH, f"ename {orig_ename!r} vs {ename!r}"
    if orig_evalue == evalue:
        return EXACT, ""
    if normalize_nondeterminism(orig_evalue) == normalize_nondeterminism(evalue):
        return SOFT, "evalue differs only in masked nondeterminism"
    return MISMATCH, f"evalue {orig_evalue!r} vs {evalue!r}"


def validate_replay(doc: DocumentRecord,
                    transcript: ReplayTranscript) -> MatchReport:
    """Per-cell comparison of a replay against the original record.
    exact: same status and, for errors, the same exception verbatim.
    soft: the exception text differs only in known nondeterministic
    fragments.  Anything else is a mismatch."""
    entries = []
    for e in transcript.entries:
        rec = doc.log(e.log_id)
        verdict, detail = _verdict(rec, e)
        entries.append(MatchEntry(e.log_id, verdict, detail))
    return MatchReport(transcript.document_id, entries)
