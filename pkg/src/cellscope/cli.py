"""One binary over the whole toolchain: capture, query, lineage, replay,
analyze and validate subcommands sharing store addressing and output
conventions.  Read subcommands are pure over the store, so repeating one
gives byte-identical output; errors leave as single-line JSON on stderr
with exit code 1 for domain problems and 2 for usage problems.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
from pathlib import Path

from . import __version__, analysis, capture, logstore, query, replay
from .kernelclient import KernelTimeout
from .lineage import DEPENDENTS, DEPS, build_lineage, lineage_query

STORE_ENV = "CELLSCOPE_STORE"

# failures a subcommand may legitimately hit; anything else is a bug and
# surfaces as a traceback
_DOMAIN_ERRORS = (
    logstore.LogStoreError,
    query.QueryParseError,
    query.GranularityError,
    analysis.RulesetError,
    replay.ReplayError,
    capture.CaptureError,
    KernelTimeout,
    OSError,
    ValueError,
)

_REGEX_HELP = (
    "MATCHES patterns use the standard regular-expression dialect without "
    "lookbehind ((?<=...) and (?<!...) are rejected at parse time)."
)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _fail(exc: BaseException) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return 1


def _store_dir(args) -> Path:
    store = Path(args.store)
    if not store.is_dir():
        raise logstore.LogStoreError(f"store directory {store} does not exist")
    return store


def _load_doc(store: Path, document_id: str) -> logstore.DocumentRecord:
    path = logstore.document_dir(store, document_id)
    if not path.is_dir():
        raise logstore.UnresolvedIdError(
            f"no document {document_id!r} in store {store}")
    return logstore.load_document(path)


def _load_all(store: Path) -> list[logstore.DocumentRecord]:
    docs = [_load_doc(store, doc_id)
            for doc_id in logstore.list_documents(store)]
    if not docs:
        raise logstore.LogStoreError(f"store {store} holds no documents")
    return docs


# ---------------------------------------------------------------------------
# capture

# test hook: when set, the capture loop exits as if interrupted
_capture_stop: threading.Event | None = None


def _cmd_capture(args) -> int:
    config = capture.SessionConfig(
        client_endpoint=args.listen,
        kernel_endpoints=args.kernel,
        store_path=args.store,
        fail_mode=args.fail_mode,
    )
    handle = capture.start_session(config)
    print(json.dumps({
        "document_id": handle.document_id,
        "listen": args.listen,
        "kernel": args.kernel,
        "store": str(args.store),
    }), flush=True)
    stop = _capture_stop or threading.Event()
    # SIGTERM should detach as cleanly as Ctrl-C
    try:
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
    except ValueError:
        pass  # not the main thread; the hook event still works
    try:
        while not stop.wait(timeout=0.2):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return 0


# ---------------------------------------------------------------------------
# query


def _result_rows(result: query.QueryResult) -> tuple[list[str], list[tuple]]:
    if result.granularity == query.DOCUMENT:
        return ["document_id"], [(i,) for i in sorted(result.document_ids())]
    if result.granularity == query.LOG:
        columns = ["document_id", "log_id", "status", "source"]
        rows = [(doc.document_id, rec.log_id, rec.status, rec.source)
                for doc in result.documents for rec in doc.logs]
        return columns, rows
    columns = ["document_id", "log_id", "line_index", "text"]
    rows = [(doc.document_id, rec.log_id, ln.line_index, ln.text)
            for doc in result.documents for rec in doc.logs
            for ln in rec.lines]
    return columns, rows


def _cmd_query(args) -> int:
    store = _store_dir(args)
    expr = query.parse_query(args.expr)
    result = query.find(_load_all(store), expr, args.granularity)
    if args.output == "csv":
        columns, rows = _result_rows(result)
        table = analysis.Table("query", columns, rows)
        sys.stdout.write(table.to_csv())
    else:
        _print_json(result.to_dict())
    return 0


# ---------------------------------------------------------------------------
# lineage


def _line_ref(text: str) -> tuple[int, int]:
    try:
        log_part, line_part = text.split(":", 1)
        return int(log_part), int(line_part)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected <log>:<line_index>, got {text!r}")


def _cmd_lineage(args) -> int:
    store = _store_dir(args)
    doc = _load_doc(store, args.doc)
    graph = build_lineage(doc)
    lines = lineage_query(graph, args.line, args.direction,
                          direct_only=args.direct,
                          include_toplevel=args.blocks)
    _print_json({
        "document_id": doc.document_id,
        "target": list(args.line),
        "direction": args.direction,
        "lines": [list(ref) for ref in lines],
    })
    return 0


# ---------------------------------------------------------------------------
# replay


def _cmd_replay(args) -> int:
    store = _store_dir(args)
    doc = _load_doc(store, args.doc)
    checkpoints = replay.list_checkpoints(store, doc.document_id)
    if not checkpoints:
        # first replay of a document pays one full drive to put
        # checkpoints on disk; later invocations reuse them
        checkpoints, _ = replay.materialize_checkpoints(
            doc, store, args.kernel, interval=args.interval)
    plan = replay.plan_replay(doc, args.target, checkpoints)
    transcript = replay.execute_replay(doc, plan, args.kernel)
    payload = {
        "plan": {
            "target_log": plan.target_log,
            "base": plan.base.at_log if plan.base is not None else None,
            "run": plan.run,
            "preamble": [[i.kind, i.name] for i in plan.preamble],
        },
        "transcript": transcript.to_dict(),
    }
    if args.validate:
        payload["validation"] = replay.validate_replay(doc, transcript).to_dict()
    _print_json(payload)
    return 0


# ---------------------------------------------------------------------------
# analyze


def _cmd_analyze(args) -> int:
    store = _store_dir(args)
    if args.docs:
        ids = [part for part in args.docs.split(",") if part]
        docs = [_load_doc(store, doc_id) for doc_id in ids]
    else:
        docs = _load_all(store)
    ruleset = (analysis.Ruleset.load(args.ruleset) if args.ruleset
               else analysis.Ruleset.default())
    recipes = args.recipes.split(",") if args.recipes else None
    report = analysis.run_recipes(docs, ruleset, recipes)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for name, table in sorted(report.tables.items()):
            (out / f"{name}.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        _print_json({
            "output": str(out),
            "tables": sorted(report.tables),
            "document_ids": report.document_ids,
            "ruleset_digest": report.ruleset_digest,
        })
    else:
        _print_json(report.to_dict())
    return 0


# ---------------------------------------------------------------------------
# validate


def _cmd_validate(args) -> int:
    store = _store_dir(args)
    docs = ([_load_doc(store, args.doc)] if args.doc else _load_all(store))
    reports = []
    clean = True
    for doc in docs:
        report = logstore.validate_document(doc)
        clean = clean and report.ok
        entry = report.to_dict()
        entry["valid"] = doc.valid
        reports.append(entry)
    _print_json({"documents": reports})
    return 0 if clean else 1


# ---------------------------------------------------------------------------
# wiring


def _add_store_flag(sub) -> None:
    sub.add_argument(
        "--store", default=os.environ.get(STORE_ENV),
        help=f"log store directory (default: ${STORE_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellscope",
        description="Execution-log capture, query, lineage, replay and "
                    "analysis for interactive notebook sessions.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser(
        "capture", help="proxy a kernel and record every execution",
        description="Relay traffic between a client and a kernel, writing "
                    "the execution ledger as it flows. Runs until "
                    "interrupted. Endpoint arguments take a shell,iopub "
                    "address pair.")
    p.add_argument("--kernel", required=True,
                   help="kernel endpoints to connect to (shell,iopub)")
    p.add_argument("--listen", required=True,
                   help="endpoints to expose to the client (shell,iopub)")
    _add_store_flag(p)
    p.add_argument("--fail-mode", default=capture.HALT_LOGGING,
                   choices=sorted(capture.FAIL_MODES))
    p.set_defaults(func=_cmd_capture)

    p = subs.add_parser(
        "query", help="run a bracketed query over the store",
        description="Evaluate a bracketed query expression against every "
                    "document in the store. " + _REGEX_HELP)
    _add_store_flag(p)
    p.add_argument("--expr", required=True,
                   help="query expression: (scope.field, matcher) leaves "
                        "composed with AND/OR/NOT, e.g. "
                        "'(line_key.code, [\"CONTAINS\", \"np\"])'")
    p.add_argument("--granularity", choices=list(query.GRANULARITIES),
                   default=None,
                   help="result scope (default: finest scope the "
                        "expression references)")
    p.add_argument("--output", choices=["json", "csv"], default="json")
    p.set_defaults(func=_cmd_query)

    p = subs.add_parser(
        "lineage", help="trace definition/use dependencies of a line")
    _add_store_flag(p)
    p.add_argument("--doc", required=True, help="document id")
    p.add_argument("--line", required=True, type=_line_ref,
                   metavar="LOG:IDX", help="target line, e.g. 3:0")
    p.add_argument("--direction", required=True, choices=[DEPS, DEPENDENTS])
    p.add_argument("--direct", action="store_true",
                   help="direct neighbours only, no transitive closure")
    p.add_argument("--blocks", action="store_true",
                   help="expand results to whole top-level statements")
    p.set_defaults(func=_cmd_lineage)

    p = subs.add_parser(
        "replay", help="rebuild the state at a log against a fresh kernel",
        description="Plan and run a replay to the target log. When the "
                    "document has no checkpoints yet, one full drive "
                    "materializes them at --interval first.")
    _add_store_flag(p)
    p.add_argument("--doc", required=True, help="document id")
    p.add_argument("--target", required=True, type=int, metavar="LOG_ID")
    p.add_argument("--kernel", required=True,
                   help="fresh kernel endpoints (shell,iopub)")
    p.add_argument("--interval", type=int, default=replay.DEFAULT_INTERVAL,
                   help="checkpoint spacing when materializing")
    p.add_argument("--validate", action="store_true",
                   help="append a per-log comparison against the record")
    p.set_defaults(func=_cmd_replay)

    p = subs.add_parser(
        "analyze", help="run metric recipes over documents")
    _add_store_flag(p)
    p.add_argument("--docs", default=None, metavar="ID,ID",
                   help="comma-separated document ids (default: all)")
    p.add_argument("--recipes", default=None,
                   metavar=",".join(analysis.RECIPES),
                   help="comma-separated recipe names (default: all)")
    p.add_argument("--ruleset", default=None,
                   help="ruleset JSON path (default: built-in ruleset)")
    p.add_argument("--output", default=None, metavar="DIR",
                   help="write per-recipe CSV plus report.json here "
                        "instead of printing the report")
    p.set_defaults(func=_cmd_analyze)

    p = subs.add_parser(
        "validate", help="check store invariants, exit 1 on findings")
    _add_store_flag(p)
    p.add_argument("--doc", default=None, help="single document id")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 for usage errors and 0 for --version/--help
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    if getattr(args, "store", "") is None:
        print(json.dumps({"error": "UsageError",
                          "message": f"--store or ${STORE_ENV} required"}),
              file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except _DOMAIN_ERRORS as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
