import ast
import contextlib
import hashlib
import json
import pickle
import shutil
import tempfile
from pathlib import Path

import pytest

import replay_corpus
from cellscope import logstore, pyast, replay
from cellscope.kernelclient import KernelClient
from cellscope.logstore import DocumentRecord, ErrorInfo, ExecutionRecord
from cellscope.mockkernel import MockKernel


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _pickle_digest(value) -> str:
    return _sha(pickle.dumps(value, protocol=4))


@contextlib.contextmanager
def fresh_kernel(**kw):
    # ipc endpoints need short paths, hence mkdtemp over tmp_path
    tmp = tempfile.mkdtemp(prefix="cs-rk-")
    shell, iopub = f"ipc://{tmp}/s", f"ipc://{tmp}/i"
    kernel = MockKernel(shell, iopub, **kw).start()
    try:
        yield (shell, iopub), kernel
    finally:
        kernel.stop()
        shutil.rmtree(tmp, ignore_errors=True)


def record_session(store, cells, document_id):
    """Run the cells through a kernel and write the document the way a
    live session would, ahead record first, completion after."""
    tmp = tempfile.mkdtemp(prefix="cs-rec-")
    shell, iopub = f"ipc://{tmp}/s", f"ipc://{tmp}/i"
    try:
        with MockKernel(shell, iopub), \
                KernelClient(shell, iopub) as client:
            client.sync()
            writer = logstore.open_document(store, document_id=document_id)
            try:
                for source in cells:
                    log_id = writer.append_ahead(source)
                    res = client.execute(source)
                    error = None
                    if res.status == "error":
                        error = ErrorInfo(res.ename or "", res.evalue or "",
                                          res.traceback)
                    writer.complete_log(log_id, res.status, stdout=res.stdout,
                                        stderr=res.stderr, error=error)
            finally:
                writer.close()
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return logstore.load_document(logstore.document_dir(store, document_id))


# -- hand-built records for the pure-AST pieces ------------------------------


def _rec(log_id, source, status="ok", failing=None, ename="Boom"):
    rec = ExecutionRecord(log_id, 0, source, status=status)
    if status == "error":
        rec.error = ErrorInfo(ename, "detail", [], failing_line_index=failing)
    return rec

def _doc(*recs):
    return DocumentRecord("unit", logs=list(recs))


# -- fixtures ----------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_store():
    store = tempfile.mkdtemp(prefix="cs-rstore-")
    doc = record_session(store, replay_corpus.CELLS, "corpus")
    yield store, doc
    shutil.rmtree(store, ignore_errors=True)


@pytest.fixture(scope="module")
def materialized(corpus_store):
    store, doc = corpus_store
    with fresh_kernel() as (endpoints, _):
        ckpts, transcript = replay.materialize_checkpoints(
            doc, store, endpoints, interval=5)
    return store, doc, ckpts, transcript


# -- instrumentation ---------------------------------------------------------


def test_boundary_rule():
    assert replay.is_checkpoint_boundary(9, 10)
    assert not replay.is_checkpoint_boundary(8, 10)
    assert replay.is_checkpoint_boundary(4, 5)
    assert not replay.is_checkpoint_boundary(5, 5)
    assert not replay.is_checkpoint_boundary(3, 0)

def test_boundary_callable_policy():
    policy = lambda log_id: log_id == 3
    assert replay.instrument_checkpoint("x = 1", policy, 3) != "x = 1"
    assert replay.instrument_checkpoint("x = 1", policy, 4) == "x = 1"

def test_instrument_on_and_off_boundary():
    out = replay.instrument_checkpoint("x = 1", 10, 9, user_names=("x",))
    assert out.startswith("x = 1\n")
    assert "_cs_ck_pickle" in out
    assert replay.instrument_checkpoint("x = 1", 10, 8) == "x = 1"

def test_instrument_unparseable_unchanged():
    src = "def broken(:"
    assert replay.instrument_checkpoint(src, 10, 9) == src

def test_instrumented_source_parses():
    src = "total = sum(range(4))\nprint(total)"
    out = replay.instrument_checkpoint(
        src, 5, 4, document_id="d", ckpt_root="/x", user_names=("total",))
    ast.parse(out)


def test_save_snippet_kind_exclusions(tmp_path):
    import math
    dest = tmp_path / "ck" / "9"
    code = replay.save_snippet(("x", "f", "np", "ghost"), dest, "doc-1", 9)
    ns = {"x": 5, "f": lambda v: v, "np": math}
    with fresh_kernel(namespace=ns) as (endpoints, _):
        with KernelClient(*endpoints) as client:
            client.sync()
            res = client.execute(code)
    assert res.status == "ok"
    manifest = json.loads((dest / "manifest.json").read_text())
    assert manifest["document_id"] == "doc-1"
    assert manifest["at_log"] == 9
    assert manifest["variables"] == {"x": _pickle_digest(5)}
    assert manifest["skipped"] == [["f", "function"], ["np", "module"]]
    assert (dest / "x.blob").read_bytes() == pickle.dumps(5, protocol=4)

def test_save_snippet_unpicklable_reasons(tmp_path):
    import os
    dest = tmp_path / "ck" / "4"
    handle = open(os.devnull)
    ns = {"handle": handle}
    code = replay.save_snippet(("handle",), dest, "doc-2", 4)
    try:
        with fresh_kernel(namespace=ns) as (endpoints, _):
            with KernelClient(*endpoints) as client:
                client.sync()
                res = client.execute(code)
    finally:
        handle.close()
    assert res.status == "ok"
    manifest = json.loads((dest / "manifest.json").read_text())
    assert manifest["variables"] == {}
    (name, reason), = manifest["skipped"]
    assert name == "handle"
    assert reason.startswith("TypeError")


# -- assigned-name tracking --------------------------------------------------


def test_user_assigned_names_order():
    doc = _doc(
        _rec(0, "import math"),
        _rec(1, "a = 1\nb, c = 2, 3"),
        _rec(2, "def f():\n    inner = 1\n    return inner"),
        _rec(3, "a += 10"),
    )
    assert replay.user_assigned_names(doc) == ["math", "a", "b", "c", "f"]

def test_user_assigned_names_scopes():
    doc = _doc(
        _rec(0, "xs = [y for y in range(3)]"),
        _rec(1, "(n := 5)"),
        _rec(2, "for i in range(2):\n    pass"),
        _rec(3, "del xs"),
        _rec(4, "xs2 = (lambda q: q)(1)"),
    )
    assert replay.user_assigned_names(doc) == ["xs", "n", "i", "xs2"]

def test_user_assigned_names_error_cells():
    doc = _doc(
        _rec(0, "a = 1\nboom\nb = 2", status="error", failing=1),
        _rec(1, "c = 3\nd = 4", status="error", failing=None),
        _rec(2, "e = 5", status="aborted"),
    )
    # only statements that finished before the failing line count; an
    # unknown failing line means nothing can be trusted
    assert replay.user_assigned_names(doc) == ["a"]

def test_user_assigned_names_up_to_log():
    doc = _doc(_rec(0, "a = 1"), _rec(1, "b = 2"), _rec(2, "c = 3"))
    assert replay.user_assigned_names(doc, 1) == ["a", "b"]


# -- preamble ----------------------------------------------------------------


def test_preamble_order_and_kinds():
    doc = _doc(
        _rec(0, "import math"),
        _rec(1, "x = 2"),
        _rec(2, "def f(v):\n    return v + x"),
        _rec(3, "from fractions import Fraction"),
    )
    items = replay.collect_preamble(doc, 3)
    assert [(i.kind, i.name) for i in items] == [
        ("import", "math"), ("def", "f"), ("import", "Fraction")]
    assert items[1].text == "def f(v):\n    return v + x"
    assert items[0].origin == (0, 0)

def test_preamble_keeps_redefinitions_in_order():
    doc = _doc(
        _rec(0, "def f():\n    return 1"),
        _rec(1, "def f():\n    return 2"),
    )
    items = replay.collect_preamble(doc, 1)
    assert [i.text for i in items] == [
        "def f():\n    return 1", "def f():\n    return 2"]

def test_preamble_respects_failing_line():
    doc = _doc(
        _rec(0, "import math\nboom\nimport json", status="error", failing=1),
    )
    items = replay.collect_preamble(doc, 0)
    assert [i.name for i in items] == ["math"]

def test_preamble_skips_function_local_imports():
    doc = _doc(
        _rec(0, "def f():\n    import socket\n    return socket"),
        _rec(1, "try:\n    import math\nexcept ImportError:\n    pass"),
    )
    items = replay.collect_preamble(doc, 1)
    assert [(i.kind, i.name) for i in items] == [
        ("def", "f"), ("import", "math")]
    # guarded import is emitted dedented so it can run on its own
    assert items[1].text == "import math"

def test_preamble_includes_decorators():
    doc = _doc(
        _rec(0, "def deco(fn):\n    return fn"),
        _rec(1, "@deco\ndef g():\n    return 1"),
    )
    items = replay.collect_preamble(doc, 1)
    assert items[1].text.startswith("@deco\n")

def test_preamble_excludes_aborted_cells():
    doc = _doc(_rec(0, "import math", status="aborted"))
    assert replay.collect_preamble(doc, 0) == []


# -- planning ----------------------------------------------------------------


def _ok_doc(n, sources=None):
    recs = []
    for i in range(n):
        src = sources.get(i, f"v{i} = {i}") if sources else f"v{i} = {i}"
        recs.append(_rec(i, src))
    return _doc(*recs)

def _ckpt(at_log):
    return replay.Checkpoint("unit", at_log, {}, [])


def test_plan_picks_latest_usable_checkpoint():
    doc = _ok_doc(13)
    plan = replay.plan_replay(doc, 12, [_ckpt(5), _ckpt(10)])
    assert plan.base.at_log == 10
    assert plan.run == [11, 12]

def test_plan_falls_back_to_scratch():
    doc = _ok_doc(13)
    plan = replay.plan_replay(doc, 3, [_ckpt(5), _ckpt(10)])
    assert plan.base is None
    assert plan.run == [0, 1, 2, 3]
    assert plan.preamble == []

def test_plan_preamble_contents():
    doc = _ok_doc(13, {1: "import math", 4: "def f():\n    return 1"})
    plan = replay.plan_replay(doc, 12, [_ckpt(10)])
    assert [(i.kind, i.name, i.origin[0]) for i in plan.preamble] == [
        ("import", "math", 1), ("def", "f", 4)]

def test_plan_never_anchors_on_error_logs():
    doc = _ok_doc(13)
    doc.log(10).status = "error"
    doc.log(10).error = ErrorInfo("Boom", "", [])
    plan = replay.plan_replay(doc, 12, [_ckpt(5), _ckpt(10)])
    assert plan.base.at_log == 5
    assert plan.run == [6, 7, 8, 9, 10, 11, 12]
    plan = replay.plan_replay(doc, 12, [_ckpt(10)])
    assert plan.base is None

def test_plan_checkpoint_at_target_runs_nothing():
    doc = _ok_doc(13)
    plan = replay.plan_replay(doc, 10, [_ckpt(10)])
    assert plan.base.at_log == 10
    assert plan.run == []

def test_plan_unknown_target():
    doc = _ok_doc(3)
    with pytest.raises(logstore.UnresolvedIdError):
        replay.plan_replay(doc, 7, [])


# -- materialization over the corpus ----------------------------------------


def test_materialize_checkpoint_locations(materialized):
    _, doc, ckpts, _ = materialized
    assert [c.at_log for c in ckpts] == [4, 9, 14, 19, 24, 29, 34, 39]
    for c in ckpts:
        assert c.document_id == doc.document_id
        replay.verify_checkpoint(c)

def test_materialize_statuses_match_original(materialized):
    _, doc, _, transcript = materialized
    assert [e.status for e in transcript.entries] == \
        [rec.status for rec in doc.logs]
    report = replay.validate_replay(doc, transcript)
    assert report.ok
    assert report.counts()["exact"] == len(doc.logs)

def test_materialize_skip_reasons(materialized):
    _, _, ckpts, _ = materialized
    last = {c.at_log: c for c in ckpts}[39]
    reasons = dict(last.skipped)
    assert reasons["math"] == "module"
    assert reasons["scale"] == "function"
    assert reasons["Sample"] == "class"
    assert reasons["probe"].startswith("PicklingError")
    assert reasons["devnull_handle"].startswith("TypeError")
    assert "doubled" not in reasons  # deleted at cell 26, not listed at all
    assert "buffer_handle" in last.variables  # in-memory stream pickles fine

def test_materialize_list_checkpoints_round_trip(materialized):
    store, doc, ckpts, _ = materialized
    listed = replay.list_checkpoints(store, doc.document_id)
    assert [c.at_log for c in listed] == [c.at_log for c in ckpts]
    assert listed[0].variables.keys() == ckpts[0].variables.keys()


# -- replay paths ------------------------------------------------------------


def _run_replay(doc, target, checkpoints):
    plan = replay.plan_replay(doc, target, checkpoints)
    with fresh_kernel() as (endpoints, _):
        transcript = replay.execute_replay(doc, plan, endpoints)
    return plan, transcript


@pytest.mark.parametrize("target", [0, 4, 7, 12, 19, 23, 26, 34, 37, 39])
def test_path_independence(materialized, target):
    _, doc, ckpts, _ = materialized
    plan_c, via_ckpt = _run_replay(doc, target, ckpts)
    plan_s, via_scratch = _run_replay(doc, target, [])
    assert via_ckpt.variables == via_scratch.variables
    assert plan_s.base is None
    assert len(plan_c.run) <= 5  # bounded by the checkpoint interval
    for transcript in (via_ckpt, via_scratch):
        report = replay.validate_replay(doc, transcript)
        assert report.ok, report.to_dict()

def test_replay_statuses_match_prefix(materialized):
    _, doc, ckpts, _ = materialized
    _, transcript = _run_replay(doc, 16, ckpts)
    for entry in transcript.entries:
        assert entry.status == doc.log(entry.log_id).status

def test_replay_determinism(materialized):
    _, doc, ckpts, _ = materialized
    plan = replay.plan_replay(doc, 21, ckpts)
    with fresh_kernel() as (endpoints, _):
        first = replay.execute_replay(doc, plan, endpoints)
    with fresh_kernel() as (endpoints, _):
        second = replay.execute_replay(doc, plan, endpoints)
    assert first.to_dict() == second.to_dict()

def test_replay_from_checkpoint_at_target(materialized):
    _, doc, ckpts, _ = materialized
    plan, transcript = _run_replay(doc, 39, ckpts)
    assert plan.base.at_log == 39
    assert plan.run == []
    assert transcript.entries == []
    saved = {name: digest for name, (_, digest) in plan.base.variables.items()}
    assert transcript.variables == saved

def test_transcript_round_trip(materialized):
    _, doc, ckpts, _ = materialized
    _, transcript = _run_replay(doc, 12, ckpts)
    again = replay.ReplayTranscript.from_dict(
        json.loads(json.dumps(transcript.to_dict())))
    assert again == transcript


def _copied_checkpoint(materialized, at_log, dest_root):
    store, doc, ckpts, _ = materialized
    src = replay.checkpoint_path(store, doc.document_id, at_log)
    dest = Path(dest_root) / str(at_log)
    shutil.copytree(src, dest)
    return replay.load_checkpoint(dest)


def test_corrupted_blob_fails_before_execution(materialized, tmp_path):
    _, doc, _, _ = materialized
    ckpt = _copied_checkpoint(materialized, 9, tmp_path)
    blob = Path(ckpt.variables["acc"][0])
    blob.write_bytes(b"\x00" + blob.read_bytes()[1:])
    plan = replay.plan_replay(doc, 12, [ckpt])
    executed = []
    with fresh_kernel(on_execute=executed.append) as (endpoints, _):
        with pytest.raises(replay.ReplayError, match="'acc'"):
            replay.execute_replay(doc, plan, endpoints)
    assert executed == []

def test_missing_blob_fails_before_execution(materialized, tmp_path):
    _, doc, _, _ = materialized
    ckpt = _copied_checkpoint(materialized, 9, tmp_path)
    Path(ckpt.variables["total"][0]).unlink()
    plan = replay.plan_replay(doc, 10, [ckpt])
    executed = []
    with fresh_kernel(on_execute=executed.append) as (endpoints, _):
        with pytest.raises(replay.ReplayError, match="'total'"):
            replay.execute_replay(doc, plan, endpoints)
    assert executed == []


def test_aborted_boundary_still_anchors():
    cells = ["a = 1", "b = a + 1", "__ABORT__",
             "c = a + b", "d = c * 2", "print(d)"]
    store = tempfile.mkdtemp(prefix="cs-rmini-")
    try:
        doc = record_session(store, cells, "mini")
        with fresh_kernel() as (endpoints, _):
            ckpts, transcript = replay.materialize_checkpoints(
                doc, store, endpoints, interval=3)
        assert [c.at_log for c in ckpts] == [2, 5]
        assert doc.log(2).status == "aborted"
        assert set(ckpts[0].variables) == {"a", "b"}
        assert transcript.entries[2].status == "aborted"
        plan, via_ckpt = _run_replay(doc, 3, ckpts)
        assert plan.base.at_log == 2
        assert plan.run == [3]
        _, via_scratch = _run_replay(doc, 3, [])
        assert via_ckpt.variables == via_scratch.variables
        assert via_ckpt.variables["c"] == _pickle_digest(3)
    finally:
        shutil.rmtree(store, ignore_errors=True)


# -- validation --------------------------------------------------------------


def _error_doc(ename, evalue):
    rec = _rec(0, "boom()", status="error")
    rec.error = ErrorInfo(ename, evalue, [])
    return _doc(rec)

def _error_transcript(ename, evalue):
    return replay.ReplayTranscript(
        "unit", 0, None,
        [replay.TranscriptEntry(0, "error", ename, evalue)])


def test_validate_identical_error_is_exact():
    doc = _error_doc("NameError", "name 'x' is not defined")
    report = replay.validate_replay(
        doc, _error_transcript("NameError", "name 'x' is not defined"))
    assert [e.verdict for e in report.entries] == ["exact"]
    assert report.ok

def test_validate_address_difference_is_soft():
    doc = _error_doc("RuntimeError", "stale ref <obj at 0x7f01ab>")
    report = replay.validate_replay(
        doc, _error_transcript("RuntimeError", "stale ref <obj at 0x7fee02>"))
    entry, = report.entries
    assert entry.verdict == "soft"
    assert not report.ok

def test_validate_temp_path_difference_is_soft():
    a = tempfile.gettempdir() + "/work_a1/data.csv"
    b = tempfile.gettempdir() + "/work_b2/data.csv"
    doc = _error_doc("FileNotFoundError", f"missing {a}")
    report = replay.validate_replay(
        doc, _error_transcript("FileNotFoundError", f"missing {b}"))
    assert report.entries[0].verdict == "soft"

def test_validate_status_change_is_mismatch():
    doc = _doc(_rec(0, "x = d['nope']"))
    report = replay.validate_replay(
        doc, _error_transcript("KeyError", "'nope'"))
    entry, = report.entries
    assert entry.verdict == "mismatch"
    assert "status" in entry.detail

def test_validate_different_exception_is_mismatch():
    doc = _error_doc("ValueError", "bad input")
    report = replay.validate_replay(
        doc, _error_transcript("TypeError", "bad input"))
    assert report.entries[0].verdict == "mismatch"

def test_validate_counts_and_serialization():
    doc = _doc(
        _rec(0, "a = 1"),
        _error_doc("RuntimeError", "at 0x1").logs[0],
        _rec(2, "b = 2"),
    )
    doc.logs[1].log_id = 1
    transcript = replay.ReplayTranscript("unit", 2, None, [
        replay.TranscriptEntry(0, "ok"),
        replay.TranscriptEntry(1, "error", "RuntimeError", "at 0x2"),
        replay.TranscriptEntry(2, "error", "Boom", "detail"),
    ])
    report = replay.validate_replay(doc, transcript)
    assert report.counts() == {"exact": 1, "soft": 1, "mismatch": 1}
    assert not report.ok
    d = report.to_dict()
    assert d["counts"]["soft"] == 1
    assert [e["verdict"] for e in d["entries"]] == \
        ["exact", "soft", "mismatch"]

def test_normalize_nondeterminism_masks():
    masked = replay.normalize_nondeterminism(
        f"obj at 0xDEAD in {tempfile.gettempdir()}/run3/f.txt with seed 42")
    assert "0xDEAD" not in masked
    assert "<addr>" in masked
    assert "<tmp>" in masked
    assert "seed <n>" in masked
