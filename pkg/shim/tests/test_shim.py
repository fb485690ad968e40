"""Shim behavior plus cross-checks against the primary reader.

The shim package itself never imports the primary; these tests do,
deliberately, because byte compatibility with the primary store format
is the whole point of the component.
"""

import contextlib
import json
import shutil
import subprocess
import sys
import tempfile
import types
from pathlib import Path

import pytest

from cellscope import analysis, logstore, replay
from cellscope.mockkernel import MockKernel

import cellscope_shim as shim


def open_session(store, document_id, **cfg):
    hook = shim.install_hook(shim.ShimConfig(
        store_path=str(store), document_id=document_id, **cfg))
    return hook, shim.ShimSession(hook)


def load(store, document_id):
    return logstore.load_document(logstore.events_path(store, document_id))


# -- hook sessions -----------------------------------------------------------

def test_three_cell_session_validates(tmp_path):
    hook, session = open_session(tmp_path, "s1")
    session.run_cell("x = 2")
    session.run_cell("y = x * 21\nprint(y)")
    session.run_cell("z = y - 1")
    hook.close()
    doc = load(tmp_path, "s1")
    assert logstore.validate_document(doc).findings == []
    assert len(doc.logs) == 3
    assert doc.valid
    assert [rec.status for rec in doc.logs] == ["ok", "ok", "ok"]
    assert doc.log(1).stdout == "42\n"


def test_zero_division_records_ename(tmp_path):
    hook, session = open_session(tmp_path, "s2")
    session.run_cell("a = 1")
    assert session.run_cell("b = a\nc = b / 0") == shim.ERROR
    hook.close()
    doc = load(tmp_path, "s2")
    rec = doc.log(1)
    assert rec.status == "error"
    assert rec.error.ename == "ZeroDivisionError"
    assert rec.error.failing_line_index == 1
    assert logstore.validate_document(doc).ok


def test_disable_mid_session_flags_document(tmp_path):
    hook, session = open_session(tmp_path, "s3")
    session.run_cell("kept = 1")
    hook.disable("operator stop")
    session.run_cell("unlogged = 2")
    hook.close()
    doc = load(tmp_path, "s3")
    assert len(doc.logs) == 1
    assert doc.valid is False
    assert doc.meta["capture_failure"] == "operator stop"
    assert session.namespace["unlogged"] == 2


def test_store_failure_disables_hook_not_execution(tmp_path, monkeypatch):
    hook, session = open_session(tmp_path, "s4")
    session.run_cell("q = 1")

    def dead(event):
        raise OSError("store gone")

    monkeypatch.setattr(hook.writer, "_write", dead)
    session.run_cell("r = q + 1")
    assert not hook.enabled
    assert session.namespace["r"] == 2
    session.run_cell("s = r + 1")
    assert session.namespace["s"] == 3
    hook.close()
    assert len(load(tmp_path, "s4").logs) == 1


def test_hook_invisible_to_user_output(tmp_path, capsys):
    hook, session = open_session(tmp_path, "s5")
    session.run_cell("print('hello')")
    hook.close()
    assert capsys.readouterr().out == "hello\n"
    assert load(tmp_path, "s5").log(0).stdout == "hello\n"


def test_unfinished_cell_aborts_on_next_ahead(tmp_path):
    hook, _ = open_session(tmp_path, "s6")
    hook.pre_cell("first = 1")
    hook.pre_cell("second = 2")  # the host never delivered a post for it
    hook.post_cell(shim.OK)
    hook.close()
    doc = load(tmp_path, "s6")
    assert [rec.status for rec in doc.logs] == ["aborted", "ok"]
    assert logstore.validate_document(doc).findings == []


def test_round_trip_through_primary_save_is_byte_identical(tmp_path):
    hook, session = open_session(tmp_path, "rt",
                                 participant_meta={"participant": "7"})
    session.run_cell("x = 'héllo'\nprint(x)")
    session.run_cell("broken /")
    session.run_cell("try:\n    1 / 0\nexcept ZeroDivisionError:\n    pass")
    hook.close()
    original = logstore.events_path(tmp_path, "rt").read_bytes()
    doc = load(tmp_path, "rt")
    assert logstore.validate_document(doc).findings == []
    assert doc.log(1).error.ename == "SyntaxError"
    written = logstore.write_document(doc, tmp_path / "copy")
    assert written.read_bytes() == original


class _HostEvents:
    # the registration surface an interactive host exposes to extensions
    def __init__(self):
        self.callbacks = {}

    def register(self, name, fn):
        self.callbacks[name] = fn


def test_extension_wires_the_execution_protocol(tmp_path, monkeypatch):
    monkeypatch.setenv("CELLSCOPE_SHIM_STORE", str(tmp_path))
    host = types.SimpleNamespace(events=_HostEvents())
    shim.load_ipython_extension(host)
    pre = host.events.callbacks["pre_run_cell"]
    post = host.events.callbacks["post_run_cell"]

    pre(types.SimpleNamespace(raw_cell="a = 1"))
    post(types.SimpleNamespace(error_before_exec=None, error_in_exec=None))
    pre(types.SimpleNamespace(raw_cell="b = a / 0"))
    post(types.SimpleNamespace(
        error_before_exec=None,
        error_in_exec=ZeroDivisionError("division by zero")))
    host._cellscope_shim_hook.close()

    doc = logstore.load_document(host._cellscope_shim_hook.writer.path)
    assert [rec.status for rec in doc.logs] == ["ok", "error"]
    assert doc.log(1).error.ename == "ZeroDivisionError"
    assert logstore.validate_document(doc).findings == []


# -- synthetic traces --------------------------------------------------------

def test_generate_empty_spec_is_header_only(tmp_path):
    path = shim.generate_synthetic_trace(
        {"document_id": "empty", "cells": []}, tmp_path)
    assert len(path.read_bytes().splitlines()) == 1
    doc = logstore.load_document(path)
    assert doc.valid
    assert doc.logs == []
    assert logstore.validate_document(doc).findings == []


def test_generate_rejects_outcome_divergence(tmp_path):
    with pytest.raises(shim.TraceSpecError, match="declared error, ran ok"):
        shim.generate_synthetic_trace(
            {"cells": [{"source": "x = 1", "status": "error"}]},
            tmp_path / "a")
    with pytest.raises(shim.TraceSpecError, match="declared ok, ran error"):
        shim.generate_synthetic_trace(
            {"cells": [{"source": "1 / 0"}]}, tmp_path / "b")
    with pytest.raises(shim.TraceSpecError, match="declared ename ValueError"):
        shim.generate_synthetic_trace(
            {"cells": [{"source": "1 / 0", "status": "error",
                        "ename": "ValueError"}]},
            tmp_path / "c")


def test_generated_plants_recovered_by_primary_detector(tmp_path):
    setup = "\n".join(f"qb{i} = {i}" for i in range(25))
    cells = [{"source": setup}]
    expected = []
    for i in range(25):
        error_id = len(cells)
        cells.append({"source": f"pa{i} = qb{i} + missing{i}",
                      "status": "error", "ename": "NameError"})
        if i % 3 == 0:
            cells.append({"source": f"wa{i} = {i} * 2"})
        fix_id = len(cells)
        cells.append({"source": f"pa{i} = qb{i} + 1"})
        expected.append((error_id, fix_id, fix_id - error_id))

    path = shim.generate_synthetic_trace(
        {"document_id": "plants", "cells": cells}, tmp_path)
    doc = logstore.load_document(path)
    assert logstore.validate_document(doc).ok
    table = analysis.error_resolution(doc, analysis.Ruleset.default())
    assert sorted(table.rows) == sorted(expected)


@contextlib.contextmanager
def mock_kernel():
    # ipc endpoints need short paths, so not under pytest's tmp tree
    base = tempfile.mkdtemp(prefix="shim-k-")
    shell, iopub = f"ipc://{base}/s", f"ipc://{base}/i"
    try:
        with MockKernel(shell, iopub):
            yield (shell, iopub)
    finally:
        shutil.rmtree(base, ignore_errors=True)


def test_generated_trace_replays_exact(tmp_path):
    spec = {"document_id": "mini", "interval": 3, "cells": [
        {"source": "import math"},
        {"source": "a = 2"},
        {"source": "b = a ** 5\nprint(b)"},
        {"source": "kaboom", "status": "error", "ename": "NameError"},
        {"source": "__ABORT__", "status": "aborted"},
        {"source": "c = b - 32"},
    ]}
    store = tmp_path / "st"
    doc = logstore.load_document(shim.generate_synthetic_trace(spec, store))
    assert logstore.validate_document(doc).ok
    assert doc.log(2).stdout == "32\n"

    with mock_kernel() as endpoints:
        ckpts, _ = replay.materialize_checkpoints(doc, store, endpoints,
                                                  interval=3)
    assert [c.at_log for c in ckpts] == [2, 5]
    for target in (3, 5):
        with mock_kernel() as endpoints:
            from_ckpt = replay.execute_replay(
                doc, replay.plan_replay(doc, target, ckpts), endpoints)
        with mock_kernel() as endpoints:
            scratch = replay.execute_replay(
                doc, replay.plan_replay(doc, target, []), endpoints)
        assert from_ckpt.variables == scratch.variables
        for transcript in (from_ckpt, scratch):
            report = replay.validate_replay(doc, transcript)
            assert report.ok
            assert all(e.verdict == replay.EXACT for e in report.entries)


# -- command line ------------------------------------------------------------

def test_generate_cli_round_trip(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"document_id": "cli", "cells": [
        {"source": "n = 3"},
        {"source": "print(n * n)"},
    ]}), encoding="utf-8")
    done = subprocess.run(
        [sys.executable, "-m", "cellscope_shim.generate",
         str(spec_path), str(tmp_path / "store")],
        capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    doc = logstore.load_document(Path(done.stdout.strip()))
    assert logstore.validate_document(doc).findings == []
    assert doc.log(1).stdout == "9\n"


def test_generate_cli_fails_loudly(tmp_path):
    spec_path = tmp_path / "bad.json"
    spec_path.write_text(json.dumps({"cells": [{"source": "1 / 0"}]}),
                         encoding="utf-8")
    done = subprocess.run(
        [sys.executable, "-m", "cellscope_shim.generate",
         str(spec_path), str(tmp_path / "store")],
        capture_output=True, text=True)
    assert done.returncode == 1
    assert done.stderr.startswith("generate failed:")
    usage = subprocess.run(
        [sys.executable, "-m", "cellscope_shim.generate"],
        capture_output=True, text=True)
    assert usage.returncode == 2
