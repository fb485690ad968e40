"""Synthetic trace generation: execute a cell script for real and write
the resulting document.

Spec shape: {"document_id": ..., "interval": ..., "cells": [{"source":
..., "status": "ok"|"error"|"aborted", "ename": ...}, ...]}. Status
defaults to ok. An aborted cell is planted, logged but never executed,
the way an interrupted request looks in a live ledger. Every other
declared outcome is checked against what actually happened; divergence
aborts generation, because a fixture that lies is worse than none.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from ._events import ABORTED, ERROR, OK
from .hook import ShimConfig, ShimSession, install_hook


class TraceSpecError(ValueError):
    """The spec asked for an outcome execution did not produce."""


def generate_synthetic_trace(spec: dict, store_path) -> Path:
    config = ShimConfig(store_path=str(store_path),
                        interval=int(spec.get("interval", 0)),
                        document_id=spec.get("document_id", "trace"))
    hook = install_hook(config)
    # no echo: cell output belongs in the trace, not on the generator's
    # own stdout, which the command line reserves for the result path
    session = ShimSession(hook, echo=False)
    try:
        for index, cell in enumerate(spec.get("cells", [])):
            source = cell["source"]
            expected = cell.get("status", OK)
            if expected == ABORTED:
                hook.pre_cell(source)
                hook.post_cell(ABORTED)
                continue
            if expected not in (OK, ERROR):
                raise TraceSpecError(
                    f"cell {index}: unknown status {expected!r}")
            got = session.run_cell(source)
            if got != expected:
                detail = f" ({session.last_ename})" if session.last_ename else ""
                raise TraceSpecError(
                    f"cell {index}: declared {expected}, ran {got}{detail}")
            want = cell.get("ename")
            if want is not None and want != session.last_ename:
                raise TraceSpecError(
                    f"cell {index}: declared ename {want}, "
                    f"raised {session.last_ename}")
    finally:
        hook.close()
    return hook.writer.path


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m cellscope_shim.generate <spec.json> <out_store>",
              file=sys.stderr)
        return 2
    spec_path, store = argv
    try:
        spec = json.loads(Path(spec_path).read_text(encoding="utf-8"))
        path = generate_synthetic_trace(spec, store)
    except (OSError, ValueError, KeyError) as exc:
        print(f"generate failed: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
