"""Interpreter-side capture without a wire proxy.

The host interpreter calls pre_cell/post_cell around each execution (or
lets ShimSession drive exec itself) and the events land in the same
store format the proxy writes. No transparency machinery: the hook never
touches what the user sees, and any store failure silently and
permanently disables logging rather than disturbing the session.
"""

from __future__ import annotations

import sys
import traceback as tb_module
from dataclasses import dataclass, field

from ._events import ERROR, OK, EventWriter, environment, now_ms


@dataclass
class ShimConfig:
    store_path: str
    # checkpoint cadence the trace is meant to be replayed with; carried
    # in the header so downstream tooling need not guess
    interval: int = 10
    enabled: bool = True
    document_id: str | None = None
    participant_meta: dict = field(default_factory=dict)


class ShimHook:
    """One document per hook, fail-closed on any store error."""

    def __init__(self, config: ShimConfig):
        self.config = config
        meta = {}
        if config.interval:
            meta["checkpoint_interval"] = str(config.interval)
        self.writer = EventWriter(
            config.store_path,
            config.document_id or f"shim-{now_ms():x}",
            env=environment(notebook_meta=meta),
            participant_meta=config.participant_meta)
        self.document_id = self.writer.document_id
        self._active: int | None = None

    @property
    def enabled(self) -> bool:
        return self.config.enabled

    def pre_cell(self, source: str) -> None:
        if not self.config.enabled:
            return
        try:
            self._active = self.writer.append_ahead(source)
        except OSError as exc:
            self._fail(f"ahead write failed: {exc}")

    def post_cell(self, status: str = OK, stdout: str = "", stderr: str = "",
                  ename: str | None = None, evalue: str | None = None,
                  traceback: list[str] | None = None) -> None:
        if not self.config.enabled or self._active is None:
            return
        log_id, self._active = self._active, None
        try:
            self.writer.complete(log_id, status, stdout, stderr,
                                 ename, evalue, traceback)
        except OSError as exc:
            self._fail(f"complete write failed: {exc}")

    def _fail(self, cause: str) -> None:
        self.config.enabled = False
        self._active = None
        self.writer.mark_invalid(cause)

    def disable(self, cause: str = "hook disabled") -> None:
        """Deliberate stop: later cells go unlogged, and the document is
        flagged so readers do not mistake it for a complete session."""
        if self.config.enabled:
            self.config.enabled = False
            self._active = None
            self.writer.mark_invalid(cause)

    def close(self) -> None:
        self.writer.close()


def install_hook(config: ShimConfig) -> ShimHook:
    """Open the document and return the hook handle. Raises if the store
    is not writable; everything after installation fails closed."""
    return ShimHook(config)


class _Tee:
    # duplicates writes so capture never swallows user output; passthrough
    # None captures silently, for batch runs with no terminal to echo to
    def __init__(self, passthrough):
        self._passthrough = passthrough
        self._parts = []

    def write(self, text):
        self._parts.append(text)
        if self._passthrough is not None:
            self._passthrough.write(text)

    def flush(self):
        if self._passthrough is not None:
            self._passthrough.flush()

    def value(self) -> str:
        return "".join(self._parts)


def _cell_traceback(exc: BaseException) -> list[str]:
    """Frames from the cell inward; the runner's own frames stay out of
    the record, the way a kernel hides its plumbing."""
    tb = exc.__traceback__
    while tb is not None and tb.tb_frame.f_code.co_filename != "<cell>":
        tb = tb.tb_next
    return [part.rstrip("\n")
            for part in tb_module.format_exception(type(exc), exc, tb)]


class ShimSession:
    """Minimal interactive runner for hosts without an event API: one
    persistent namespace, each run_cell wrapped in the hook events."""

    def __init__(self, hook: ShimHook, namespace: dict | None = None,
                 echo: bool = True):
        self.hook = hook
        self.namespace = namespace if namespace is not None else {
            "__name__": "__main__"}
        self.echo = echo
        self.last_ename: str | None = None

    def run_cell(self, source: str) -> str:
        self.hook.pre_cell(source)
        out = _Tee(sys.stdout if self.echo else None)
        err = _Tee(sys.stderr if self.echo else None)
        saved = sys.stdout, sys.stderr
        sys.stdout, sys.stderr = out, err
        error: BaseException | None = None
        try:
            exec(compile(source, "<cell>", "exec"), self.namespace)
        except BaseException as exc:
            error = exc
        finally:
            sys.stdout, sys.stderr = saved
        if error is None:
            self.last_ename = None
            self.hook.post_cell(OK, out.value(), err.value())
            return OK
        self.last_ename = type(error).__name__
        self.hook.post_cell(ERROR, out.value(), err.value(),
                            ename=self.last_ename, evalue=str(error),
                            traceback=_cell_traceback(error))
        if not isinstance(error, Exception):
            raise error
        return ERROR


def load_ipython_extension(ipython):
    """%load_ext wiring: store comes from CELLSCOPE_SHIM_STORE (default
    .cellscope). Stream contents are not captured on this path, only the
    execution protocol and outcomes."""
    import os

    hook = install_hook(ShimConfig(
        store_path=os.environ.get("CELLSCOPE_SHIM_STORE", ".cellscope")))
    ipython.events.register(
        "pre_run_cell", lambda info: hook.pre_cell(info.raw_cell))

    def _post(result):
        exc = result.error_before_exec or result.error_in_exec
        if exc is None:
            hook.post_cell(OK)
        else:
            hook.post_cell(ERROR, ename=type(exc).__name__, evalue=str(exc),
                           traceback=_cell_traceback(exc))

    ipython.events.register("post_run_cell", _post)
    ipython._cellscope_shim_hook = hook
