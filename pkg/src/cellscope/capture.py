"""Transparent kernel proxy that writes the execution ledger.

The proxy sits between a notebook client and a live kernel, relaying both
channels byte-for-byte. For every execute request it appends an ahead
event, durably, before the kernel sees the message; the correlated reply,
stream, and error traffic later completes the log. Any failure on the
logging path flags the document invalid and stops all further writes:
the ledger is either complete or visibly broken, never silently partial.

A log is completed only once both its execute reply and its idle status
have arrived, because stream output may trail the reply on the other
channel. One hidden execution at startup asks the kernel for its
interpreter version and package list; that exchange never enters the
user ledger.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import zmq

from . import logstore, wire
from . import __version__
from .kernelclient import parse_text_expression

HALT_LOGGING = "halt_logging"
HALT_SESSION = "halt_session"
FAIL_MODES = frozenset({HALT_LOGGING, HALT_SESSION})

# Hidden startup execution: binds two throwaway names in the kernel, then
# reads the environment through user_expressions on the reply (shell
# channel), so slow-joining iopub subscriptions cannot lose the answer.
INTROSPECT_CODE = "import sys as _cs_sys, json as _cs_json"
INTROSPECT_EXPRESSIONS = {
    "python": "_cs_sys.version.split()[0]",
    "packages": "_cs_json.dumps(list(__session_packages__))",
}

RICH_DISPLAY_TYPES = frozenset(
    {"display_data", "execute_result", "update_display_data"})
RICH_COUNT_KEY = "rich_display_count"

_STATUS_MAP = {"ok": logstore.OK, "error": logstore.ERROR,
               "aborted": logstore.ABORTED}


class CaptureError(Exception):
    """Session could not start or lost protocol synchronization."""


def split_endpoints(value) -> tuple[str, str]:
    """An endpoint pair is 'shell_addr,iopub_addr' or a 2-sequence."""
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",")]
    else:
        parts = [str(p) for p in value]
    if len(parts) != 2 or not all(parts):
        raise CaptureError(f"expected shell,iopub endpoint pair, got {value!r}")
    return parts[0], parts[1]


@dataclass
class SessionConfig:
    client_endpoint: str | tuple[str, str]
    kernel_endpoints: str | tuple[str, str]
    store_path: str
    fail_mode: str = HALT_LOGGING
    document_id: str | None = None
    participant_meta: dict | None = None
    key: bytes = b""
    startup_timeout: float = 10.0


@dataclass
class _PendingExec:
    log_id: int
    stdout: list[str] = field(default_factory=list)
    stderr: list[str] = field(default_factory=list)
    error: logstore.ErrorInfo | None = None
    reply_status: str | None = None
    reply_content: dict = field(default_factory=dict)
    got_reply: bool = False
    got_idle: bool = False
    display_count: int = 0


class SessionHandle:
    """A running capture session. Construct through start_session."""

    def __init__(self, config: SessionConfig, ctx, client_shell, client_iopub,
                 kernel_shell, kernel_iopub, writer, probe_ids: set[str]):
        self.config = config
        self.writer = writer
        self.halted = False
        self.halt_cause: str | None = None
        self._ctx = ctx
        self._client_shell = client_shell
        self._client_iopub = client_iopub
        self._kernel_shell = kernel_shell
        self._kernel_iopub = kernel_iopub
        self._probe_ids = probe_ids
        self._lock = threading.RLock()
        self._pending: dict[str, _PendingExec] = {}
        self._routes: dict[str, list[bytes]] = {}
        self._stop = threading.Event()
        self._close_client = threading.Event()
        self._stopped = False
        self._threads = [
            threading.Thread(target=self._shell_loop, daemon=True),
            threading.Thread(target=self._iopub_loop, daemon=True),
        ]
        for t in self._threads:
            t.start()

    # -- introspection for callers -------------------------------------------

    @property
    def record(self) -> logstore.DocumentRecord:
        return self.writer.record

    @property
    def document_id(self) -> str:
        return self.record.document_id

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self._stop.set()
        for t in self._threads:
            t.join(timeout=10)
        for sock in (self._client_shell, self._client_iopub,
                     self._kernel_shell, self._kernel_iopub):
            if not sock.closed:
                sock.close()
        self.writer.close()
        self._ctx.term()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    # -- failure path --------------------------------------------------------

    def fail_safe_halt(self, cause: str) -> None:
        """Flag the document invalid and stop writing, permanently. Under
        halt_session also drop the client; under halt_logging keep relaying."""
        with self._lock:
            if self.halted:
                return
            self.halted = True
            self.halt_cause = cause
            try:
                self.writer.mark_invalid(cause)
            except Exception:
                pass
            try:
                self.writer.close()
            except Exception:
                pass
            self._pending.clear()
        if self.config.fail_mode == HALT_SESSION:
            # Each relay loop closes its own client-facing socket.
            self._close_client.set()

    # -- logging path --------------------------------------------------------

    def handle_execute_request(self, msg: wire.WireMessage) -> None:
        """Append the ahead event. Runs before the message is forwarded, and
        append_ahead fsyncs, so the kernel only ever sees logged requests."""
        with self._lock:
            if self.halted:
                return
            code = msg.content.get("code", "")
            try:
                log_id = self.writer.append_ahead(code)
            except (logstore.LogStoreError, OSError) as exc:
                self.fail_safe_halt(f"ahead write failed: {exc}")
                return
            self._pending[msg.msg_id] = _PendingExec(log_id=log_id)

    def handle_result_messages(self, msgs) -> None:
        """Fold reply/stream/error/status traffic into the pending logs.
        A log completes when both its reply and its idle status are in."""
        for msg in msgs:
            with self._lock:
                self._handle_result(msg)

    def _handle_result(self, msg: wire.WireMessage) -> None:
        parent = msg.parent_id
        if parent in self._probe_ids:
            return
        state = self._pending.get(parent)
        kind = msg.msg_type
        if kind == wire.EXECUTE_REPLY:
            if state is None:
                if not self.halted:
                    self.fail_safe_halt(
                        f"execute reply for unknown request {parent!r}")
                return
            state.got_reply = True
            state.reply_status = msg.content.get("status", "")
            state.reply_content = msg.content
        elif state is None:
            return
        elif kind == wire.STREAM:
            text = msg.content.get("text", "")
            if msg.content.get("name") == "stderr":
                state.stderr.append(text)
            else:
                state.stdout.append(text)
        elif kind == wire.ERROR_MSG:
            state.error = logstore.ErrorInfo(
                ename=msg.content.get("ename", ""),
                evalue=msg.content.get("evalue", ""),
                traceback=list(msg.content.get("traceback", [])))
        elif kind == wire.STATUS:
            if msg.content.get("execution_state") == "idle":
                state.got_idle = True
        elif kind in RICH_DISPLAY_TYPES:
            state.display_count += 1
        if state is not None and state.got_reply and state.got_idle:
            self._complete(parent, state)

    def _complete(self, msg_id: str, state: _PendingExec) -> None:
        self._pending.pop(msg_id, None)
        if self.halted:
            return
        rec = self.record.log(state.log_id)
        if rec.status != logstore.PENDING:
            # A later ahead already aborted this log (interrupt semantics);
            # the stale reply is relayed but no longer recorded.
            return
        status = _STATUS_MAP.get(state.reply_status or "")
        if status is None:
            self.fail_safe_halt(
                f"unknown reply status {state.reply_status!r} "
                f"for log {state.log_id}")
            return
        error = state.error
        if status == logstore.ERROR and error is None:
            error = logstore.ErrorInfo(
                ename=state.reply_content.get("ename", "Error"),
                evalue=state.reply_content.get("evalue", ""),
                traceback=list(state.reply_content.get("traceback", [])))
        if status != logstore.ERROR:
            error = None
        try:
            self.writer.complete_log(
                state.log_id, status,
                stdout="".join(state.stdout),
                stderr="".join(state.stderr),
                error=error)
            if state.display_count:
                self.writer.attach_metadata(
                    state.log_id, RICH_COUNT_KEY, str(state.display_count))
        except (logstore.LogStoreError, OSError) as exc:
            self.fail_safe_halt(f"completion write failed: {exc}")

    # -- relay loops ---------------------------------------------------------

    def _shell_loop(self) -> None:
        poller = zmq.Poller()
        poller.register(self._client_shell, zmq.POLLIN)
        poller.register(self._kernel_shell, zmq.POLLIN)
        client_open = True
        while not self._stop.is_set():
            if client_open and self._close_client.is_set():
                poller.unregister(self._client_shell)
                self._client_shell.close()
                client_open = False
            ready = dict(poller.poll(timeout=50))
            if client_open and self._client_shell in ready:
                self._relay_client_request()
            if self._kernel_shell in ready:
                self._relay_kernel_reply(client_open)

    def _relay_client_request(self) -> None:
        frames = self._client_shell.recv_multipart()
        try:
            split = frames.index(wire.DELIMITER)
        except ValueError:
            return  # not a protocol message; nothing to route it by
        idents, payload = frames[:split], frames[split:]
        msg = None
        try:
            msg = wire.parse(frames)
        except wire.WireFormatError:
            pass
        if msg is not None:
            self._routes[msg.msg_id] = idents
            if msg.msg_type == wire.EXECUTE_REQUEST:
                self.handle_execute_request(msg)
                if self.halted and self.config.fail_mode == HALT_SESSION:
                    return
        self._kernel_shell.send_multipart(payload)

    def _relay_kernel_reply(self, client_open: bool) -> None:
        frames = self._kernel_shell.recv_multipart()
        try:
            msg = wire.parse(frames)
        except wire.WireFormatError:
            return
        if msg.parent_id in self._probe_ids:
            return  # startup handshake straggler, never the client's
        idents = self._routes.pop(msg.parent_id, [])
        if msg.msg_type == wire.EXECUTE_REPLY:
            self.handle_result_messages([msg])
        if client_open and not self._close_client.is_set():
            self._client_shell.send_multipart(idents + frames)

    def _iopub_loop(self) -> None:
        poller = zmq.Poller()
        poller.register(self._kernel_iopub, zmq.POLLIN)
        client_open = True
        while not self._stop.is_set():
            if client_open and self._close_client.is_set():
                self._client_iopub.close()
                client_open = False
            if not dict(poller.poll(timeout=50)):
                continue
            frames = self._kernel_iopub.recv_multipart()
            try:
                msg = wire.parse(frames)
            except wire.WireFormatError:
                continue
            if msg.parent_id in self._probe_ids:
                continue  # hidden startup traffic stays hidden
            self.handle_result_messages([msg])
            if client_open:
                self._client_iopub.send_multipart(frames)


def snapshot_environment(handle: SessionHandle) -> logstore.EnvSnapshot:
    """The environment snapshot persisted in the session's document header."""
    return handle.record.env


# ---------------------------------------------------------------------------
# Startup


def _poll_messages(poller, sockets, timeout: float):
    """Yields (socket, parsed message) until timeout seconds elapse."""
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        ready = dict(poller.poll(timeout=max(1, int(remaining * 1000))))
        for sock in sockets:
            if sock in ready:
                try:
                    yield sock, wire.parse(sock.recv_multipart())
                except wire.WireFormatError:
                    continue


def _send(sock, msg: wire.WireMessage, key: bytes) -> None:
    sock.send_multipart(wire.serialize(msg, key))


def _probe_kernel(shell, key, session, probe_ids, timeout) -> dict:
    """Round-trip a kernel_info request; raises if the kernel is silent."""
    request = wire.make_message(wire.KERNEL_INFO_REQUEST, session, {})
    probe_ids.add(request.msg_id)
    _send(shell, request, key)
    poller = zmq.Poller()
    poller.register(shell, zmq.POLLIN)
    for _, msg in _poll_messages(poller, [shell], timeout):
        if msg.parent_id == request.msg_id:
            return msg.content
    raise CaptureError("kernel unreachable: no kernel_info reply")


def _join_iopub(shell, iopub, key, session, probe_ids, timeout) -> None:
    """Handshake until the iopub subscription provably delivers: a status
    parented to one of our own kernel_info requests arrives on it."""
    poller = zmq.Poller()
    poller.register(shell, zmq.POLLIN)
    poller.register(iopub, zmq.POLLIN)
    attempts = max(4, int(timeout / 0.25))
    for _ in range(attempts):
        request = wire.make_message(wire.KERNEL_INFO_REQUEST, session, {})
        probe_ids.add(request.msg_id)
        _send(shell, request, key)
        for sock, msg in _poll_messages(poller, [shell, iopub], 0.25):
            if sock is iopub and msg.parent_id == request.msg_id:
                return
    raise CaptureError("kernel iopub channel never joined")


def _introspect_environment(shell, key, session, probe_ids,
                            timeout, kernel_info: dict) -> logstore.EnvSnapshot:
    """One silent execution; the reply's user_expressions carry the
    environment. Any failure degrades to an empty, flagged snapshot."""
    env = logstore.EnvSnapshot(session_start=logstore.now_ms(),
                               tool_version=__version__)
    implementation = kernel_info.get("implementation")
    if isinstance(implementation, str) and implementation:
        env.notebook_meta["kernel_implementation"] = implementation
    request = wire.make_message(wire.EXECUTE_REQUEST, session, {
        "code": INTROSPECT_CODE,
        "silent": True,
        "store_history": False,
        "user_expressions": dict(INTROSPECT_EXPRESSIONS),
        "allow_stdin": False,
    })
    probe_ids.add(request.msg_id)
    _send(shell, request, key)
    poller = zmq.Poller()
    poller.register(shell, zmq.POLLIN)
    reply = None
    for _, msg in _poll_messages(poller, [shell], timeout):
        if (msg.parent_id == request.msg_id
                and msg.msg_type == wire.EXECUTE_REPLY):
            reply = msg.content
            break
    if reply is None or reply.get("status") != "ok":
        env.warning = True
        return env
    expressions = reply.get("user_expressions", {})
    python = parse_text_expression(expressions.get("python"))
    if python:
        env.interpreter_version = python
    packages_json = parse_text_expression(expressions.get("packages"))
    packages = None
    if packages_json is not None:
        try:
            raw = json.loads(packages_json)
            packages = {str(name): str(version) for name, version in raw}
        except (ValueError, TypeError):
            packages = None
    if packages is None:
        # Kernel has no package listing; record that the snapshot is partial.
        env.warning = True
    else:
        env.packages = sorted(packages.items())
    return env


def start_session(config: SessionConfig) -> SessionHandle:
    """Probe the kernel, snapshot its environment, open the document, then
    start relaying. Failure at any step leaves no document behind."""
    if config.fail_mode not in FAIL_MODES:
        raise CaptureError(f"unknown fail_mode {config.fail_mode!r}")
    client_shell_ep, client_iopub_ep = split_endpoints(config.client_endpoint)
    kernel_shell_ep, kernel_iopub_ep = split_endpoints(config.kernel_endpoints)
    endpoints = [client_shell_ep, client_iopub_ep,
                 kernel_shell_ep, kernel_iopub_ep]
    if len(set(endpoints)) != len(endpoints):
        raise CaptureError("client and kernel endpoints must be distinct")

    session = f"capture-{uuid.uuid4().hex[:8]}"
    probe_ids: set[str] = set()
    ctx = zmq.Context()
    sockets = []
    writer = None
    try:
        kernel_shell = ctx.socket(zmq.DEALER)
        sockets.append(kernel_shell)
        kernel_shell.linger = 0
        kernel_shell.connect(kernel_shell_ep)
        kernel_iopub = ctx.socket(zmq.SUB)
        sockets.append(kernel_iopub)
        kernel_iopub.linger = 0
        kernel_iopub.setsockopt(zmq.SUBSCRIBE, b"")
        kernel_iopub.connect(kernel_iopub_ep)

        kernel_info = _probe_kernel(kernel_shell, config.key, session,
                                    probe_ids, config.startup_timeout)
        _join_iopub(kernel_shell, kernel_iopub, config.key, session,
                    probe_ids, config.startup_timeout)
        env = _introspect_environment(kernel_shell, config.key, session,
                                      probe_ids, config.startup_timeout,
                                      kernel_info)

        client_shell = ctx.socket(zmq.ROUTER)
        sockets.append(client_shell)
        client_shell.linger = 0
        client_shell.bind(client_shell_ep)
        client_iopub = ctx.socket(zmq.PUB)
        sockets.append(client_iopub)
        client_iopub.linger = 0
        client_iopub.bind(client_iopub_ep)

        # Last: any earlier failure must not leave a document file.
        writer = logstore.open_document(
            config.store_path,
            participant_meta=config.participant_meta,
            env=env,
            document_id=config.document_id)
    except Exception:
        for sock in sockets:
            sock.close()
        ctx.term()
        raise
    return SessionHandle(config, ctx, client_shell, client_iopub,
                         kernel_shell, kernel_iopub, writer, probe_ids)
