"""Client for a kernel's shell/iopub endpoints: sends execute requests and
reassembles the correlated reply, streams, and error for each one. Used to
script sessions in tests, to drive replay, and as the notebook stand-in on
the client side of a capture proxy."""

from __future__ import annotations

import ast
import time
import uuid
from dataclasses import dataclass, field

import zmq

from . import wire


class KernelTimeout(TimeoutError):
    pass


def parse_text_expression(result) -> str | None:
    """Unwrap a user_expressions entry: the kernel returns values as repr
    text; this returns the original string, or None for anything else."""
    if not isinstance(result, dict) or result.get("status") != "ok":
        return None
    text = result.get("data", {}).get("text/plain")
    if not isinstance(text, str):
        return None
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return None
    return value if isinstance(value, str) else None


@dataclass
class ExecResult:
    msg_id: str
    status: str
    stdout: str = ""
    stderr: str = ""
    ename: str | None = None
    evalue: str | None = None
    traceback: list[str] = field(default_factory=list)
    reply_content: dict = field(default_factory=dict)
    display_count: int = 0


class KernelClient:
    def __init__(self, shell_endpoint: str, iopub_endpoint: str,
                 key: bytes = b"", session: str | None = None):
        self.key = key
        self.session = session or f"client-{uuid.uuid4().hex[:8]}"
        self._ctx = zmq.Context()
        self._shell = self._ctx.socket(zmq.DEALER)
        self._shell.linger = 0
        self._shell.connect(shell_endpoint)
        self._iopub = self._ctx.socket(zmq.SUB)
        self._iopub.linger = 0
        self._iopub.setsockopt(zmq.SUBSCRIBE, b"")
        self._iopub.connect(iopub_endpoint)
        self._poller = zmq.Poller()
        self._poller.register(self._shell, zmq.POLLIN)
        self._poller.register(self._iopub, zmq.POLLIN)

    def close(self) -> None:
        self._shell.close()
        self._iopub.close()
        self._ctx.term()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- plumbing ------------------------------------------------------------

    def _send(self, msg_type: str, content: dict) -> wire.WireMessage:
        msg = wire.make_message(msg_type, self.session, content)
        self._shell.send_multipart(wire.serialize(msg, self.key))
        return msg

    def _poll(self, timeout_ms: int):
        """Yields (socket, message) pairs until the timeout elapses."""
        deadline = time.monotonic() + timeout_ms / 1000
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            events = dict(self._poller.poll(timeout=int(remaining * 1000)))
            for sock in (self._shell, self._iopub):
                if sock in events:
                    try:
                        yield sock, wire.parse(sock.recv_multipart(), self.key)
                    except wire.WireFormatError:
                        continue

    # -- operations ----------------------------------------------------------

    def kernel_info(self, timeout: float = 5.0) -> dict:
        request = self._send(wire.KERNEL_INFO_REQUEST, {})
        for sock, msg in self._poll(int(timeout * 1000)):
            if sock is self._shell and msg.parent_id == request.msg_id:
                return msg.content
        raise KernelTimeout("no kernel_info reply")

    def sync(self, timeout: float = 10.0, attempts: int = 40) -> None:
        """Handshake until the iopub subscription is provably joined: a
        kernel_info round-trip whose status messages reach our SUB socket."""
        for _ in range(attempts):
            request = self._send(wire.KERNEL_INFO_REQUEST, {})
            deadline = time.monotonic() + timeout / attempts
            seen = False
            for sock, msg in self._poll(
                    max(50, int((deadline - time.monotonic()) * 1000))):
                if sock is self._iopub and msg.parent_id == request.msg_id:
                    seen = True
                    break
            if seen:
                return
        raise KernelTimeout("iopub subscription never joined")

    def execute(self, code: str, timeout: float = 30.0, silent: bool = False,
                user_expressions: dict | None = None) -> ExecResult:
        content = {
            "code": code,
            "silent": silent,
            "store_history": not silent,
            "user_expressions": user_expressions or {},
            "allow_stdin": False,
        }
        request = self._send(wire.EXECUTE_REQUEST, content)
        result = ExecResult(msg_id=request.msg_id, status="")
        got_reply = got_idle = False
        for sock, msg in self._poll(int(timeout * 1000)):
            if msg.parent_id != request.msg_id:
                continue
            if sock is self._shell and msg.msg_type == wire.EXECUTE_REPLY:
                result.status = msg.content.get("status", "")
                result.reply_content = msg.content
                got_reply = True
            elif sock is self._iopub:
                if msg.msg_type == wire.STREAM:
                    text = msg.content.get("text", "")
                    if msg.content.get("name") == "stderr":
                        result.stderr += text
                    else:
                        result.stdout += text
                elif msg.msg_type == wire.ERROR_MSG:
                    result.ename = msg.content.get("ename")
                    result.evalue = msg.content.get("evalue")
                    result.traceback = list(msg.content.get("traceback", []))
                elif msg.msg_type == wire.STATUS:
                    if msg.content.get("execution_state") == "idle":
                        got_idle = True
                elif msg.msg_type in ("display_data", "execute_result",
                                      "update_display_data"):
                    result.display_count += 1
            if got_reply and got_idle:
                return result
        raise KernelTimeout(f"execution did not complete: {code[:40]!r}")
