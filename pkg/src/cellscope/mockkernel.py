"""Scripted in-process kernel: binds shell/iopub endpoints, genuinely
executes cells in a persistent namespace, and speaks the standard message
envelopes. Stands in for a live kernel in tests, capture sessions, and
replay targets.

Conventions beyond plain execution:
  - a cell whose stripped source is "__ABORT__" yields an aborted reply,
    the interrupt path without signal plumbing;
  - a cell containing "__RICH__" additionally publishes one display_data
    message (rich output that capture counts but never stores);
  - stdout longer than one character is published as two stream messages
    so reassembly order is always exercised.
"""

from __future__ import annotations

import contextlib
import io
import threading
import traceback as tb_module

import zmq

from . import wire

CELL_FILENAME = "<cell>"


class MockKernel:
    def __init__(self, shell_endpoint: str, iopub_endpoint: str,
                 key: bytes = b"", packages=None, on_execute=None,
                 namespace: dict | None = None):
        self.shell_endpoint = shell_endpoint
        self.iopub_endpoint = iopub_endpoint
        self.key = key
        self.on_execute = on_execute
        # exceptions raised by the on_execute hook, for test assertions
        self.hook_errors: list[BaseException] = []
        self.execution_count = 0
        self.session = "mock-kernel"
        self.namespace = namespace if namespace is not None else {}
        if packages is not None:
            self.namespace["__session_packages__"] = [
                [name, version] for name, version in packages]
        self._stop = threading.Event()
        self._ready = threading.Event()
        self._thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "MockKernel":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout=10):
            raise RuntimeError("mock kernel failed to bind")
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- main loop -----------------------------------------------------------

    def _run(self) -> None:
        ctx = zmq.Context()
        shell = ctx.socket(zmq.ROUTER)
        shell.linger = 0
        shell.bind(self.shell_endpoint)
        iopub = ctx.socket(zmq.PUB)
        iopub.linger = 0
        iopub.bind(self.iopub_endpoint)
        self._ready.set()
        poller = zmq.Poller()
        poller.register(shell, zmq.POLLIN)
        try:
            while not self._stop.is_set():
                if not dict(poller.poll(timeout=50)):
                    continue
                frames = shell.recv_multipart()
                try:
                    msg = wire.parse(frames, self.key)
                except wire.WireFormatError:
                    continue
                if msg.msg_type == wire.EXECUTE_REQUEST:
                    self._handle_execute(shell, iopub, msg)
                elif msg.msg_type == wire.KERNEL_INFO_REQUEST:
                    self._handle_kernel_info(shell, iopub, msg)
        finally:
            shell.close()
            iopub.close()
            ctx.term()

    # -- publishing helpers --------------------------------------------------

    def _publish(self, iopub, msg_type: str, content: dict, parent: dict):
        msg = wire.make_message(msg_type, self.session, content, parent=parent)
        msg.idents = [msg_type.encode()]
        iopub.send_multipart(wire.serialize(msg, self.key))

    def _reply(self, shell, msg_type: str, content: dict, request):
        msg = wire.make_message(msg_type, self.session, content,
                                parent=request.header, idents=request.idents)
        shell.send_multipart(wire.serialize(msg, self.key))

    def _status(self, iopub, state: str, parent: dict):
        self._publish(iopub, wire.STATUS, {"execution_state": state}, parent)

    # -- request handlers ----------------------------------------------------

    def _handle_kernel_info(self, shell, iopub, msg):
        self._status(iopub, "busy", msg.header)
        self._reply(shell, wire.KERNEL_INFO_REPLY, {
            "status": "ok",
            "protocol_version": wire.PROTOCOL_VERSION,
            "implementation": "cellscope-mock",
        }, msg)
        self._status(iopub, "idle", msg.header)

    def _eval_user_expressions(self, requested: dict) -> dict:
        results = {}
        for name, expr in (requested or {}).items():
            try:
                value = eval(expr, self.namespace)
                results[name] = {"status": "ok",
                                 "data": {"text/plain": repr(value)}}
            except Exception as exc:
                results[name] = {"status": "error",
                                 "ename": type(exc).__name__,
                                 "evalue": str(exc)}
        return results

    def _handle_execute(self, shell, iopub, msg):
        if self.on_execute is not None:
            try:
                self.on_execute(msg)
            except BaseException as exc:
                self.hook_errors.append(exc)
        code = msg.content.get("code", "")
        parent = msg.header
        self._status(iopub, "busy", parent)

        if code.strip() == "__ABORT__":
            self._reply(shell, wire.EXECUTE_REPLY, {
                "status": "aborted",
                "execution_count": self.execution_count,
            }, msg)
            self._status(iopub, "idle", parent)
            return

        self.execution_count += 1
        out, err = io.StringIO(), io.StringIO()
        error_content = None
        try:
            compiled = compile(code, CELL_FILENAME, "exec")
            with contextlib.redirect_stdout(out), \
                    contextlib.redirect_stderr(err):
                exec(compiled, self.namespace)
        except BaseException as exc:
            error_content = {
                "ename": type(exc).__name__,
                "evalue": str(exc),
                "traceback": tb_module.format_exception(
                    type(exc), exc, exc.__traceback__),
            }

        stdout = out.getvalue()
        if len(stdout) > 1:
            self._publish(iopub, wire.STREAM,
                          {"name": "stdout", "text": stdout[:1]}, parent)
            self._publish(iopub, wire.STREAM,
                          {"name": "stdout", "text": stdout[1:]}, parent)
        elif stdout:
            self._publish(iopub, wire.STREAM,
                          {"name": "stdout", "text": stdout}, parent)
        stderr = err.getvalue()
        if stderr:
            self._publish(iopub, wire.STREAM,
                          {"name": "stderr", "text": stderr}, parent)
        if "__RICH__" in code:
            self._publish(iopub, "display_data",
                          {"data": {"text/plain": "<rich>"}, "metadata": {}},
                          parent)
        if error_content is not None:
            self._publish(iopub, wire.ERROR_MSG, error_content, parent)

        reply: dict = {"execution_count": self.execution_count}
        if error_content is None:
            reply["status"] = "ok"
            reply["user_expressions"] = self._eval_user_expressions(
                msg.content.get("user_expressions"))
            reply["payload"] = []
        else:
            reply["status"] = "error"
            reply.update(error_content)
        self._reply(shell, wire.EXECUTE_REPLY, reply, msg)
        self._status(iopub, "idle", parent)
