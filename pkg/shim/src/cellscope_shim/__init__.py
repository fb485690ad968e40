"""Fallback in-interpreter capture and synthetic-trace generation for
the cellscope event-log store. Writes the line-delimited format
directly; the primary package is never imported."""

from ._events import (
    ABORTED,
    ERROR,
    EVENTS_FILENAME,
    EventWriter,
    INVALID_KEY,
    OK,
    PENDING,
    __version__,
    environment,
)
from .hook import (
    ShimConfig,
    ShimHook,
    ShimSession,
    install_hook,
    load_ipython_extension,
)

__all__ = [
    "ABORTED",
    "ERROR",
    "EVENTS_FILENAME",
    "EventWriter",
    "INVALID_KEY",
    "OK",
    "PENDING",
    "ShimConfig",
    "ShimHook",
    "ShimSession",
    "TraceSpecError",
    "__version__",
    "environment",
    "generate_synthetic_trace",
    "install_hook",
    "load_ipython_extension",
]

_LAZY = ("TraceSpecError", "generate_synthetic_trace")


def __getattr__(name):
    # deferred so `python -m cellscope_shim.generate` does not find the
    # submodule pre-imported by its own package and warn about it
    if name in _LAZY:
        from . import generate
        return getattr(generate, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
