"""Notebook messaging envelopes: framing, HMAC signing, parsing.

A wire message is a multipart frame list:
    [routing idents...] <IDS|MSG> signature header parent metadata content [buffers...]
where the four payload frames are UTF-8 JSON and the signature is
HMAC-SHA256 over exactly those four frames. Relaying preserves frames
byte-for-byte; this module only reads or builds them at the endpoints.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

DELIMITER = b"<IDS|MSG>"
PROTOCOL_VERSION = "5.3"

EXECUTE_REQUEST = "execute_request"
EXECUTE_REPLY = "execute_reply"
KERNEL_INFO_REQUEST = "kernel_info_request"
KERNEL_INFO_REPLY = "kernel_info_reply"
STREAM = "stream"
ERROR_MSG = "error"
STATUS = "status"


class WireFormatError(ValueError):
    pass


@dataclass
class WireMessage:
    idents: list[bytes] = field(default_factory=list)
    header: dict = field(default_factory=dict)
    parent_header: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    content: dict = field(default_factory=dict)
    buffers: list[bytes] = field(default_factory=list)

    @property
    def msg_type(self) -> str:
        return self.header.get("msg_type", "")

    @property
    def msg_id(self) -> str:
        return self.header.get("msg_id", "")

    @property
    def parent_id(self) -> str:
        return self.parent_header.get("msg_id", "")


def make_header(msg_type: str, session: str, username: str = "kernel") -> dict:
    return {
        "msg_id": uuid.uuid4().hex,
        "msg_type": msg_type,
        "username": username,
        "session": session,
        "date": datetime.now(timezone.utc).isoformat(),
        "version": PROTOCOL_VERSION,
    }


def _dumps(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def sign(key: bytes, payload_frames: list[bytes]) -> bytes:
    if not key:
        return b""
    mac = hmac.new(key, digestmod=hashlib.sha256)
    for frame in payload_frames:
        mac.update(frame)
    return mac.hexdigest().encode("ascii")


def serialize(msg: WireMessage, key: bytes) -> list[bytes]:
    payload = [
        _dumps(msg.header),
        _dumps(msg.parent_header),
        _dumps(msg.metadata),
        _dumps(msg.content),
    ]
    return (list(msg.idents) + [DELIMITER, sign(key, payload)]
            + payload + list(msg.buffers))


def parse(frames: list[bytes], key: bytes = b"",
          verify: bool = False) -> WireMessage:
    try:
        split = frames.index(DELIMITER)
    except ValueError:
        raise WireFormatError("missing frame delimiter") from None
    payload = frames[split + 2:split + 6]
    if len(payload) != 4:
        raise WireFormatError("incomplete payload frames")
    if verify:
        expected = sign(key, payload)
        if not hmac.compare_digest(expected, frames[split + 1]):
            raise WireFormatError("bad signature")
    try:
        header, parent, metadata, content = (json.loads(p) for p in payload)
    except json.JSONDecodeError as exc:
        raise WireFormatError(f"payload is not JSON: {exc}") from None
    return WireMessage(
        idents=list(frames[:split]),
        header=header,
        parent_header=parent,
        metadata=metadata,
        content=content,
        buffers=list(frames[split + 6:]),
    )


def make_message(msg_type: str, session: str, content: dict,
                 parent: dict | None = None,
                 idents: list[bytes] | None = None) -> WireMessage:
    return WireMessage(
        idents=list(idents or []),
        header=make_header(msg_type, session),
        parent_header=dict(parent or {}),
        metadata={},
        content=content,
    )
