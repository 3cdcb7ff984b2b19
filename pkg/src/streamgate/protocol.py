"""Client protocol framing and response encoding.

Every message is a length-prefixed UTF-8 document: a 4-byte big-endian
length followed by the payload.  Requests are XML documents; responses
are a status line followed by optional ``key value`` lines::

    warned-pr-granted
    handle stream://local/g7
    warning PR
    explanation map: attributes ['humidity'] are not visible under the policy
    cache miss
"""
from __future__ import annotations

import socket
import struct

from .engine import StreamHandle
from .gateway import STATUSES, RequestOutcome
from .predicate import Verdict, Warning

MAX_FRAME = 16 * 1024 * 1024
_HEADER = struct.Struct(">I")


class ProtocolError(Exception):
    pass


def encode_frame(text: str) -> bytes:
    payload = text.encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            if chunks:
                raise ProtocolError("connection closed mid-frame")
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, text: str) -> None:
    sock.sendall(encode_frame(text))


def recv_frame(sock: socket.socket) -> str | None:
    """Next frame's text, or None if the peer closed cleanly."""
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return payload.decode("utf-8")


def encode_response(outcome: RequestOutcome, cache: bool | None = None) -> str:
    lines = [outcome.status]
    if outcome.handle is not None:
        lines.append(f"handle {outcome.handle.uri}")
    if outcome.warning is not None:
        lines.append(f"warning {outcome.warning.kind.value}")
        explanation = " ".join(outcome.warning.explanation.split())
        if explanation:
            lines.append(f"explanation {explanation}")
    if cache is not None:
        lines.append(f"cache {'hit' if cache else 'miss'}")
    return "\n".join(lines) + "\n"


def decode_response(text: str) -> tuple[RequestOutcome, bool | None]:
    lines = text.splitlines()
    if not lines:
        raise ProtocolError("empty response")
    status = lines[0].strip()
    if status == "error":
        raise ProtocolError(" ".join(lines[1:]) or "server error")
    if status not in STATUSES:
        raise ProtocolError(f"unknown status {status!r}")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        fields[key] = value
    handle = StreamHandle(fields["handle"]) if "handle" in fields else None
    warning = None
    if "warning" in fields:
        warning = Warning(Verdict(fields["warning"]), fields.get("explanation", ""))
    cache = None
    if "cache" in fields:
        cache = fields["cache"] == "hit"
    return RequestOutcome(status, handle, warning), cache


def encode_error(message: str) -> str:
    return "error\n" + " ".join(str(message).split()) + "\n"
