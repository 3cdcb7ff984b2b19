"""TCP front end for the gateway (optionally behind the caching proxy).

One connection carries a sequence of framed messages.  The root element of
each message selects the operation:

``<Request>``            access request, answered with a response document
``<Release handle=..>``  give a handle back (carries a ``<Subject>``)
``<Status handle=..>``   liveness probe, answered ``live`` or ``dead``
``<Policy>``             load or replace a policy
``<RemovePolicy id=..>`` remove a policy and withdraw its graphs
``<Push stream=..>``     inject one tuple, body in record format
``<Subscribe handle=..>`` switch the connection to newline-delimited
                         records, terminated by ``.eos``
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
import xml.etree.ElementTree as ET
from typing import Iterator

from .engine import EOS_LINE, Engine, decode_record, encode_pairs, encode_record
from .gateway import Gateway, RequestOutcome
from .policy import (
    AccessRequest, PolicyError, PolicyStore, parse_request, policy_to_xml, request_to_xml,
)
from .protocol import (
    ProtocolError, decode_response, encode_error, encode_response, recv_frame, send_frame,
)
from .proxy import CachingProxy

log = logging.getLogger(__name__)


class Service:
    """Dispatches protocol messages to in-process components."""

    def __init__(self, engine: Engine, store: PolicyStore, gateway: Gateway,
                 proxy: CachingProxy | None = None):
        self.engine = engine
        self.store = store
        self.gateway = gateway
        self.proxy = proxy

    def dispatch(self, text: str) -> str:
        try:
            root = ET.fromstring(text)
        except ET.ParseError as exc:
            return encode_error(f"malformed document: {exc}")
        try:
            if root.tag == "Request":
                req = parse_request(root)
                if self.proxy is not None:
                    outcome, hit = self.proxy.proxy_request(req)
                    return encode_response(outcome, hit)
                return encode_response(self.gateway.handle_request(req))
            if root.tag == "Status":
                return "live\n" if self.engine.is_live(root.get("handle", "")) else "dead\n"
            if root.tag == "Release":
                creds = {a.get("AttributeId", ""): (a.text or "").strip()
                         for a in root.iter("Attribute")}
                self.gateway.release(root.get("handle", ""), creds)
                return "released\n"
            if root.tag == "Policy":
                return f"loaded {self.store.load_policy(text)}\n"
            if root.tag == "RemovePolicy":
                removed = self.store.remove_policy(root.get("id", ""))
                return f"removed {int(removed)}\n"
            if root.tag == "Push":
                stream = root.get("stream", "")
                record = decode_record(root.text or "")
                self.engine.push(stream, record)
                return "ok\n"
        except (PolicyError, ValueError, KeyError, PermissionError) as exc:
            return encode_error(f"{type(exc).__name__}: {exc}")
        return encode_error(f"unknown message <{root.tag}>")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: Service = self.server.service
        sock = self.request
        while True:
            try:
                text = recv_frame(sock)
            except (ProtocolError, OSError) as exc:
                log.debug("dropping connection: %s", exc)
                return
            if text is None:
                return
            if text.lstrip().startswith("<Subscribe"):
                self._stream(service, text)
                return
            send_frame(sock, service.dispatch(text))

    def _stream(self, service: Service, text: str) -> None:
        handle = ET.fromstring(text).get("handle", "")
        try:
            sub = service.engine.subscribe(handle)
        except Exception as exc:
            self.request.sendall(f"error {exc}\n{EOS_LINE}\n".encode())
            return
        out = self.request.makefile("w", encoding="utf-8", newline="\n")
        try:
            for t in sub:
                out.write(encode_record(sub.schema, t) + "\n")
                out.flush()
            out.write(EOS_LINE + "\n")
            out.flush()
        except OSError:
            sub.close()


class GatewayServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, service: Service):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class GatewayClient:
    """Remote gateway (or proxy) over one persistent connection."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.address = (host, port)
        self.timeout = timeout
        self._sock = socket.create_connection(self.address, timeout=timeout)
        self._lock = threading.Lock()
        self.last_cache_hit: bool | None = None

    @classmethod
    def from_endpoint(cls, endpoint: str, **kw) -> "GatewayClient":
        host, _, port = endpoint.rpartition(":")
        return cls(host or "127.0.0.1", int(port), **kw)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, text: str) -> str:
        with self._lock:
            send_frame(self._sock, text)
            reply = recv_frame(self._sock)
        if reply is None:
            raise ProtocolError("server closed the connection")
        if reply.startswith("error"):
            raise ProtocolError(reply[len("error"):].strip())
        return reply

    def handle_request(self, req: AccessRequest) -> RequestOutcome:
        outcome, hit = decode_response(self._call(request_to_xml(req)))
        self.last_cache_hit = hit
        return outcome

    def proxy_request(self, req: AccessRequest) -> tuple[RequestOutcome, bool | None]:
        outcome = self.handle_request(req)
        return outcome, self.last_cache_hit

    def is_live(self, handle) -> bool:
        root = ET.Element("Status", handle=str(handle))
        return self._call(ET.tostring(root, encoding="unicode")).strip() == "live"

    def release(self, handle, credentials) -> None:
        root = ET.Element("Release", handle=str(handle))
        subject = ET.SubElement(root, "Subject")
        for k, v in sorted(credentials.items()):
            ET.SubElement(subject, "Attribute", AttributeId=k).text = v
        self._call(ET.tostring(root, encoding="unicode"))

    def load_policy(self, policy) -> str:
        doc = policy if isinstance(policy, str) else policy_to_xml(policy)
        return self._call(doc).split()[1]

    def remove_policy(self, policy_id: str) -> bool:
        root = ET.Element("RemovePolicy", id=policy_id)
        return self._call(ET.tostring(root, encoding="unicode")).split()[1] == "1"

    def push(self, stream: str, values: dict) -> None:
        root = ET.Element("Push", stream=stream)
        root.text = encode_pairs(values.keys(), values.values())
        self._call(ET.tostring(root, encoding="unicode"))

    def subscribe(self, handle) -> Iterator[dict]:
        """Records of ``handle`` on a dedicated connection, until end-of-stream."""
        sock = socket.create_connection(self.address, timeout=None)
        root = ET.Element("Subscribe", handle=str(handle))
        send_frame(sock, ET.tostring(root, encoding="unicode"))
        with sock, sock.makefile("r", encoding="utf-8") as lines:
            for line in lines:
                if line.startswith("error"):
                    raise ProtocolError(line[len("error"):].strip())
                record = decode_record(line)
                if record is None:
                    return
                yield record


def serve(engine: Engine, store: PolicyStore, gateway: Gateway, host: str = "127.0.0.1",
          port: int = 0, proxy: CachingProxy | None = None) -> GatewayServer:
    server = GatewayServer((host, port), Service(engine, store, gateway, proxy))
    server.start()
    return server
