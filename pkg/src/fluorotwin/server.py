"""Network endpoint for the bus: TCP line protocol and a WebSocket bridge.

Clients send one JSON request per line (or per WebSocket text frame):

    {"op": "subscribe", "topic": T}
    {"op": "unsubscribe", "topic": T}
    {"op": "publish", "topic": T, "payload": {...}}
    {"op": "ping"}

Replies are {"op": "subscribed"|"ok"|"error"|"pong", ...}; subscribed topics
deliver bare envelope lines (see bus.encode_envelope). The WebSocket bridge
listens on the sibling port (TCP port + 1) and carries the identical text
per WebSocket frame. Malformed input earns an error reply, never a
disconnect; shutdown closes every client cleanly (end-of-stream).
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import socketserver
import struct
import threading

from . import bus as busmod
from .bus import (Bus, BusError, Envelope, SchemaError, UnknownTopicError,
                  decode_envelope, encode_envelope)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


# ---------------------------------------------------------------------------
# minimal RFC 6455 framing (server side, text frames, no extensions)


def websocket_accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def websocket_handshake(conn: socket.socket) -> bool:
    """Answer the HTTP upgrade; returns False on a non-WebSocket request."""
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            return False
        data += chunk
        if len(data) > 65536:
            return False
    head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    headers = {}
    for line in head.split("\r\n")[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get("sec-websocket-key")
    if not key or "websocket" not in headers.get("upgrade", "").lower():
        conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        return False
    resp = ("HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {websocket_accept_key(key)}\r\n\r\n")
    conn.sendall(resp.encode("ascii"))
    return True


def _recv_exact(conn, n):
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("websocket peer closed mid-frame")
        buf += chunk
    return buf


def websocket_recv(conn):
    """Read one frame; returns (opcode, payload bytes)."""
    b1, b2 = _recv_exact(conn, 2)
    opcode = b1 & 0x0F
    masked = bool(b2 & 0x80)
    length = b2 & 0x7F
    if length == 126:
        length = struct.unpack(">H", _recv_exact(conn, 2))[0]
    elif length == 127:
        length = struct.unpack(">Q", _recv_exact(conn, 8))[0]
    mask = _recv_exact(conn, 4) if masked else None
    payload = _recv_exact(conn, length) if length else b""
    if mask:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return opcode, payload


def websocket_send(conn, payload: bytes, opcode: int = 0x1):
    length = len(payload)
    head = bytes([0x80 | opcode])
    if length < 126:
        head += bytes([length])
    elif length < 65536:
        head += bytes([126]) + struct.pack(">H", length)
    else:
        head += bytes([127]) + struct.pack(">Q", length)
    conn.sendall(head + payload)


# ---------------------------------------------------------------------------
# shared per-connection session logic


class _Session:
    """Request handling shared by TCP and WebSocket connections.

    Publishers never touch the socket: each subscription is drained by its
    own pump thread writing under the connection lock, and the bounded bus
    queue drops subscribers that fall behind instead of stalling the bus.
    """

    def __init__(self, bus: Bus, send_text):
        self.bus = bus
        self._send_text = send_text
        self.subs: dict[str, busmod.Subscription] = {}
        self._pumps = []
        self.alive = True

    def enqueue(self, text: str):
        try:
            self._send_text(text)
        except OSError:
            self.alive = False

    def _pump(self, sub):
        for env in sub:
            self.enqueue(encode_envelope(env))
            if not self.alive:
                sub.close()
                return

    def handle_line(self, line: str):
        line = line.strip()
        if not line:
            return
        try:
            req = json.loads(line)
            if not isinstance(req, dict):
                raise ValueError("request must be an object")
            op = req.get("op")
            if op == "subscribe":
                topic = req.get("topic")
                if topic in self.subs:
                    raise BusError(f"already subscribed to '{topic}'")
                sub = self.bus.subscribe(topic)
                self.subs[topic] = sub
                t = threading.Thread(target=self._pump, args=(sub,), daemon=True)
                t.start()
                self._pumps.append(t)
                self.enqueue(json.dumps({"op": "subscribed", "topic": topic},
                                        separators=(",", ":")))
            elif op == "unsubscribe":
                sub = self.subs.pop(req.get("topic"), None)
                if sub is not None:
                    sub.close()
                self.enqueue(json.dumps({"op": "unsubscribed", "topic": req.get("topic")},
                                        separators=(",", ":")))
            elif op == "publish":
                seq = self.bus.publish(req.get("topic"), req.get("payload"))
                self.enqueue(json.dumps({"op": "ok", "topic": req.get("topic"), "seq": seq},
                                        separators=(",", ":")))
            elif op == "ping":
                self.enqueue(json.dumps({"op": "pong"}, separators=(",", ":")))
            else:
                raise ValueError(f"unknown op {op!r}")
        except (ValueError, KeyError, UnknownTopicError, SchemaError, BusError) as exc:
            self.enqueue(json.dumps({"op": "error", "message": str(exc)},
                                    separators=(",", ":")))

    def close(self):
        self.alive = False
        for sub in list(self.subs.values()):
            sub.close()
        self.subs.clear()


# ---------------------------------------------------------------------------
# servers


class _ThreadingTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class BusServer:
    """Serves one Bus over TCP lines plus the WebSocket bridge port."""

    def __init__(self, bus: Bus, host: str = "127.0.0.1", port: int = 0,
                 ws_port: int | None = None):
        self.bus = bus
        self._sessions = []
        self._sessions_lock = threading.Lock()
        server = self

        class TcpHandler(socketserver.StreamRequestHandler):
            def handle(self):
                self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                lock = threading.Lock()

                def send_text(text):
                    with lock:
                        self.wfile.write(text.encode("utf-8") + b"\n")
                        self.wfile.flush()

                session = _Session(server.bus, send_text)
                server._track(session)
                try:
                    for raw in self.rfile:
                        session.handle_line(raw.decode("utf-8", "replace"))
                        if not session.alive:
                            break
                except (OSError, ValueError):
                    pass
                finally:
                    session.close()

        class WsHandler(socketserver.BaseRequestHandler):
            def handle(self):
                conn = self.request
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                if not websocket_handshake(conn):
                    return
                lock = threading.Lock()

                def send_text(text):
                    with lock:
                        websocket_send(conn, text.encode("utf-8"))

                session = _Session(server.bus, send_text)
                server._track(session)
                try:
                    while session.alive:
                        opcode, payload = websocket_recv(conn)
                        if opcode == 0x8:       # close
                            try:
                                websocket_send(conn, payload[:2], opcode=0x8)
                            except OSError:
                                pass
                            break
                        if opcode == 0x9:       # ping -> pong
                            with lock:
                                websocket_send(conn, payload, opcode=0xA)
                        elif opcode in (0x1, 0x2):
                            for line in payload.decode("utf-8", "replace").splitlines():
                                session.handle_line(line)
                except (ConnectionError, OSError):
                    pass
                finally:
                    session.close()

        self._tcp = _ThreadingTCPServer((host, port), TcpHandler)
        self.host, self.port = self._tcp.server_address[:2]
        ws_port = (self.port + 1) if ws_port is None else ws_port
        self._ws = _ThreadingTCPServer((host, ws_port), WsHandler)
        self.ws_port = self._ws.server_address[1]
        self._threads = []

    def _track(self, session):
        with self._sessions_lock:
            self._sessions.append(session)

    def start(self):
        for srv in (self._tcp, self._ws):
            t = threading.Thread(target=srv.serve_forever, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self):
        with self._sessions_lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.close()
        for srv in (self._tcp, self._ws):
            srv.shutdown()
            srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve(bus: Bus, bind: str = "127.0.0.1:0") -> BusServer:
    """Bind and start the bus endpoint; 'host:port' (WS bridge on port+1)."""
    host, _, port = bind.rpartition(":")
    return BusServer(bus, host or "127.0.0.1", int(port)).start()


class StaticHTTPServer:
    """Serves the active scenario geometry (and optional static files).

    GET /scenario/geometry returns the geometry document as JSON; anything
    under static_dir is served as-is (the operator console, typically).
    """

    def __init__(self, geometry_doc: dict, host="127.0.0.1", port=0,
                 static_dir=None):
        import http.server

        body = json.dumps(geometry_doc).encode("utf-8")
        static_root = static_dir

        class Handler(http.server.SimpleHTTPRequestHandler):
            def __init__(self, *a, **kw):
                kw["directory"] = str(static_root) if static_root else None
                super().__init__(*a, **kw)

            def log_message(self, *a):
                pass

            def do_GET(self):
                if self.path.rstrip("/") == "/scenario/geometry":
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.send_header("Access-Control-Allow-Origin", "*")
                    self.end_headers()
                    self.wfile.write(body)
                    return
                if static_root is None:
                    self.send_error(404)
                    return
                super().do_GET()

        self._srv = http.server.ThreadingHTTPServer((host, port), Handler)
        self._srv.daemon_threads = True
        self.host, self.port = self._srv.server_address[:2]
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()


# ---------------------------------------------------------------------------
# TCP client


class BusClient:
    """Line-protocol client for a remote bus endpoint."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self.sock.makefile("rb")
        self._wlock = threading.Lock()
        self._acks: "queue.Queue[dict]" = queue.Queue()
        self._envelopes: "queue.Queue[object]" = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            for raw in self._rfile:
                doc = json.loads(raw.decode("utf-8"))
                if "op" in doc:
                    self._acks.put(doc)
                else:
                    self._envelopes.put(decode_envelope(raw.decode("utf-8")))
        except (OSError, ValueError):
            pass
        self._envelopes.put(None)

    def _send(self, doc):
        data = json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n"
        with self._wlock:
            self.sock.sendall(data)

    def _expect(self, op, timeout=10.0):
        reply = self._acks.get(timeout=timeout)
        if reply.get("op") == "error":
            raise BusError(reply.get("message", "remote error"))
        if reply.get("op") != op:
            raise BusError(f"expected {op}, got {reply}")
        return reply

    def subscribe(self, topic):
        self._send({"op": "subscribe", "topic": topic})
        self._expect("subscribed")

    def publish(self, topic, payload) -> int:
        self._send({"op": "publish", "topic": topic, "payload": payload})
        return self._expect("ok")["seq"]

    def send_raw(self, text: str):
        with self._wlock:
            self.sock.sendall(text.encode("utf-8") + b"\n")

    def next_error(self, timeout=10.0) -> str:
        reply = self._acks.get(timeout=timeout)
        if reply.get("op") != "error":
            raise BusError(f"expected error reply, got {reply}")
        return reply["message"]

    def recv(self, timeout=None) -> Envelope | None:
        """Next envelope from any subscription; None at end-of-stream."""
        try:
            item = self._envelopes.get(timeout=timeout)
        except queue.Empty:
            return None
        return item

    def ping(self):
        self._send({"op": "ping"})
        self._expect("pong")

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
