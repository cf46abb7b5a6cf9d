"""Local HTTP stand-ins for the live-price API and the push endpoint."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import unquote


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _reply(self, code: int, doc: Optional[dict] = None) -> None:
        body = json.dumps(doc).encode("utf-8") if doc is not None else b""
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        stub = self.server.stub
        if not self.path.startswith("/prices/"):
            return self._reply(404, {"error": "not found"})
        sid = unquote(self.path[len("/prices/"):])
        with stub.lock:
            stub.price_requests += 1
            prices = stub.prices.get(sid)
        if prices is None:
            return self._reply(404, {"error": f"unknown station {sid}"})
        self._reply(200, {k: prices.get(k) for k in ("e5", "e10", "diesel")})

    def do_POST(self):
        stub = self.server.stub
        if self.path != "/notify":
            return self._reply(404, {"error": "not found"})
        length = int(self.headers.get("Content-Length") or 0)
        try:
            doc = json.loads(self.rfile.read(length).decode("utf-8"))
        except ValueError:
            return self._reply(400, {"error": "body is not JSON"})
        with stub.lock:
            if stub.fail_notifications > 0:
                stub.fail_notifications -= 1
                return self._reply(503, {"error": "temporarily unavailable"})
            stub.notifications.append(doc)
        self._reply(200, {"ok": True})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    stub: "StubServer"


class StubServer:
    """``with StubServer(prices) as stub: stub.url``"""

    def __init__(self, prices: Optional[dict[str, dict[str, float]]] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.prices = dict(prices or {})
        self.notifications: list[dict] = []
        self.price_requests = 0
        self.fail_notifications = 0
        self.lock = threading.Lock()
        self._server = _Server((host, port), _Handler)
        self._server.stub = self
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
