import json
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, HTTPServer


def json_body(status: int, obj) -> tuple:
    return status, json.dumps(obj).encode("utf-8"), "application/json"


@contextmanager
def wire_server(handler):
    """Local HTTP server for wire-protocol tests.

    handler(path, payload) -> (status, body_bytes, content_type); payload is
    the decoded JSON body for POST, None for GET. Yields (base_url, seen)
    where seen collects (path, payload) per request.
    """
    seen = []

    class H(BaseHTTPRequestHandler):
        def _respond(self, payload):
            seen.append((self.path, payload))
            status, body, ctype = handler(self.path, payload)
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            n = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(n)
            try:
                payload = json.loads(raw)
            except ValueError:
                payload = raw
            self._respond(payload)

        def do_GET(self):
            self._respond(None)

        def log_message(self, *args):
            pass

    srv = HTTPServer(("127.0.0.1", 0), H)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{srv.server_port}", seen
    finally:
        srv.shutdown()
        thread.join()


def free_port() -> int:
    """A port nothing is listening on (for connection-refused tests)."""
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
