"""Local HTTP endpoint that answers POSTs from a scripted list of status codes."""

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockWebhook:
    def __init__(self, statuses=()):
        self.statuses = list(statuses)  # consumed in order; 200 once exhausted
        self.requests = []  # (status_sent, content_type, body)
        self.delivered = []  # bodies answered with 2xx
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with owner._lock:
                    status = owner.statuses.pop(0) if owner.statuses else 200
                    owner.requests.append((status, self.headers.get("Content-Type"), body))
                    if 200 <= status < 300:
                        owner.delivered.append(body)
                self.send_response(status)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self._lock = threading.Lock()
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/events"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
