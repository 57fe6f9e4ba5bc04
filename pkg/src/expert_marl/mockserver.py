"""Scripted chat-completions server for offline runs and tests."""
from __future__ import annotations

import itertools
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable


class ScriptedLlmServer:
    """Serves ``POST /v1/chat/completions`` from a script of replies.

    ``script`` is either an iterable of reply strings (cycled) or a callable
    ``(prompt) -> str``.  A reply of ``None`` makes the server sleep for
    ``stall_seconds`` before answering, which lets clients hit their timeout.
    """

    def __init__(self, script: Iterable[str | None] | Callable[[str], str | None],
                 stall_seconds: float = 2.0, host: str = "127.0.0.1", port: int = 0):
        if callable(script):
            self._reply = script
        else:
            cycle = itertools.cycle(list(script))
            self._reply = lambda prompt: next(cycle)
        self.stall_seconds = stall_seconds
        self.requests: list[dict] = []
        self.replies: list[str | None] = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                if self.path.rstrip("/") != "/v1/chat/completions":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                prompt = body.get("messages", [{}])[-1].get("content", "")
                with server._lock:
                    server.requests.append(body)
                    reply = server._reply(prompt)
                    server.replies.append(reply)
                if reply is None:
                    time.sleep(server.stall_seconds)
                    reply = ""
                payload = json.dumps({
                    "id": "mock", "object": "chat.completion", "model": body.get("model"),
                    "choices": [{"index": 0, "finish_reason": "stop",
                                 "message": {"role": "assistant", "content": reply}}],
                }).encode()
                try:
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ScriptedLlmServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
