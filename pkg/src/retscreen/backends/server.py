"""Protocol server hosting an in-process backend.

This is the loopback half of the protocol self-conformance suite and a handy
way to expose the reference scorers to other processes. One request is in
flight per connection; multiple connections are served concurrently.
"""

from __future__ import annotations

import socket
import threading

from . import protocol
from .base import Backend, CLASSIFY_TASKS, UnsupportedError


def handle_request(backend: Backend, request: dict) -> dict:
    """Map one request object to one response object (pure, transport-free)."""
    req_id = request.get("id")
    if not isinstance(req_id, str):
        return protocol.error_response("", "malformed-request", "request id must be a string")
    op = request.get("op")
    if op not in ("classify", "segment"):
        return protocol.error_response(req_id, "unsupported-op", f"unknown op {op!r}")
    model = request.get("model")
    if model != backend.descriptor.model_id:
        return protocol.error_response(req_id, "unknown-model", f"no model {model!r} here")
    try:
        image = protocol.decode_image(request.get("image"))
    except protocol.ProtocolViolation as exc:
        return protocol.error_response(req_id, exc.code, str(exc))
    except ValueError as exc:
        return protocol.error_response(req_id, "bad-image", str(exc))

    try:
        if op == "classify":
            task = request.get("task")
            if task not in CLASSIFY_TASKS:
                return protocol.error_response(req_id, "unsupported-task", f"unknown task {task!r}")
            if f"classify-{task}" not in backend.descriptor.capabilities:
                return protocol.error_response(req_id, "unsupported-task", f"task {task!r} not served")
            return protocol.scores_response(req_id, backend.classify(image, task))
        if "segment" not in backend.descriptor.capabilities:
            return protocol.error_response(req_id, "unsupported-op", "segment not served")
        return protocol.mask_response(req_id, backend.segment(image))
    except UnsupportedError as exc:
        return protocol.error_response(req_id, "unsupported-task", str(exc))
    except Exception as exc:  # deliberate catch-all: protocol answers, never drops
        return protocol.error_response(req_id, "internal-error", f"{type(exc).__name__}: {exc}")


class BackendServer:
    """Threaded protocol server around a single Backend instance."""

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self._listener = socket.create_server((host, port))
        self.address: tuple[str, int] = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "BackendServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass

    def __enter__(self) -> "BackendServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_connection, args=(conn,), daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    request = protocol.read_message(conn)
                except protocol.ProtocolViolation as exc:
                    # answer and keep the connection; the peer may resync with
                    # a fresh frame
                    try:
                        protocol.send_message(conn, protocol.error_response("", exc.code, str(exc)))
                        continue
                    except OSError:
                        return
                except (ConnectionError, OSError):
                    return
                if request is None:
                    return
                response = handle_request(self.backend, request)
                try:
                    protocol.send_message(conn, response)
                except (ConnectionError, OSError):
                    return
