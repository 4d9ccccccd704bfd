"""Long-running protocol responder over a registry of stub models.

Protocol violations are answered with error envelopes, never with dropped
connections; one request is in flight per connection, and connections are
served concurrently.
"""

from __future__ import annotations

import socket
import threading
from types import MappingProxyType

from . import protocol
from .scoring import ReferenceStub

CLASSIFY_TASKS = ("quality", "pvi", "edd")


class StubModelRegistry:
    """Immutable model_id -> stub mapping, fixed at startup."""

    def __init__(self, models: dict | None = None):
        self._models = MappingProxyType(dict(models or {"ref-features-v1": ReferenceStub()}))

    def get(self, model_id):
        return self._models.get(model_id)

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._models))


def handle_request(registry: StubModelRegistry, request: dict) -> dict:
    req_id = request.get("id")
    if not isinstance(req_id, str):
        return protocol.error_response("", "malformed-request", "request id must be a string")
    op = request.get("op")
    if op not in ("classify", "segment"):
        return protocol.error_response(req_id, "unsupported-op", f"unknown op {op!r}")
    model = request.get("model")
    stub = registry.get(model)
    if stub is None:
        return protocol.error_response(req_id, "unknown-model", f"no model {model!r} here")
    try:
        values = protocol.decode_image(request.get("image"))
    except protocol.ProtocolViolation as exc:
        return protocol.error_response(req_id, exc.code, str(exc))
    except ValueError as exc:
        return protocol.error_response(req_id, "bad-image", str(exc))

    try:
        if op == "classify":
            task = request.get("task")
            if task not in CLASSIFY_TASKS:
                return protocol.error_response(req_id, "unsupported-task", f"unknown task {task!r}")
            if f"classify-{task}" not in stub.capabilities:
                return protocol.error_response(req_id, "unsupported-task", f"task {task!r} not served")
            return protocol.scores_response(req_id, stub.classify(values, task))
        if "segment" not in stub.capabilities:
            return protocol.error_response(req_id, "unsupported-op", "segment not served")
        return protocol.mask_response(req_id, stub.segment(values))
    except Exception as exc:  # answer, never drop
        return protocol.error_response(req_id, "internal-error", f"{type(exc).__name__}: {exc}")


class BackendServer:
    def __init__(self, registry: StubModelRegistry | None = None, host: str = "127.0.0.1", port: int = 0):
        self.registry = registry or StubModelRegistry()
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

    def serve_forever(self) -> None:
        self._accept_loop()

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
                    try:
                        protocol.send_message(conn, protocol.error_response("", exc.code, str(exc)))
                        continue
                    except OSError:
                        return
                except (ConnectionError, OSError):
                    return
                if request is None:
                    return
                response = handle_request(self.registry, request)
                try:
                    protocol.send_message(conn, response)
                except (ConnectionError, OSError):
                    return


def serve_backend(host: str, port: int, registry: StubModelRegistry | None = None) -> BackendServer:
    """Bind and start serving; returns the running server."""
    return BackendServer(registry, host=host, port=port).start()
