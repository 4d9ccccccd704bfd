"""Client for external model backends speaking the framed-JSON protocol."""

from __future__ import annotations

import socket
import threading
import uuid

from ..core import PixelGrid
from . import protocol
from .base import (
    Backend,
    BackendDescriptor,
    BackendTimeoutError,
    BackendUnavailableError,
    MalformedResponseError,
    ProbabilityMask,
    UnsupportedError,
)

_UNSUPPORTED_CODES = {"unsupported-task", "unsupported-op", "unknown-model"}


class ExternalBackend(Backend):
    """Talks to one backend process over a stream socket.

    Requests on a connection are strictly serialized (the protocol is
    request/response with id echo). Connection failures get one reconnect
    attempt; timeouts do not, per policy.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        timeout_s: float = 5.0,
        image_encoding: str = protocol.ENCODING_F32,
    ):
        if descriptor.kind != "external" or descriptor.endpoint is None:
            raise ValueError("ExternalBackend needs an external descriptor with an endpoint")
        self.descriptor = descriptor
        self.timeout_s = timeout_s
        self.image_encoding = image_encoding
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    # -- connection management -------------------------------------------

    def _connect(self) -> socket.socket:
        host, port = self.descriptor.endpoint
        try:
            sock = socket.create_connection((host, port), timeout=self.timeout_s)
        except OSError as exc:
            raise BackendUnavailableError(
                f"backend {self.descriptor.model_id!r} unreachable at {host}:{port}: {exc}"
            ) from exc
        sock.settimeout(self.timeout_s)
        return sock

    def close(self) -> None:
        with self._lock:
            self._close_locked()

    def _close_locked(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _roundtrip_once(self, request: dict) -> dict:
        if self._sock is None:
            self._sock = self._connect()
        protocol.send_message(self._sock, request)
        reply = protocol.read_message(self._sock)
        if reply is None:
            raise ConnectionError("backend closed the connection")
        return reply

    def _request(self, request: dict, task: str | None) -> dict:
        label = f"backend {self.descriptor.model_id!r} task {task or 'segment'!r}"
        with self._lock:
            try:
                try:
                    return self._roundtrip_once(request)
                except (ConnectionError, BrokenPipeError, OSError) as exc:
                    if isinstance(exc, socket.timeout):
                        raise
                    # one retry on a fresh connection, connection failures only
                    self._close_locked()
                    self._sock = self._connect()
                    return self._roundtrip_once(request)
            except socket.timeout as exc:
                self._close_locked()
                raise BackendTimeoutError(f"{label} timed out after {self.timeout_s}s") from exc
            except protocol.ProtocolViolation as exc:
                self._close_locked()
                raise MalformedResponseError(f"{label}: {exc}") from exc
            except BackendUnavailableError:
                raise
            except OSError as exc:
                self._close_locked()
                raise BackendUnavailableError(f"{label} failed: {exc}") from exc

    # -- protocol ----------------------------------------------------------

    def _check_reply(self, request: dict, reply: dict, task: str | None) -> dict:
        label = f"backend {self.descriptor.model_id!r} task {task or 'segment'!r}"
        if reply.get("id") != request["id"]:
            raise MalformedResponseError(f"{label}: reply id {reply.get('id')!r} does not echo request")
        err = reply.get("error")
        if err is not None:
            code = err.get("code", "unknown") if isinstance(err, dict) else "unknown"
            message = err.get("message", "") if isinstance(err, dict) else str(err)
            if code in _UNSUPPORTED_CODES:
                raise UnsupportedError(f"{label}: {code}: {message}")
            raise MalformedResponseError(f"{label}: backend error {code}: {message}")
        return reply

    def classify(self, image: PixelGrid, task: str) -> dict[str, float]:
        request = protocol.classify_request(
            uuid.uuid4().hex, self.descriptor.model_id, task, protocol.encode_image(image, self.image_encoding)
        )
        reply = self._check_reply(request, self._request(request, task), task)
        scores = reply.get("scores")
        if not isinstance(scores, dict):
            raise MalformedResponseError(
                f"backend {self.descriptor.model_id!r} task {task!r}: reply carries no scores object"
            )
        try:
            return {str(k): float(v) for k, v in scores.items()}
        except (TypeError, ValueError) as exc:
            raise MalformedResponseError(
                f"backend {self.descriptor.model_id!r} task {task!r}: non-numeric score: {exc}"
            ) from exc

    def segment(self, image: PixelGrid) -> ProbabilityMask:
        request = protocol.segment_request(
            uuid.uuid4().hex, self.descriptor.model_id, protocol.encode_image(image, self.image_encoding)
        )
        reply = self._check_reply(request, self._request(request, None), None)
        payload = reply.get("mask")
        if payload is None:
            raise MalformedResponseError(
                f"backend {self.descriptor.model_id!r} segment reply carries no mask"
            )
        try:
            return protocol.decode_mask(payload)
        except protocol.ProtocolViolation as exc:
            raise MalformedResponseError(f"backend {self.descriptor.model_id!r}: {exc}") from exc
