"""HTTP face of the pipeline for the operator console.

Endpoints are stateless wrappers over the engine: any call sequence is
equivalent to the corresponding direct engine calls. JSON bodies in and out;
errors are {"error": {"code", "message"}} with matching status codes. Single
operator deployment: no auth, permissive CORS.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from ..backends import BackendError
from ..config import PipelineConfig
from ..imaging import DecodeError
from ..pipeline import (
    QUALITY_ASSESSED,
    AlreadyReferredError,
    InvalidStateError,
    NotEligibleError,
    ScreeningEngine,
    SessionState,
    SessionStore,
    IdCollisionError,
)
from ..stages import StageFailureError

MAX_BODY = 64 * 1024 * 1024


class BindError(OSError):
    """The requested address could not be bound."""


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


_SESSION_ROUTE = re.compile(r"^/sessions/([A-Za-z0-9._-]+)(/.*)?$")

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".json": "application/json",
}


class ConsoleHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "retscreen"

    # -- plumbing ----------------------------------------------------------

    @property
    def engine(self) -> ScreeningEngine:
        return self.server.engine

    def log_message(self, fmt, *args):  # quiet by default; tests parse stdout
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length < 0 or length > MAX_BODY:
            raise ServiceError(413, "body-too-large", f"body of {length} bytes refused")
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        raw = self._body()
        if not raw:
            return {}
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ServiceError(400, "bad-request", f"body is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ServiceError(400, "bad-request", "body must be a JSON object")
        return doc

    def _send(self, status: int, payload: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, status: int, doc: dict) -> None:
        self._send(status, json.dumps(doc).encode("utf-8"), "application/json")

    def _send_error_doc(self, status: int, code: str, message: str) -> None:
        self._send_json(status, {"error": {"code": code, "message": message}})

    def _session(self, session_id: str):
        try:
            return self.engine.get_session(session_id)
        except KeyError as exc:
            raise ServiceError(404, "not-found", str(exc)) from exc

    # -- verbs --------------------------------------------------------------

    def do_OPTIONS(self):  # CORS preflight
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def _dispatch(self, verb: str) -> None:
        try:
            self._route(verb)
        except ServiceError as exc:
            self._send_error_doc(exc.status, exc.code, str(exc))
        except BrokenPipeError:
            pass
        except Exception as exc:  # noqa: BLE001 - service must answer, not die
            self._send_error_doc(500, "internal-error", f"{type(exc).__name__}: {exc}")

    def _route(self, verb: str) -> None:
        url = urlparse(self.path)
        path = url.path
        if verb == "GET" and path == "/healthz":
            self._send_json(200, {"status": "ok"})
            return
        if verb == "POST" and path == "/sessions":
            self._create_session()
            return
        m = _SESSION_ROUTE.match(path)
        if m:
            session_id, rest = m.group(1), m.group(2) or ""
            if verb == "POST" and rest == "/captures":
                self._submit_capture(session_id, url)
                return
            if verb == "POST" and rest == "/screen":
                self._screen(session_id)
                return
            if verb == "GET" and rest == "/report":
                self._report(session_id)
                return
            if verb == "POST" and rest == "/referral":
                self._referral(session_id)
                return
            if verb == "GET" and rest.startswith("/assets/"):
                self._asset(session_id, rest[len("/assets/"):])
                return
        if verb == "GET" and getattr(self.server, "static_dir", None):
            self._static(path)
            return
        raise ServiceError(404, "not-found", f"no route for {verb} {path}")

    # -- handlers -------------------------------------------------------------

    def _create_session(self) -> None:
        doc = self._json_body()
        patient_ref = str(doc.get("patient_ref", "anonymous"))
        try:
            session = self.engine.create_session(patient_ref)
        except IdCollisionError as exc:
            raise ServiceError(409, "id-collision", str(exc)) from exc
        self._send_json(
            201, {"session_id": session.session_id, "eyes": list(session.eyes)}
        )

    def _submit_capture(self, session_id: str, url) -> None:
        session = self._session(session_id)
        eye = (parse_qs(url.query).get("eye") or [""])[0]
        if eye not in session.eyes:
            raise ServiceError(400, "bad-request", f"eye must be one of {list(session.eyes)}")
        data = self._body()
        if not data:
            raise ServiceError(400, "bad-request", "capture body is empty")
        try:
            action = self.engine.submit_capture(session, eye, data)
        except DecodeError as exc:
            raise ServiceError(400, "decode-error", str(exc)) from exc
        except InvalidStateError as exc:
            raise ServiceError(409, "invalid-state", str(exc)) from exc
        except (StageFailureError, BackendError) as exc:
            raise ServiceError(502, "stage-failure", str(exc)) from exc
        verdict = None
        for event in reversed(session.events):
            if event.kind == QUALITY_ASSESSED and event.payload["eye"] == eye:
                verdict = {
                    k: event.payload[k]
                    for k in ("attempt", "score", "gradable", "reasons")
                    if k in event.payload
                }
                break
        self._send_json(200, {"action": action.value, "verdict": verdict})

    def _screen(self, session_id: str) -> None:
        session = self._session(session_id)
        try:
            report = self.engine.run_screening(session)
        except InvalidStateError as exc:
            raise ServiceError(409, "invalid-state", str(exc)) from exc
        self._send_json(200, report)

    def _report(self, session_id: str) -> None:
        session = self._session(session_id)
        if session.report is None:
            raise ServiceError(409, "report-not-ready", "screening has not completed")
        self._send_json(200, session.report)

    def _referral(self, session_id: str) -> None:
        session = self._session(session_id)
        doc = self._json_body()
        destination = str(doc.get("destination", "")).strip()
        if not destination:
            raise ServiceError(400, "bad-request", "destination is required")
        try:
            record = self.engine.issue_referral(session, destination)
        except NotEligibleError as exc:
            raise ServiceError(409, "not-eligible", str(exc)) from exc
        except AlreadyReferredError as exc:
            raise ServiceError(409, "already-referred", str(exc)) from exc
        except InvalidStateError as exc:
            raise ServiceError(409, "invalid-state", str(exc)) from exc
        self._send_json(
            201,
            {
                "session_id": record.session_id,
                "issued_at": record.issued_at,
                "reason": record.reason,
                "destination": record.destination,
            },
        )

    def _asset(self, session_id: str, name: str) -> None:
        self._session(session_id)
        try:
            data = self.engine.store.read_asset(session_id, name)
        except KeyError as exc:
            raise ServiceError(404, "not-found", str(exc)) from exc
        self._send(200, data, "image/png")

    def _static(self, path: str) -> None:
        root = Path(self.server.static_dir).resolve()
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            raise ServiceError(404, "not-found", f"no static file {path}")
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), ctype)


class ConsoleService:
    """Owns the HTTP server plus its engine; start()/stop() for tests, serve_forever
    for the CLI."""

    def __init__(
        self,
        config: PipelineConfig,
        store: SessionStore,
        host: str = "127.0.0.1",
        port: int = 8970,
        static_dir: str | None = None,
        verbose: bool = False,
    ):
        self.engine = ScreeningEngine(config, store)
        try:
            self.httpd = ThreadingHTTPServer((host, port), ConsoleHandler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
        self.httpd.daemon_threads = True
        self.httpd.engine = self.engine
        self.httpd.static_dir = static_dir
        self.httpd.verbose = verbose
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> "ConsoleService":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def __enter__(self) -> "ConsoleService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
