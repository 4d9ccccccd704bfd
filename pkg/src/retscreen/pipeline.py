"""Screening session orchestration: state machine, append-only event log,
report generation, and referral records.

Sessions are event-sourced: every command appends events and the in-memory
state is the fold of those events, so replaying a session's log reconstructs it
field for field. Decoded images are a transient cache on the live session only;
they never enter the log.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .backends import Backend
from .config import PipelineConfig, build_backend_set
from .core import PixelGrid
from .imaging import NoFovError, decode, encode_png, resize
from .stages import (
    PVIResult,
    RecaptureAction,
    StageFailureError,
    assess_quality,
    detect_pvi,
    diagnose,
    recapture_decision,
    visualize_lesions,
)


class InvalidStateError(RuntimeError):
    """Operation not allowed in the session's current state."""


class IdCollisionError(ValueError):
    """A session with this id already exists in the store."""


class CorruptLogError(ValueError):
    """Event log unusable; carries the offending sequence number."""

    def __init__(self, seq: int, message: str):
        super().__init__(f"event {seq}: {message}")
        self.seq = seq


class NotEligibleError(RuntimeError):
    """Referral requested for a session that does not recommend one."""


class AlreadyReferredError(RuntimeError):
    """At most one referral per session."""


# -- states -----------------------------------------------------------------

class SessionState(str, Enum):
    AWAITING_CAPTURE = "awaiting-capture"
    QUALITY_REVIEW = "quality-review"
    SCREENING = "screening"
    COMPLETED = "completed"
    REFERRED = "referred"
    COMPLETED_UNGRADABLE = "completed-ungradable"


class NextAction(str, Enum):
    PROMPT_RECAPTURE = "prompt-recapture"
    EYE_ACCEPTED = "eye-accepted"
    READY_TO_SCREEN = "ready-to-screen"
    SESSION_UNGRADABLE = "session-ungradable"


# -- events -------------------------------------------------------------------

CAPTURE_SUBMITTED = "CaptureSubmitted"
QUALITY_ASSESSED = "QualityAssessed"
RECAPTURE_PROMPTED = "RecapturePrompted"
PVI_ASSESSED = "PviAssessed"
DIAGNOSED = "Diagnosed"
LESIONS_VISUALIZED = "LesionsVisualized"
REPORT_GENERATED = "ReportGenerated"
REFERRAL_ISSUED = "ReferralIssued"
ABANDONED = "Abandoned"

# required payload keys per kind; stage events additionally carry either their
# value keys or an {"error": ...} record
_REQUIRED_KEYS = {
    CAPTURE_SUBMITTED: {"eye", "attempt", "image_sha256", "width", "height", "channels"},
    QUALITY_ASSESSED: {"eye", "attempt", "elapsed_ms"},
    RECAPTURE_PROMPTED: {"eye", "attempt"},
    PVI_ASSESSED: {"eye", "elapsed_ms"},
    DIAGNOSED: {"eye", "elapsed_ms"},
    LESIONS_VISUALIZED: {"eye", "elapsed_ms"},
    REPORT_GENERATED: {"report"},
    REFERRAL_ISSUED: {"destination", "reason", "issued_at"},
    ABANDONED: {"eye", "attempts"},
}

_STAGE_VALUE_KEYS = {
    QUALITY_ASSESSED: {"score", "gradable", "reasons"},
    PVI_ASSESSED: {"score", "decision", "threshold"},
    DIAGNOSED: {"probs", "positives", "thresholds"},
    LESIONS_VISUALIZED: {"component_count", "components", "overlay_asset", "mask_asset"},
}

_TIMING_BUCKETS = {
    QUALITY_ASSESSED: "quality",
    PVI_ASSESSED: "pvi",
    DIAGNOSED: "edd",
    LESIONS_VISUALIZED: "vlr",
}


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    ts: str
    kind: str
    payload: dict

    def to_json_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
        )


def validate_event(seq: int, kind: str, payload: object) -> None:
    if kind not in _REQUIRED_KEYS:
        raise CorruptLogError(seq, f"unknown event kind {kind!r}")
    if not isinstance(payload, dict):
        raise CorruptLogError(seq, "payload must be an object")
    missing = _REQUIRED_KEYS[kind] - payload.keys()
    if missing:
        raise CorruptLogError(seq, f"{kind} payload missing {sorted(missing)}")
    if kind in _STAGE_VALUE_KEYS:
        has_error = "error" in payload
        has_values = _STAGE_VALUE_KEYS[kind] <= payload.keys()
        if has_error == has_values:
            raise CorruptLogError(seq, f"{kind} payload needs its value keys or an error, not both")


@dataclass(frozen=True)
class ReferralRecord:
    session_id: str
    issued_at: str
    reason: str  # "pvi-positive" | "ungradable"
    destination: str


@dataclass
class EyeSlot:
    eye: str
    attempts: list = field(default_factory=list)
    accepted: bool = False
    pvi: dict | None = None
    diagnosis: dict | None = None
    lesions: dict | None = None
    failed_stages: list = field(default_factory=list)


@dataclass
class ScreeningSession:
    session_id: str
    patient_ref: str
    eyes: tuple[str, ...]
    created_at: str
    state: SessionState = SessionState.AWAITING_CAPTURE
    events: list[SessionEvent] = field(default_factory=list)
    slots: dict = field(default_factory=dict)
    report: dict | None = None
    referral: dict | None = None
    # decoded images for the in-flight session; never persisted, never compared
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        for eye in self.eyes:
            self.slots.setdefault(eye, EyeSlot(eye=eye))

    # -- folding ------------------------------------------------------------

    def apply(self, event: SessionEvent) -> None:
        """Fold one event into the state. Replay-safe: raises CorruptLogError
        for payloads that do not fit the machine."""
        kind, payload = event.kind, event.payload
        validate_event(event.seq, kind, payload)
        slot = None
        if "eye" in _REQUIRED_KEYS[kind]:
            eye = payload.get("eye")
            if eye not in self.slots:
                raise CorruptLogError(event.seq, f"unknown eye {eye!r}")
            slot = self.slots[eye]

        if kind == CAPTURE_SUBMITTED:
            self.state = SessionState.QUALITY_REVIEW
        elif kind == QUALITY_ASSESSED:
            slot.attempts.append(payload)
            if "error" in payload:
                slot.failed_stages.append("quality")
            elif payload["gradable"]:
                slot.accepted = True
                if all(self.slots[e].accepted for e in self.eyes):
                    self.state = SessionState.SCREENING
                else:
                    self.state = SessionState.AWAITING_CAPTURE
        elif kind == RECAPTURE_PROMPTED:
            self.state = SessionState.AWAITING_CAPTURE
        elif kind == ABANDONED:
            self.state = SessionState.COMPLETED_UNGRADABLE
        elif kind == PVI_ASSESSED:
            slot.pvi = payload
            if "error" in payload:
                slot.failed_stages.append("pvi")
        elif kind == DIAGNOSED:
            slot.diagnosis = payload
            if "error" in payload:
                slot.failed_stages.append("edd")
        elif kind == LESIONS_VISUALIZED:
            slot.lesions = payload
            if "error" in payload:
                slot.failed_stages.append("vlr")
        elif kind == REPORT_GENERATED:
            self.report = payload["report"]
            if self.state == SessionState.SCREENING:
                self.state = SessionState.COMPLETED
        elif kind == REFERRAL_ISSUED:
            self.referral = payload
            self.state = SessionState.REFERRED
        self.events.append(event)

    # -- derived views -------------------------------------------------------

    def captures_for(self, eye: str) -> int:
        return sum(1 for e in self.events if e.kind == CAPTURE_SUBMITTED and e.payload["eye"] == eye)

    def timings_ms(self) -> dict:
        out = {bucket: 0.0 for bucket in ("quality", "pvi", "edd", "vlr")}
        for event in self.events:
            bucket = _TIMING_BUCKETS.get(event.kind)
            if bucket is not None:
                out[bucket] += event.payload.get("elapsed_ms", 0.0)
        out["total"] = sum(out.values())
        return out

    def eye_positive(self, eye: str) -> bool:
        pvi = self.slots[eye].pvi
        return bool(pvi is not None and pvi.get("decision"))


# ---------------------------------------------------------------------------
# persistence

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class SessionStore:
    """File-per-session storage: a directory with meta.json, an append-only
    newline-delimited event log, report.json and PNG assets, plus an index file
    mapping session ids to their directories."""

    def __init__(self, root: str | Path, fsync: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._index_path = self.root / "index.json"
        self._mutex = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    # one writer per session; distinct sessions fully parallel
    def lock(self, session_id: str) -> threading.Lock:
        with self._mutex:
            return self._locks.setdefault(session_id, threading.Lock())

    def _read_index(self) -> dict:
        if not self._index_path.is_file():
            return {}
        return json.loads(self._index_path.read_text())

    def _write_index(self, index: dict) -> None:
        tmp = self._index_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True))
        tmp.replace(self._index_path)

    def session_dir(self, session_id: str) -> Path:
        return self.root / session_id

    def exists(self, session_id: str) -> bool:
        return session_id in self._read_index()

    def list_sessions(self) -> list[str]:
        return sorted(self._read_index())

    def create(self, session: ScreeningSession) -> None:
        if not _SAFE_ID.match(session.session_id):
            raise ValueError(f"session id {session.session_id!r} is not filesystem-safe")
        with self._mutex:
            index = self._read_index()
            if session.session_id in index:
                raise IdCollisionError(f"session {session.session_id!r} already exists")
            d = self.session_dir(session.session_id)
            (d / "assets").mkdir(parents=True, exist_ok=True)
            (d / "meta.json").write_text(
                json.dumps(
                    {
                        "session_id": session.session_id,
                        "patient_ref": session.patient_ref,
                        "eyes": list(session.eyes),
                        "created_at": session.created_at,
                    },
                    indent=2,
                    sort_keys=True,
                )
            )
            (d / "events.ndjson").touch()
            index[session.session_id] = session.session_id
            self._write_index(index)

    def append_event(self, session_id: str, event: SessionEvent) -> None:
        path = self.session_dir(session_id) / "events.ndjson"
        with path.open("a") as fh:
            fh.write(event.to_json_line() + "\n")
            fh.flush()
            if self.fsync:
                import os

                os.fsync(fh.fileno())

    def load_meta(self, session_id: str) -> dict:
        path = self.session_dir(session_id) / "meta.json"
        if not path.is_file():
            raise KeyError(f"unknown session {session_id!r}")
        return json.loads(path.read_text())

    def read_event_lines(self, session_id: str) -> list[str]:
        path = self.session_dir(session_id) / "events.ndjson"
        if not path.is_file():
            raise KeyError(f"unknown session {session_id!r}")
        return [line for line in path.read_text().splitlines() if line.strip()]

    def write_asset(self, session_id: str, name: str, data: bytes) -> str:
        path = self.session_dir(session_id) / "assets" / name
        path.write_bytes(data)
        return name

    def read_asset(self, session_id: str, name: str) -> bytes:
        if "/" in name or "\\" in name or name.startswith("."):
            raise KeyError(f"bad asset name {name!r}")
        path = self.session_dir(session_id) / "assets" / name
        if not path.is_file():
            raise KeyError(f"no asset {name!r} for session {session_id!r}")
        return path.read_bytes()

    def write_report(self, session_id: str, report: dict) -> None:
        path = self.session_dir(session_id) / "report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True))

    def write_referral_letter(self, session_id: str, text: str) -> None:
        (self.session_dir(session_id) / "referral.txt").write_text(text)


# ---------------------------------------------------------------------------
# the engine

def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _error_record(exc: Exception, stage: str) -> dict:
    return {"stage": stage, "message": str(exc)}


class ScreeningEngine:
    """Drives sessions through the capture -> quality -> screening -> report
    flow, appending durable events before acting on them."""

    def __init__(
        self,
        config: PipelineConfig,
        store: SessionStore,
        backends: dict[str, Backend] | None = None,
    ):
        self.config = config
        self.store = store
        self.backends = backends if backends is not None else build_backend_set(config)
        self._sessions: dict[str, ScreeningSession] = {}

    # -- helpers --------------------------------------------------------------

    def get_session(self, session_id: str) -> ScreeningSession:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise KeyError(f"unknown session {session_id!r}") from None

    def _record(self, session: ScreeningSession, kind: str, payload: dict) -> None:
        event = SessionEvent(
            seq=len(session.events) + 1, ts=_now_iso(), kind=kind, payload=payload
        )
        self.store.append_event(session.session_id, event)
        session.apply(event)

    # -- commands --------------------------------------------------------------

    def create_session(self, patient_ref: str, session_id: str | None = None) -> ScreeningSession:
        sid = session_id or uuid.uuid4().hex
        session = ScreeningSession(
            session_id=sid,
            patient_ref=patient_ref,
            eyes=tuple(self.config.eyes),
            created_at=_now_iso(),
        )
        self.store.create(session)  # IdCollisionError on duplicates
        self._sessions[sid] = session
        return session

    def submit_capture(self, session: ScreeningSession, eye: str, image_bytes: bytes) -> NextAction:
        with self.store.lock(session.session_id):
            if session.state != SessionState.AWAITING_CAPTURE:
                raise InvalidStateError(
                    f"cannot submit a capture in state {session.state.value}"
                )
            if eye not in session.eyes:
                raise InvalidStateError(f"eye {eye!r} is not configured for this session")
            if session.slots[eye].accepted:
                raise InvalidStateError(f"{eye} eye already has an accepted capture")

            original = decode(image_bytes)  # DecodeError propagates untouched
            res = self.config.working_resolution
            working = (
                original
                if (original.width, original.height) == (res, res)
                else resize(original, res, res)
            )
            session.cache[eye] = {"original": original, "working": working}

            attempt = session.captures_for(eye) + 1
            self._record(
                session,
                CAPTURE_SUBMITTED,
                {
                    "eye": eye,
                    "attempt": attempt,
                    "image_sha256": hashlib.sha256(image_bytes).hexdigest(),
                    "width": original.width,
                    "height": original.height,
                    "channels": original.channels,
                },
            )

            t0 = time.perf_counter()
            try:
                verdict = assess_quality(working, self.backends["quality"], self.config, attempt)
            except StageFailureError as exc:
                elapsed = (time.perf_counter() - t0) * 1000.0
                self._record(
                    session,
                    QUALITY_ASSESSED,
                    {
                        "eye": eye,
                        "attempt": attempt,
                        "elapsed_ms": elapsed,
                        "error": _error_record(exc, "quality"),
                    },
                )
                # a burned attempt either prompts another capture or abandons
                if attempt >= self.config.max_attempts:
                    self._abandon(session, eye, attempt)
                else:
                    self._record(session, RECAPTURE_PROMPTED, {"eye": eye, "attempt": attempt})
                raise
            elapsed = (time.perf_counter() - t0) * 1000.0
            self._record(
                session,
                QUALITY_ASSESSED,
                {
                    "eye": eye,
                    "attempt": attempt,
                    "elapsed_ms": elapsed,
                    "score": verdict.score,
                    "gradable": verdict.gradable,
                    "reasons": list(verdict.reasons),
                },
            )

            action = recapture_decision(verdict, self.config)
            if action is RecaptureAction.PROCEED:
                if session.state == SessionState.SCREENING:
                    return NextAction.READY_TO_SCREEN
                return NextAction.EYE_ACCEPTED
            if action is RecaptureAction.PROMPT_RECAPTURE:
                self._record(session, RECAPTURE_PROMPTED, {"eye": eye, "attempt": attempt})
                return NextAction.PROMPT_RECAPTURE
            self._abandon(session, eye, attempt)
            return NextAction.SESSION_UNGRADABLE

    def _abandon(self, session: ScreeningSession, eye: str, attempts: int) -> None:
        self._record(session, ABANDONED, {"eye": eye, "attempts": attempts})
        report = self._build_report(session, ungradable=True)
        self._record(session, REPORT_GENERATED, {"report": report})
        self.store.write_report(session.session_id, report)

    def run_screening(self, session: ScreeningSession) -> dict:
        with self.store.lock(session.session_id):
            if session.state != SessionState.SCREENING:
                raise InvalidStateError(
                    f"screening requires every configured eye accepted; state is {session.state.value}"
                )
            for eye in session.eyes:
                cached = session.cache.get(eye)
                if cached is None:
                    raise InvalidStateError(
                        f"no in-memory image for {eye} eye; replayed sessions cannot be screened"
                    )
                self._screen_eye(session, eye, cached["working"], cached["original"])
            report = self._build_report(session, ungradable=False)
            self._record(session, REPORT_GENERATED, {"report": report})
            self.store.write_report(session.session_id, report)
            return report

    def _screen_eye(
        self, session: ScreeningSession, eye: str, working: PixelGrid, original: PixelGrid
    ) -> None:
        t0 = time.perf_counter()
        try:
            pvi = detect_pvi(working, self.backends["pvi"], self.config.operating_point)
        except StageFailureError as exc:
            self._record(
                session,
                PVI_ASSESSED,
                {
                    "eye": eye,
                    "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                    "error": _error_record(exc, "pvi"),
                },
            )
            return
        self._record(
            session,
            PVI_ASSESSED,
            {
                "eye": eye,
                "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                "score": pvi.score,
                "decision": pvi.decision,
                "threshold": pvi.operating_point.threshold,
            },
        )
        if not pvi.decision:
            return

        t0 = time.perf_counter()
        try:
            vector = diagnose(working, self.backends["edd"], self.config, pvi)
            self._record(
                session,
                DIAGNOSED,
                {
                    "eye": eye,
                    "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                    "probs": dict(vector.probs),
                    "positives": list(vector.positives),
                    "thresholds": dict(vector.per_label_thresholds),
                },
            )
        except StageFailureError as exc:
            self._record(
                session,
                DIAGNOSED,
                {
                    "eye": eye,
                    "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                    "error": _error_record(exc, "edd"),
                },
            )

        t0 = time.perf_counter()
        try:
            vis = visualize_lesions(working, self.backends["segment"], self.config, pvi, original)
            overlay_name = self.store.write_asset(
                session.session_id, f"overlay_{eye}.png", encode_png(vis.overlay)
            )
            mask_grid = PixelGrid.from_array(vis.refined.bits.astype("float32"))
            mask_name = self.store.write_asset(
                session.session_id, f"mask_{eye}.png", encode_png(mask_grid)
            )
            self._record(
                session,
                LESIONS_VISUALIZED,
                {
                    "eye": eye,
                    "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                    "component_count": len(vis.components),
                    "components": [
                        {"area": c.area, "bbox": list(c.bbox)} for c in vis.components
                    ],
                    "overlay_asset": overlay_name,
                    "mask_asset": mask_name,
                },
            )
        except (StageFailureError, NoFovError) as exc:
            self._record(
                session,
                LESIONS_VISUALIZED,
                {
                    "eye": eye,
                    "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                    "error": _error_record(exc, "vlr"),
                },
            )

    # -- report -----------------------------------------------------------------

    def _build_report(self, session: ScreeningSession, ungradable: bool) -> dict:
        eyes = {}
        any_positive = False
        any_failed = False
        for eye in session.eyes:
            slot = session.slots[eye]
            entry: dict = {
                "accepted": slot.accepted,
                "quality_attempts": [dict(a) for a in slot.attempts],
                "failed_stages": list(slot.failed_stages),
            }
            if slot.pvi is not None:
                if "error" in slot.pvi:
                    entry["pvi"] = {"error": slot.pvi["error"]}
                else:
                    entry["pvi"] = {
                        "score": round(slot.pvi["score"], 6),
                        "decision": slot.pvi["decision"],
                        "threshold": slot.pvi["threshold"],
                    }
                    any_positive = any_positive or slot.pvi["decision"]
            if slot.diagnosis is not None:
                if "error" in slot.diagnosis:
                    entry["diagnosis"] = {"error": slot.diagnosis["error"]}
                else:
                    entry["diagnosis"] = {
                        "probs": {k: round(v, 6) for k, v in slot.diagnosis["probs"].items()},
                        "positives": list(slot.diagnosis["positives"]),
                        "thresholds": dict(slot.diagnosis["thresholds"]),
                    }
            if slot.lesions is not None and "error" not in slot.lesions:
                entry["lesions"] = {
                    "component_count": slot.lesions["component_count"],
                    "components": slot.lesions["components"],
                    "overlay_asset": slot.lesions["overlay_asset"],
                    "mask_asset": slot.lesions["mask_asset"],
                }
            elif slot.lesions is not None:
                entry["lesions"] = {"error": slot.lesions["error"]}
            any_failed = any_failed or bool(slot.failed_stages)
            eyes[eye] = entry

        referral = ungradable or any_positive or any_failed
        return {
            "session_id": session.session_id,
            "patient_ref": session.patient_ref,
            "generated_at": _now_iso(),
            "ungradable": ungradable,
            "eyes": eyes,
            "referral_recommended": referral,
            "manual_review": any_failed,
            "operating_point": self.config.operating_point.to_json_dict(),
            "timings_ms": session.timings_ms(),
        }

    # -- referral ----------------------------------------------------------------

    def issue_referral(self, session: ScreeningSession, destination: str) -> ReferralRecord:
        with self.store.lock(session.session_id):
            if session.referral is not None or session.state == SessionState.REFERRED:
                raise AlreadyReferredError(f"session {session.session_id} already referred")
            if session.state not in (SessionState.COMPLETED, SessionState.COMPLETED_UNGRADABLE):
                raise NotEligibleError(f"cannot refer in state {session.state.value}")
            if not (session.report and session.report.get("referral_recommended")):
                raise NotEligibleError("report does not recommend a referral")
            reason = (
                "ungradable"
                if session.state == SessionState.COMPLETED_UNGRADABLE
                else "pvi-positive"
            )
            issued_at = _now_iso()
            self._record(
                session,
                REFERRAL_ISSUED,
                {"destination": destination, "reason": reason, "issued_at": issued_at},
            )
            record = ReferralRecord(
                session_id=session.session_id,
                issued_at=issued_at,
                reason=reason,
                destination=destination,
            )
            self.store.write_referral_letter(session.session_id, render_referral_letter(session))
            return record

    # -- replay ------------------------------------------------------------------

    def replay(self, session_id: str) -> ScreeningSession:
        """Rebuild a session from its meta record and event log."""
        return replay_from_store(self.store, session_id)


def replay_from_store(store: SessionStore, session_id: str) -> ScreeningSession:
    """Parse and fold a persisted session; CorruptLogError names the bad line."""
    meta = store.load_meta(session_id)
    events = []
    for i, line in enumerate(store.read_event_lines(session_id), start=1):
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptLogError(i, f"line is not JSON: {exc}") from exc
        if not isinstance(raw, dict) or not {"seq", "ts", "kind", "payload"} <= raw.keys():
            raise CorruptLogError(i, "line must carry seq, ts, kind, payload")
        events.append(
            SessionEvent(seq=raw["seq"], ts=raw["ts"], kind=raw["kind"], payload=raw["payload"])
        )
    return replay_events(
        events,
        session_id=meta["session_id"],
        patient_ref=meta["patient_ref"],
        eyes=tuple(meta["eyes"]),
        created_at=meta["created_at"],
    )


def replay_events(
    events: list[SessionEvent],
    session_id: str,
    patient_ref: str,
    eyes: tuple[str, ...],
    created_at: str,
) -> ScreeningSession:
    """Fold an event list into a session; an empty list yields a fresh
    awaiting-capture session."""
    session = ScreeningSession(
        session_id=session_id, patient_ref=patient_ref, eyes=eyes, created_at=created_at
    )
    expected = 1
    for event in events:
        if event.seq != expected:
            raise CorruptLogError(event.seq, f"expected seq {expected}")
        session.apply(event)
        expected += 1
    return session


def render_referral_letter(session: ScreeningSession) -> str:
    """Human-readable referral letter from the report content."""
    report = session.report or {}
    lines = [
        "VISION SCREENING REFERRAL",
        "",
        f"Session:    {session.session_id}",
        f"Patient:    {session.patient_ref}",
        f"Issued:     {(session.referral or {}).get('issued_at', '')}",
        f"Reason:     {(session.referral or {}).get('reason', '')}",
        f"Send to:    {(session.referral or {}).get('destination', '')}",
        "",
    ]
    if report.get("ungradable"):
        lines.append(
            "Retinal photographs could not be graded after the allowed capture"
        )
        lines.append("attempts. Please arrange an in-person eye examination.")
    else:
        for eye, entry in sorted(report.get("eyes", {}).items()):
            pvi = entry.get("pvi") or {}
            if "score" in pvi:
                status = "POSITIVE" if pvi.get("decision") else "negative"
                lines.append(f"{eye} eye: impairment possibility {pvi['score']:.6f} ({status})")
            diagnosis = entry.get("diagnosis") or {}
            if diagnosis.get("positives"):
                lines.append(f"  initial categories: {', '.join(diagnosis['positives'])}")
            elif "probs" in diagnosis:
                lines.append("  no specific category; see Others score")
    if report.get("manual_review"):
        lines.append("")
        lines.append("One or more stages failed; manual review required.")
    lines.append("")
    lines.append("This is a screening result, not a diagnosis.")
    return "\n".join(lines) + "\n"
