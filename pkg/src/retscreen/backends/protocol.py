"""Framed-JSON wire protocol for model backends.

Each message is a 4-byte big-endian length prefix followed by one UTF-8 JSON
object. Images travel as base64 text: either PNG bytes ("png-b64") or raw
little-endian 32-bit floats ("f32le-b64"). Raw mode round-trips the float32
pixel storage losslessly and is the bit-exactness reference.

Responses are serialized canonically (sorted keys, no whitespace) so that a
conforming server is reproducible byte for byte.
"""

from __future__ import annotations

import base64
import binascii
import json
import socket
import struct

import numpy as np

from ..core import PixelGrid
from .base import ProbabilityMask

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")

ENCODING_PNG = "png-b64"
ENCODING_F32 = "f32le-b64"


class ProtocolViolation(Exception):
    """A frame or payload that breaks the protocol; `code` goes on the wire."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def canonical_dumps(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolViolation("bad-frame", f"frame of {len(payload)} bytes exceeds limit")
    return _HEADER.pack(len(payload)) + payload


def send_message(sock: socket.socket, obj: dict) -> None:
    sock.sendall(frame(canonical_dumps(obj)))


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes; ConnectionError on a mid-message EOF."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_header(sock: socket.socket) -> int | None:
    """Frame length, or None on a clean EOF between frames."""
    first = sock.recv(1)
    if not first:
        return None
    rest = recv_exact(sock, _HEADER.size - 1)
    return _HEADER.unpack(first + rest)[0]


def read_message(sock: socket.socket) -> dict | None:
    """One framed JSON object; None on clean EOF.

    Raises ProtocolViolation("bad-frame") for an unusable length prefix or a
    body that is not a JSON object. After a bad length prefix the stream cannot
    be resynchronized by us, but the caller may keep the connection open and
    let the peer start a fresh frame.
    """
    length = read_header(sock)
    if length is None:
        return None
    if length == 0 or length > MAX_FRAME_BYTES:
        raise ProtocolViolation("bad-frame", f"invalid frame length {length}")
    body = recv_exact(sock, length)
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation("bad-frame", f"frame body is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolViolation("bad-frame", "frame body must be a JSON object")
    return obj


# ---------------------------------------------------------------------------
# payload codecs

def encode_image(grid: PixelGrid, encoding: str = ENCODING_F32) -> dict:
    if encoding == ENCODING_F32:
        data = base64.b64encode(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
    elif encoding == ENCODING_PNG:
        from ..imaging import encode_png

        data = base64.b64encode(encode_png(grid))
    else:
        raise ProtocolViolation("bad-image", f"unknown image encoding {encoding!r}")
    return {
        "w": grid.width,
        "h": grid.height,
        "c": grid.channels,
        "encoding": encoding,
        "data": data.decode("ascii"),
    }


def decode_image(payload: object) -> PixelGrid:
    if not isinstance(payload, dict):
        raise ProtocolViolation("bad-image", "image payload must be an object")
    try:
        w, h, c = int(payload["w"]), int(payload["h"]), int(payload["c"])
        encoding = payload["encoding"]
        raw = base64.b64decode(payload["data"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise ProtocolViolation("bad-image", f"image payload malformed: {exc}") from exc
    if encoding == ENCODING_F32:
        if w < 1 or h < 1 or c not in (1, 3):
            raise ProtocolViolation("bad-image", f"bad geometry {w}x{h}x{c}")
        expected = w * h * c * 4
        if len(raw) != expected:
            raise ProtocolViolation("bad-image", f"f32 payload is {len(raw)} bytes, expected {expected}")
        values = np.frombuffer(raw, dtype="<f4").reshape(h, w, c)
        if not np.all(np.isfinite(values)):
            raise ProtocolViolation("bad-image", "non-finite pixel values")
        return PixelGrid.from_array(values)
    if encoding == ENCODING_PNG:
        from ..imaging import DecodeError, decode

        try:
            grid = decode(raw)
        except DecodeError as exc:
            raise ProtocolViolation("bad-image", str(exc)) from exc
        if (grid.width, grid.height) != (w, h):
            raise ProtocolViolation("bad-image", "png geometry does not match header")
        return grid
    raise ProtocolViolation("bad-image", f"unknown image encoding {encoding!r}")


def encode_mask(mask: ProbabilityMask) -> dict:
    data = base64.b64encode(np.ascontiguousarray(mask.probs, dtype="<f4").tobytes())
    return {"w": mask.width, "h": mask.height, "encoding": ENCODING_F32, "data": data.decode("ascii")}


def decode_mask(payload: object) -> ProbabilityMask:
    if not isinstance(payload, dict):
        raise ProtocolViolation("bad-mask", "mask payload must be an object")
    try:
        w, h = int(payload["w"]), int(payload["h"])
        if payload["encoding"] != ENCODING_F32:
            raise ProtocolViolation("bad-mask", f"unknown mask encoding {payload['encoding']!r}")
        raw = base64.b64decode(payload["data"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise ProtocolViolation("bad-mask", f"mask payload malformed: {exc}") from exc
    if len(raw) != w * h * 4:
        raise ProtocolViolation("bad-mask", f"f32 payload is {len(raw)} bytes, expected {w * h * 4}")
    probs = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
        raise ProtocolViolation("bad-mask", "mask probabilities out of [0, 1]")
    return ProbabilityMask(width=w, height=h, probs=probs)


# ---------------------------------------------------------------------------
# message builders

def classify_request(req_id: str, model_id: str, task: str, image: dict) -> dict:
    return {"id": req_id, "op": "classify", "task": task, "model": model_id, "image": image}


def segment_request(req_id: str, model_id: str, image: dict) -> dict:
    return {"id": req_id, "op": "segment", "task": None, "model": model_id, "image": image}


def scores_response(req_id: str, scores: dict[str, float]) -> dict:
    return {"id": req_id, "scores": {k: float(v) for k, v in scores.items()}}


def mask_response(req_id: str, mask: ProbabilityMask) -> dict:
    return {"id": req_id, "mask": encode_mask(mask)}


def error_response(req_id: str, code: str, message: str) -> dict:
    return {"id": req_id, "error": {"code": code, "message": message}}
