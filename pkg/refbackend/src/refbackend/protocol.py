"""Wire protocol: 4-byte big-endian length prefix + one UTF-8 JSON object.

Framing, canonical serialization, and payload codecs. Responses are serialized
canonically (sorted keys, no whitespace) so a conforming server is reproducible
byte for byte; the error message strings are part of that contract and are
pinned by the shared fixture suite.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import socket
import struct

import numpy as np

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")

ENCODING_PNG = "png-b64"
ENCODING_F32 = "f32le-b64"


class ProtocolViolation(Exception):
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
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> dict | None:
    first = sock.recv(1)
    if not first:
        return None
    length = _HEADER.unpack(first + recv_exact(sock, _HEADER.size - 1))[0]
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


def _decode_png(raw: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        im = Image.open(io.BytesIO(raw))
        if im.mode != "L":
            im = im.convert("RGB")
        im.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ProtocolViolation("bad-image", f"cannot decode image: {exc}") from exc
    arr = np.asarray(im, dtype=np.uint8).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    return arr


def decode_image(payload: object) -> np.ndarray:
    """Image payload -> float32 (h, w, c) array in [0, 1]."""
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
        return np.clip(values, 0.0, 1.0)
    if encoding == ENCODING_PNG:
        arr = _decode_png(raw)
        if (arr.shape[1], arr.shape[0]) != (w, h):
            raise ProtocolViolation("bad-image", "png geometry does not match header")
        return np.clip(arr, 0.0, 1.0)
    raise ProtocolViolation("bad-image", f"unknown image encoding {encoding!r}")


def scores_response(req_id: str, scores: dict[str, float]) -> dict:
    return {"id": req_id, "scores": {k: float(v) for k, v in scores.items()}}


def mask_response(req_id: str, probs: np.ndarray) -> dict:
    data = base64.b64encode(np.ascontiguousarray(probs, dtype="<f4").tobytes())
    return {
        "id": req_id,
        "mask": {
            "w": probs.shape[1],
            "h": probs.shape[0],
            "encoding": ENCODING_F32,
            "data": data.decode("ascii"),
        },
    }


def error_response(req_id: str, code: str, message: str) -> dict:
    return {"id": req_id, "error": {"code": code, "message": message}}
