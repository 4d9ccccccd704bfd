#!/usr/bin/env python3
"""Regenerate the wire-protocol conformance fixtures.

Each fixture is a framed request (req_NNN.bin) plus the byte-exact framed
response (resp_NNN.bin) a conforming backend must produce for it. Responses are
computed from the in-process reference backend, so regenerating after a scorer
change re-pins the contract. Run from the repository root:

    python3 tools/gen_protocol_fixtures.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from retscreen.backends import ReferenceBackend  # noqa: E402
from retscreen.backends import protocol  # noqa: E402
from retscreen.backends.server import handle_request  # noqa: E402
from retscreen.harness.synth import SynthSpec, render_sample  # noqa: E402

MODEL = "ref-features-v1"
OUT = ROOT / "fixtures" / "protocol"


def fixture_image(seed: int, role: str, size: int):
    spec = SynthSpec(count=1, seed=seed, size=size)
    return render_sample(spec, np.random.default_rng(seed), role).image


def build_requests() -> list[dict]:
    requests: list[dict] = []

    def img(seed, role="negative", size=96, encoding=protocol.ENCODING_F32):
        return protocol.encode_image(fixture_image(seed, role, size), encoding)

    n = 0

    def rid():
        nonlocal n
        n += 1
        return f"fx-{n:03d}"

    # classification over both encodings
    for seed in range(10, 16):
        requests.append(protocol.classify_request(rid(), MODEL, "quality", img(seed)))
    for seed in range(16, 22):
        requests.append(
            protocol.classify_request(
                rid(), MODEL, "quality", img(seed, encoding=protocol.ENCODING_PNG)
            )
        )
    for seed in range(22, 27):
        requests.append(protocol.classify_request(rid(), MODEL, "pvi", img(seed, "positive")))
    for seed in range(27, 32):
        requests.append(protocol.classify_request(rid(), MODEL, "pvi", img(seed, size=128)))
    for seed in range(32, 37):
        requests.append(protocol.classify_request(rid(), MODEL, "edd", img(seed, "positive", 128)))
    for seed in range(37, 42):
        requests.append(
            protocol.classify_request(
                rid(), MODEL, "edd", img(seed, "positive", 96, protocol.ENCODING_PNG)
            )
        )

    # segmentation
    for seed in range(42, 52):
        role = "positive" if seed % 2 == 0 else "negative"
        requests.append(protocol.segment_request(rid(), MODEL, img(seed, role, 96)))

    # error paths a conforming backend must answer identically
    requests.append(protocol.classify_request(rid(), "no-such-model", "quality", img(60)))
    requests.append(protocol.segment_request(rid(), "no-such-model", img(61)))
    requests.append({"id": rid(), "op": "train", "model": MODEL, "image": img(62)})
    requests.append({"id": rid(), "op": "classify", "task": "refract", "model": MODEL, "image": img(63)})
    requests.append({"id": rid(), "op": "classify", "task": None, "model": MODEL, "image": img(64)})
    bad_geometry = img(65)
    bad_geometry["w"] += 1
    requests.append(protocol.classify_request(rid(), MODEL, "quality", bad_geometry))
    truncated = img(66)
    truncated["data"] = truncated["data"][:400]
    requests.append(protocol.segment_request(rid(), MODEL, truncated))
    requests.append({"id": 7, "op": "classify", "task": "quality", "model": MODEL})

    assert len(requests) == 50, len(requests)
    return requests


def main() -> int:
    OUT.mkdir(parents=True, exist_ok=True)
    backend = ReferenceBackend()
    manifest = {"model_id": MODEL, "count": 0, "fixtures": []}
    for i, request in enumerate(build_requests()):
        req_bytes = protocol.frame(protocol.canonical_dumps(request))
        response = handle_request(backend, request)
        resp_bytes = protocol.frame(protocol.canonical_dumps(response))
        (OUT / f"req_{i:03d}.bin").write_bytes(req_bytes)
        (OUT / f"resp_{i:03d}.bin").write_bytes(resp_bytes)
        manifest["fixtures"].append(
            {
                "request": f"req_{i:03d}.bin",
                "response": f"resp_{i:03d}.bin",
                "op": request.get("op"),
                "task": request.get("task"),
                "kind": "error" if "error" in response else "ok",
            }
        )
    manifest["count"] = len(manifest["fixtures"])
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {manifest['count']} fixtures to {OUT}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
