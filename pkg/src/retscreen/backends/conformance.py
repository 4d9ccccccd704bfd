"""Byte-level conformance replay for protocol backends.

A fixture directory holds framed request/response pairs (req_NNN.bin,
resp_NNN.bin) plus a manifest. A conforming backend, given each request's exact
bytes, must answer with the response's exact bytes. Regenerate the pinned pairs
with tools/gen_protocol_fixtures.py when the reference scorers change."""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass
from pathlib import Path

from .protocol import recv_exact


@dataclass(frozen=True)
class FixtureResult:
    name: str
    ok: bool
    detail: str = ""


def iter_fixture_pairs(fixtures_dir: str | Path):
    d = Path(fixtures_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    for entry in manifest["fixtures"]:
        yield (
            entry["request"],
            (d / entry["request"]).read_bytes(),
            (d / entry["response"]).read_bytes(),
        )


def read_raw_frame(sock: socket.socket) -> bytes:
    header = recv_exact(sock, 4)
    length = int.from_bytes(header, "big")
    return header + recv_exact(sock, length)


def replay_fixtures(
    address: tuple[str, int], fixtures_dir: str | Path, timeout_s: float = 30.0
) -> list[FixtureResult]:
    """Replay every fixture over one connection; responses must match byte for byte."""
    results = []
    with socket.create_connection(address, timeout=timeout_s) as sock:
        for name, request, expected in iter_fixture_pairs(fixtures_dir):
            sock.sendall(request)
            actual = read_raw_frame(sock)
            if actual == expected:
                results.append(FixtureResult(name=name, ok=True))
            else:
                results.append(
                    FixtureResult(
                        name=name,
                        ok=False,
                        detail=f"expected {len(expected)} bytes, got {len(actual)}: "
                        f"{actual[:120]!r}",
                    )
                )
    return results
