"""`refbackend` entry point: serve the stub registry over the wire protocol."""

from __future__ import annotations

import argparse
import sys

from .server import BackendServer, StubModelRegistry


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="refbackend", description="deterministic stub model backend")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=9411)
    args = parser.parse_args(argv)
    registry = StubModelRegistry()
    try:
        server = BackendServer(registry, host=args.host, port=args.port)
    except OSError as exc:
        print(f"cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    host, port = server.address
    print(f"serving models {list(registry.ids())} on {host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
