"""Command line entry points: synth, calibrate, screen, bench, serve, replay.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..config import ConfigInvalidError, PipelineConfig, default_config, load_config, load_operating_point
from ..core import LabeledScore
from ..imaging import DecodeError
from ..pipeline import CorruptLogError, NextAction, ScreeningEngine, SessionStore, replay_from_store
from ..stages import POLICIES, calibrate_operating_point
from .bench import bench_run
from .synth import SynthSpec, synth_generate


def _read_score_csv(path: Path) -> list[LabeledScore]:
    """CSV with header `score,label`, label in {0,1}."""
    samples = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"score", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: need columns score,label")
        for i, row in enumerate(reader, start=2):
            try:
                samples.append(LabeledScore(float(row["score"]), row["label"].strip() == "1"))
            except ValueError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from exc
    return samples


def _resolve_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "operating_point", None):
        return default_config(load_operating_point(args.operating_point))
    return default_config()


def cmd_synth(args) -> int:
    spec = SynthSpec(
        count=args.count,
        seed=args.seed,
        prevalence=args.prevalence,
        salt_fraction=args.salt,
        blur_radius=args.blur_radius,
        fraction_ungradable=args.fraction_ungradable,
        size=args.size,
    )
    out = synth_generate(spec, args.out)
    print(f"wrote {spec.count} images to {out}")
    return 0


def cmd_calibrate(args) -> int:
    samples = _read_score_csv(Path(args.scores))
    op = calibrate_operating_point(
        samples, args.policy, target=args.target, calibration_set_id=args.set_id
    )
    doc = json.dumps(op.to_json_dict(), indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(doc + "\n")
        print(f"wrote {args.output}")
    else:
        print(doc)
    return 0


def _iter_images(in_dir: Path):
    images = in_dir / "images"
    root = images if images.is_dir() else in_dir
    for path in sorted(root.iterdir()):
        if path.suffix.lower() in (".png", ".jpg", ".jpeg"):
            yield path


def cmd_screen(args) -> int:
    if not args.config and not args.operating_point:
        print("screen requires --config or --operating-point", file=sys.stderr)
        return 2
    config = replace(_resolve_config(args), eyes=("left",))
    store = SessionStore(args.store, fsync=not args.no_fsync)
    engine = ScreeningEngine(config, store)
    rows = []
    for i, path in enumerate(_iter_images(Path(args.input))):
        session = engine.create_session(path.stem, session_id=f"screen-{i:05d}-{path.stem}")
        data = path.read_bytes()
        try:
            action = engine.submit_capture(session, "left", data)
            while action is NextAction.PROMPT_RECAPTURE:
                action = engine.submit_capture(session, "left", data)
            if action is NextAction.READY_TO_SCREEN:
                engine.run_screening(session)
        except DecodeError as exc:
            print(f"{path.name}: undecodable: {exc}", file=sys.stderr)
            rows.append((path.name, session.session_id, "decode-error", ""))
            continue
        report = session.report or {}
        rows.append(
            (
                path.name,
                session.session_id,
                session.state.value,
                "1" if report.get("referral_recommended") else "0",
            )
        )
    if args.summary:
        with open(args.summary, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "session_id", "state", "referral_recommended"])
            writer.writerows(rows)
    referred = sum(1 for r in rows if r[3] == "1")
    print(f"screened {len(rows)} images into {args.store}; {referred} referrals recommended")
    return 0


def cmd_bench(args) -> int:
    config = _resolve_config(args)
    result = bench_run(args.corpus, config, limit=args.limit, min_corpus=args.min_corpus)
    print(json.dumps(result.to_json_dict(), indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .service import BindError, ConsoleService

    config = _resolve_config(args)
    if not args.config and not args.operating_point:
        print("warning: serving with an uncalibrated default operating point", file=sys.stderr)
    store = SessionStore(args.store)
    try:
        service = ConsoleService(
            config,
            store,
            host=args.host,
            port=args.port,
            static_dir=args.static,
            verbose=True,
        )
    except BindError as exc:
        print(f"cannot serve: {exc}", file=sys.stderr)
        return 1
    host, port = service.address
    print(f"listening on http://{host}:{port}")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return 0


def cmd_replay(args) -> int:
    store = SessionStore(args.store)
    session = replay_from_store(store, args.session_id)
    print(f"session   {session.session_id}")
    print(f"patient   {session.patient_ref}")
    print(f"state     {session.state.value}")
    print(f"events    {len(session.events)}")
    for eye in session.eyes:
        slot = session.slots[eye]
        verdicts = [a.get("gradable") for a in slot.attempts]
        print(f"{eye:>6}    attempts={len(slot.attempts)} gradable={verdicts} "
              f"pvi={'-' if slot.pvi is None else slot.pvi.get('decision', 'error')}")
    if session.report is not None:
        print(f"referral recommended: {session.report['referral_recommended']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retscreen",
        description="Community retinal-photo screening pipeline tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--prevalence", type=float, default=0.4)
    p.add_argument("--salt", type=float, default=0.002)
    p.add_argument("--blur-radius", type=int, default=5)
    p.add_argument("--fraction-ungradable", type=float, default=0.1)
    p.add_argument("--size", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="pick an operating point from a score CSV")
    p.add_argument("scores", help="CSV with header score,label")
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--target", type=float, default=None)
    p.add_argument("--set-id", default="")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("screen", help="batch-screen a directory of fundus images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--operating-point", default=None)
    p.add_argument("--store", default="screen-store")
    p.add_argument("--summary", default=None, help="write a summary CSV here")
    p.add_argument("--no-fsync", action="store_true")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("bench", help="throughput/memory benchmark over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--operating-point", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--min-corpus", type=int, default=50)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="HTTP service for the operator console")
    p.add_argument("--config", default=None)
    p.add_argument("--operating-point", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8970)
    p.add_argument("--store", default="console-store")
    p.add_argument("--static", default=None, help="serve this directory at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="reconstruct a stored session from its log")
    p.add_argument("--store", required=True)
    p.add_argument("session_id")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalidError, CorruptLogError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
