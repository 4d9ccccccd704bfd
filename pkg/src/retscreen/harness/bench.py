"""Single-worker throughput and memory benchmark for the full pipeline.

Runs every corpus image through a one-eye screening session with batch size 1
and no worker threads, then reports per-stage latency percentiles, sustained
throughput, and peak resident memory. Deployment budgets (>= 1 image/s,
< 4 GiB) are asserted by the acceptance suite, not here: slow runs are
reported, not failed.
"""

from __future__ import annotations

import platform
import resource
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..config import PipelineConfig
from ..pipeline import NextAction, ScreeningEngine, SessionStore
from .synth import load_truth

STAGE_BUCKETS = ("quality", "pvi", "edd", "vlr")


@dataclass(frozen=True)
class BenchResult:
    image_count: int
    images_per_second: float
    per_stage_ms: dict  # stage -> {"p50": float, "p95": float}
    peak_rss_bytes: int
    machine: str
    elapsed_s: float

    def __post_init__(self) -> None:
        if self.images_per_second <= 0:
            raise ValueError("throughput must be positive")
        for stage, pcts in self.per_stage_ms.items():
            if pcts["p50"] > pcts["p95"]:
                raise ValueError(f"{stage}: p50 exceeds p95")

    def to_json_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "images_per_second": round(self.images_per_second, 3),
            "per_stage_ms": {
                stage: {k: round(v, 3) for k, v in pcts.items()}
                for stage, pcts in self.per_stage_ms.items()
            },
            "peak_rss_bytes": self.peak_rss_bytes,
            "machine": self.machine,
            "elapsed_s": round(self.elapsed_s, 3),
        }


def _machine_fingerprint() -> str:
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{platform.platform()} | {cpu or 'unknown cpu'}"


def peak_rss_bytes() -> int:
    # ru_maxrss is kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def bench_run(
    corpus_dir: str | Path,
    config: PipelineConfig,
    limit: int | None = None,
    min_corpus: int = 50,
) -> BenchResult:
    """Screen the corpus start to finish, one image at a time, one thread."""
    corpus = Path(corpus_dir)
    rows = load_truth(corpus)
    if len(rows) < min_corpus:
        raise ValueError(f"benchmark needs >= {min_corpus} corpus images, found {len(rows)}")
    if limit is not None:
        rows = rows[:limit]

    cfg = replace(config, eyes=("left",))
    stage_samples: dict[str, list[float]] = {b: [] for b in STAGE_BUCKETS}
    end_to_end: list[float] = []

    with tempfile.TemporaryDirectory(prefix="retscreen-bench-") as tmp:
        store = SessionStore(tmp, fsync=False)
        engine = ScreeningEngine(cfg, store)
        t_start = time.perf_counter()
        for i, row in enumerate(rows):
            data = (corpus / "images" / row.file).read_bytes()
            t_img = time.perf_counter()
            session = engine.create_session(f"bench-{i}", session_id=f"bench-{i:05d}")
            action = engine.submit_capture(session, "left", data)
            while action is NextAction.PROMPT_RECAPTURE:
                action = engine.submit_capture(session, "left", data)
            if action is NextAction.READY_TO_SCREEN:
                engine.run_screening(session)
            end_to_end.append((time.perf_counter() - t_img) * 1000.0)
            timings = session.timings_ms()
            for bucket in STAGE_BUCKETS:
                if timings[bucket] > 0:
                    stage_samples[bucket].append(timings[bucket])
        elapsed = time.perf_counter() - t_start

    per_stage = {}
    for bucket, samples in list(stage_samples.items()) + [("end_to_end", end_to_end)]:
        if samples:
            per_stage[bucket] = {
                "p50": float(np.percentile(samples, 50)),
                "p95": float(np.percentile(samples, 95)),
            }
    return BenchResult(
        image_count=len(rows),
        images_per_second=len(rows) / elapsed,
        per_stage_ms=per_stage,
        peak_rss_bytes=peak_rss_bytes(),
        machine=_machine_fingerprint(),
        elapsed_s=elapsed,
    )
