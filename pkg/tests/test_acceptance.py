"""Acceptance gate: one test per acceptance criterion, each printing a verdict.

The criteria rest on property suites, independent oracles, deployment budget
ceilings, and artifact-defined floors on the deterministic synthetic corpus
(seed 42, 200 images). Run with `pytest tests/test_acceptance.py -v -s` to see
the per-criterion lines.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from retscreen.backends import BackendServer, ReferenceBackend, ReferenceConfig
from retscreen.backends.conformance import replay_fixtures
from retscreen.backends.reference import pvi_score, quality_score, segment_probabilities
from retscreen.config import default_config
from retscreen.core import (
    BinaryMask,
    LabeledScore,
    auc_concordance_oracle,
    compute_roc,
    dice,
)
from retscreen.harness.bench import bench_run
from retscreen.harness.synth import load_truth
from retscreen.imaging import (
    closing,
    decode,
    dilate,
    disc,
    erode,
    extract_fov,
    opening,
    refine_lesion_mask,
)
from retscreen.pipeline import (
    DIAGNOSED,
    LESIONS_VISUALIZED,
    PVI_ASSESSED,
    QUALITY_ASSESSED,
    REFERRAL_ISSUED,
    REPORT_GENERATED,
    NextAction,
    ScreeningEngine,
    SessionState,
    SessionStore,
)
from retscreen.stages import calibrate_operating_point

from test_pipeline import run_random_script

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "protocol"

GiB = 1024**3


def verdict(name: str, detail: str) -> None:
    print(f"\n[PASS] {name}: {detail}")


def random_instance(rng, max_side=100, quantized=True):
    n_pos = int(rng.integers(1, max_side))
    n_neg = int(rng.integers(1, max_side))
    pos = rng.random(n_pos)
    neg = rng.random(n_neg)
    if quantized:
        pos, neg = pos.round(2), neg.round(2)
    return (
        [LabeledScore(float(s), True) for s in pos]
        + [LabeledScore(float(s), False) for s in neg]
    )


class TestAucOracleEquivalence:
    def test_concordance_matches_curve_on_200_instances(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(20240)
        worst = 0.0
        for _ in range(200):
            samples = random_instance(rng, max_side=100)
            gap = abs(compute_roc(samples).auc - float(auc_concordance_oracle(samples)))
            worst = max(worst, gap)
            assert gap <= 1e-9
        elapsed = time.monotonic() - t0
        assert elapsed < 10.0
        verdict(
            "AUC oracle equivalence",
            f"200 instances, worst |curve-concordance| = {worst:.2e} <= 1e-9, {elapsed:.1f}s",
        )


class TestAucInvariances:
    def test_monotone_transform_and_label_flip_on_100_instances(self):
        rng = np.random.default_rng(20241)
        for _ in range(100):
            samples = random_instance(rng, max_side=80)
            base = compute_roc(samples).auc
            for f in (lambda x: x**3, lambda x: 0.5 + 0.4 * x):
                moved = [LabeledScore(f(s.score), s.label) for s in samples]
                assert compute_roc(moved).auc == pytest.approx(base, abs=1e-9)
            flipped = [LabeledScore(s.score, not s.label) for s in samples]
            assert compute_roc(flipped).auc == pytest.approx(1.0 - base, abs=1e-9)
        verdict(
            "AUC invariances",
            "monotone-transform invariance and label-flip antisymmetry on 100 instances",
        )


def sweep_oracle(samples, policy, target):
    from retscreen.stages import THRESHOLD_SENTINEL

    pos = [s.score for s in samples if s.label]
    neg = [s.score for s in samples if not s.label]
    rows = []
    for t in sorted({s.score for s in samples}) + [THRESHOLD_SENTINEL]:
        sens = sum(1 for s in pos if s >= t) / len(pos)
        spec = sum(1 for s in neg if s < t) / len(neg)
        rows.append((t, sens, spec))
    if policy == "target-sensitivity":
        feasible = [r for r in rows if r[1] >= target]
        pool, key = (feasible, lambda r: (r[2], r[0])) if feasible else (rows, lambda r: (r[1], r[2], r[0]))
    elif policy == "target-specificity":
        feasible = [r for r in rows if r[2] >= target]
        pool, key = (feasible, lambda r: (r[1], r[0])) if feasible else (rows, lambda r: (r[2], r[1], r[0]))
    else:
        pool, key = rows, lambda r: (r[1] + r[2] - 1.0, r[0])
    return max(pool, key=key)


class TestOperatingPointCalibration:
    def test_matches_sweep_on_500_instances_all_policies(self):
        rng = np.random.default_rng(20242)
        checked = 0
        for _ in range(500):
            samples = random_instance(rng, max_side=60)
            target = float(rng.integers(0, 21)) / 20.0
            for policy in ("target-sensitivity", "target-specificity", "youden"):
                op = calibrate_operating_point(samples, policy, target=target)
                t, sens, spec = sweep_oracle(samples, policy, target)
                assert op.threshold == t
                assert op.achieved_sensitivity == pytest.approx(sens, abs=1e-12)
                assert op.achieved_specificity == pytest.approx(spec, abs=1e-12)
                if policy == "target-sensitivity" and "target-unattained" not in op.calibration_set_id:
                    assert op.achieved_sensitivity >= target
                checked += 1
        verdict(
            "Operating-point calibration",
            f"{checked} policy evaluations over 500 instances match the exhaustive sweep",
        )


class TestMorphologyAndDiceLaws:
    def test_laws_on_200_random_masks(self):
        rng = np.random.default_rng(20243)
        for i in range(200):
            h = int(rng.integers(8, 129))
            w = int(rng.integers(8, 129))
            bits = rng.random((h, w)) < rng.uniform(0.05, 0.7)
            m = BinaryMask.from_array(bits)
            se = disc(int(rng.integers(1, 4)))
            r = se.radius

            opened = opening(m, se)
            assert not np.any(opened.bits & ~m.bits)  # anti-extensive
            assert np.array_equal(opening(opened, se).bits, opened.bits)  # idempotent

            closed = closing(m, se)
            assert not np.any(m.bits & ~closed.bits)  # extensive
            assert np.array_equal(closing(closed, se).bits, closed.bits)  # idempotent

            sub = BinaryMask.from_array(bits & (rng.random((h, w)) < 0.5))
            assert not np.any(dilate(sub, se).bits & ~dilate(m, se).bits)  # monotone

            if h > 2 * r and w > 2 * r:  # duality away from the border
                dual = ~dilate(BinaryMask.from_array(~m.bits), se).bits
                assert np.array_equal(erode(m, se).bits[r:-r, r:-r], dual[r:-r, r:-r])

            other = BinaryMask.from_array(rng.random((h, w)) < 0.3)
            d = dice(m, other)
            assert 0.0 <= d <= 1.0
            assert d == dice(other, m)
            if m.count:
                assert dice(m, m) == 1.0
        empty = BinaryMask.from_array(np.zeros((4, 4), dtype=bool))
        assert dice(empty, empty) == 1.0
        verdict(
            "Morphology and DICE laws",
            "anti-extensive/extensive, idempotent, monotone, duality, DICE symmetry/identity/bounds"
            " on 200 masks up to 128x128",
        )


class TestVlrRefinementFloor:
    def test_refined_beats_unrefined_and_clears_dice_floor(self, seed42_corpus):
        corpus, _ = seed42_corpus
        backend = ReferenceBackend()
        cfg = ReferenceConfig()
        wins = 0
        dices = []
        positives = [r for r in load_truth(corpus) if r.pvi]
        assert len(positives) == 80
        for row in positives:
            image = decode((corpus / "images" / row.file).read_bytes())
            truth_grid = decode((corpus / "masks" / row.mask_file).read_bytes())
            truth = BinaryMask.from_array(truth_grid.values[:, :, 0] > 0.5)
            raw = segment_probabilities(image, cfg)
            binarized = BinaryMask.from_array(raw.probs >= 0.5)
            refined = refine_lesion_mask(binarized, extract_fov(image).mask)
            d_ref = dice(refined, truth)
            d_raw = dice(binarized, truth)
            dices.append(d_ref)
            if d_ref > d_raw:
                wins += 1
        frac = wins / len(positives)
        mean = float(np.mean(dices))
        assert frac >= 0.90
        assert mean >= 0.45
        verdict(
            "VLR refinement floors",
            f"refined beats unrefined on {wins}/{len(positives)} positives "
            f"({frac:.0%} >= 90%), mean refined DICE {mean:.3f} >= 0.45",
        )


class TestEndToEndSyntheticScreening:
    def test_corpus_screening_aucs_and_runtime(self, seed42_corpus, tmp_path):
        corpus, _ = seed42_corpus
        rows = load_truth(corpus)

        # calibrate on a disjoint corpus, mirroring the CSV -> operating point flow
        from retscreen.harness.synth import SynthSpec, synth_generate

        cal_dir = tmp_path / "calibration"
        synth_generate(SynthSpec(count=60, seed=43), cal_dir)
        cal_cfg = ReferenceConfig()
        cal_samples = [
            LabeledScore(pvi_score(decode((cal_dir / "images" / r.file).read_bytes()), cal_cfg), r.pvi)
            for r in load_truth(cal_dir)
            if r.gradable
        ]
        op = calibrate_operating_point(
            cal_samples, "target-sensitivity", target=0.95, calibration_set_id="synth-seed43"
        )

        config = default_config(op, eyes=("left",))
        store = SessionStore(tmp_path / "store", fsync=False)
        engine = ScreeningEngine(config, store)

        t0 = time.monotonic()
        quality_samples = []
        pvi_samples = []
        for i, row in enumerate(rows):
            data = (corpus / "images" / row.file).read_bytes()
            session = engine.create_session(row.file, session_id=f"e2e-{i:04d}")
            action = engine.submit_capture(session, "left", data)
            while action is NextAction.PROMPT_RECAPTURE:
                action = engine.submit_capture(session, "left", data)
            if action is NextAction.READY_TO_SCREEN:
                engine.run_screening(session)

            first_quality = next(e for e in session.events if e.kind == QUALITY_ASSESSED)
            quality_samples.append(LabeledScore(first_quality.payload["score"], row.gradable))
            pvi_events = [e for e in session.events if e.kind == PVI_ASSESSED]
            if pvi_events:
                assert row.gradable
                pvi_samples.append(LabeledScore(pvi_events[0].payload["score"], row.pvi))
                assert session.state is SessionState.COMPLETED
            else:
                assert session.state is SessionState.COMPLETED_UNGRADABLE
                assert session.report["referral_recommended"] is True
        elapsed = time.monotonic() - t0

        quality_auc = compute_roc(quality_samples).auc
        pvi_auc = compute_roc(pvi_samples).auc
        assert quality_auc >= 0.95
        assert pvi_auc >= 0.95
        assert elapsed < 300.0
        verdict(
            "End-to-end synthetic screening",
            f"200 sessions in {elapsed:.0f}s (< 300s); quality AUC {quality_auc:.4f} >= 0.95,"
            f" PVI AUC {pvi_auc:.4f} >= 0.95 (threshold {op.threshold:.3f} from seed-43 calibration)",
        )


class TestPipelineStateMachine:
    def test_1000_randomized_operator_scripts(self, tmp_path):
        rng = np.random.default_rng(20245)
        stats = {"ungradable": 0, "negative": 0, "positive": 0}
        for idx in range(1000):
            engine, session, expect = run_random_script(tmp_path, rng, idx)

            assert engine.replay(session.session_id) == session

            positive_eyes = set()
            for e in session.events:
                if e.kind == PVI_ASSESSED and e.payload.get("decision"):
                    positive_eyes.add(e.payload["eye"])
                if e.kind in (DIAGNOSED, LESIONS_VISUALIZED):
                    assert e.payload["eye"] in positive_eyes

            for eye in session.eyes:
                assert session.captures_for(eye) <= engine.config.max_attempts

            kinds = [e.kind for e in session.events]
            if session.state in (SessionState.COMPLETED, SessionState.COMPLETED_UNGRADABLE):
                assert kinds.count(REPORT_GENERATED) == 1
            assert kinds.count(REFERRAL_ISSUED) <= 1

            if session.report is None:
                continue
            if session.report["ungradable"]:
                stats["ungradable"] += 1
                assert session.report["referral_recommended"] is True
            elif not any(session.eye_positive(e) for e in session.eyes) and not session.report[
                "manual_review"
            ]:
                stats["negative"] += 1
                assert session.report["referral_recommended"] is False
            elif any(session.eye_positive(e) for e in session.eyes):
                stats["positive"] += 1
                assert session.report["referral_recommended"] is True
        verdict(
            "Pipeline state machine",
            f"1000 scripts: replay==live, gating held, attempts <= 3; "
            f"{stats['negative']} clean negatives not referred, "
            f"{stats['ungradable']} ungradable and {stats['positive']} positive sessions referred",
        )


class TestDeploymentBudgets:
    def test_throughput_and_memory_ceilings(self, seed42_corpus):
        corpus, _ = seed42_corpus
        result = bench_run(corpus, default_config(), limit=None)
        assert result.images_per_second >= 1.0
        assert result.peak_rss_bytes < 4 * GiB
        verdict(
            "Deployment budgets",
            f"{result.images_per_second:.2f} images/s >= 1.0, "
            f"peak RSS {result.peak_rss_bytes / GiB:.2f} GiB < 4 GiB "
            f"(batch size 1, single worker, {result.image_count} images)",
        )


class TestProtocolSelfConformance:
    def test_50_fixture_roundtrips_byte_exact(self):
        server = BackendServer(ReferenceBackend()).start()
        try:
            results = replay_fixtures(server.address, FIXTURES)
        finally:
            server.stop()
        bad = [r for r in results if not r.ok]
        assert len(results) == 50
        assert not bad, bad[:3]
        verdict(
            "Protocol self-conformance",
            "50 fixture requests round-tripped byte-exact against the loopback backend",
        )
