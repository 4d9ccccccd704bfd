"""Harness: corpus generator determinism, HTTP service contract, CLI, bench."""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
import requests

from retscreen.config import default_config
from retscreen.harness.bench import bench_run
from retscreen.harness.cli import main
from retscreen.harness.service import ConsoleService
from retscreen.harness.synth import SynthSpec, load_truth, synth_generate
from retscreen.imaging import encode_png
from retscreen.pipeline import ScreeningEngine, SessionStore

from conftest import TEST_SIZE, render_one


def _dirs_identical(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    (_, mismatch, errors) = filecmp.cmpfiles(
        a, b, cmp.common_files, shallow=False
    )
    if mismatch or errors:
        return False
    return all(_dirs_identical(a / d, b / d) for d in cmp.common_dirs)


class TestSynth:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = SynthSpec(count=5, seed=11, size=128)
        a = synth_generate(spec, tmp_path / "a")
        b = synth_generate(spec, tmp_path / "b")
        assert _dirs_identical(a, b)

    def test_different_seed_differs(self, tmp_path):
        a = synth_generate(SynthSpec(count=3, seed=1, size=128), tmp_path / "a")
        b = synth_generate(SynthSpec(count=3, seed=2, size=128), tmp_path / "b")
        assert not _dirs_identical(a, b)

    def test_exact_role_counts(self, tiny_corpus):
        corpus, spec = tiny_corpus
        rows = load_truth(corpus)
        assert len(rows) == spec.count
        assert sum(r.pvi for r in rows) == round(spec.prevalence * spec.count)
        assert sum(not r.gradable for r in rows) == round(spec.fraction_ungradable * spec.count)

    def test_positive_rows_have_masks(self, tiny_corpus):
        corpus, _ = tiny_corpus
        for row in load_truth(corpus):
            if row.pvi:
                assert row.mask_file
                assert (corpus / "masks" / row.mask_file).is_file()
                assert row.labels
            else:
                assert row.mask_file == ""

    def test_ungradable_never_positive(self, tiny_corpus):
        corpus, _ = tiny_corpus
        for row in load_truth(corpus):
            if not row.gradable:
                assert not row.pvi

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(count=0)
        with pytest.raises(ValueError):
            SynthSpec(count=10, prevalence=1.5)
        with pytest.raises(ValueError):
            SynthSpec(count=10, prevalence=0.8, fraction_ungradable=0.5)


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    cfg = default_config(working_resolution=TEST_SIZE, eyes=("left",))
    store = SessionStore(tmp_path_factory.mktemp("svc-store"))
    svc = ConsoleService(cfg, store, port=0)
    with svc:
        host, port = svc.address
        yield svc, f"http://{host}:{port}"


@pytest.fixture(scope="module")
def gradable_png():
    return encode_png(render_one("negative", seed=909, salt_fraction=0.0).image)


@pytest.fixture(scope="module")
def positive_png():
    return encode_png(render_one("positive", seed=808).image)


@pytest.fixture(scope="module")
def ungradable_png():
    return encode_png(render_one("ungradable-blur", seed=707).image)


class TestService:
    def _new_session(self, base):
        r = requests.post(f"{base}/sessions", json={"patient_ref": "p-1"})
        assert r.status_code == 201
        return r.json()["session_id"]

    def test_healthz(self, service):
        _, base = service
        r = requests.get(f"{base}/healthz")
        assert r.status_code == 200
        assert r.json() == {"status": "ok"}

    def test_create_session(self, service):
        _, base = service
        r = requests.post(f"{base}/sessions", json={"patient_ref": "p-2"})
        assert r.status_code == 201
        body = r.json()
        assert body["eyes"] == ["left"]
        assert body["session_id"]

    def test_report_409_before_completion(self, service):
        _, base = service
        sid = self._new_session(base)
        r = requests.get(f"{base}/sessions/{sid}/report")
        assert r.status_code == 409
        assert r.json()["error"]["code"] == "report-not-ready"

    def test_ungradable_upload_prompts_recapture(self, service, ungradable_png):
        _, base = service
        sid = self._new_session(base)
        r = requests.post(
            f"{base}/sessions/{sid}/captures?eye=left",
            data=ungradable_png,
            headers={"Content-Type": "image/png"},
        )
        assert r.status_code == 200
        body = r.json()
        assert body["action"] == "prompt-recapture"
        assert body["verdict"]["gradable"] is False
        assert body["verdict"]["reasons"]  # verbatim reasons for the console banner

    def test_full_positive_flow(self, service, positive_png):
        svc, base = service
        sid = self._new_session(base)
        r = requests.post(f"{base}/sessions/{sid}/captures?eye=left", data=positive_png)
        assert r.status_code == 200
        assert r.json()["action"] == "ready-to-screen"

        r = requests.post(f"{base}/sessions/{sid}/screen")
        assert r.status_code == 200
        report = r.json()
        assert report["referral_recommended"] is True
        overlay = report["eyes"]["left"]["lesions"]["overlay_asset"]

        r = requests.get(f"{base}/sessions/{sid}/report")
        assert r.status_code == 200
        assert r.json() == report

        r = requests.get(f"{base}/sessions/{sid}/assets/{overlay}")
        assert r.status_code == 200
        assert r.headers["Content-Type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

        r = requests.post(f"{base}/sessions/{sid}/referral", json={"destination": "eye-hospital"})
        assert r.status_code == 201
        assert r.json()["reason"] == "pvi-positive"

        r = requests.post(f"{base}/sessions/{sid}/referral", json={"destination": "eye-hospital"})
        assert r.status_code == 409
        assert r.json()["error"]["code"] == "already-referred"

    def test_negative_flow_referral_rejected(self, service, gradable_png):
        _, base = service
        sid = self._new_session(base)
        requests.post(f"{base}/sessions/{sid}/captures?eye=left", data=gradable_png)
        r = requests.post(f"{base}/sessions/{sid}/screen")
        assert r.status_code == 200
        assert r.json()["referral_recommended"] is False
        r = requests.post(f"{base}/sessions/{sid}/referral", json={"destination": "x"})
        assert r.status_code == 409
        assert r.json()["error"]["code"] == "not-eligible"

    def test_bad_eye_rejected(self, service, gradable_png):
        _, base = service
        sid = self._new_session(base)
        r = requests.post(f"{base}/sessions/{sid}/captures?eye=middle", data=gradable_png)
        assert r.status_code == 400

    def test_undecodable_body(self, service):
        _, base = service
        sid = self._new_session(base)
        r = requests.post(f"{base}/sessions/{sid}/captures?eye=left", data=b"not a png")
        assert r.status_code == 400
        assert r.json()["error"]["code"] == "decode-error"

    def test_unknown_session_404(self, service):
        _, base = service
        r = requests.get(f"{base}/sessions/nope/report")
        assert r.status_code == 404

    def test_screen_before_capture_409(self, service):
        _, base = service
        sid = self._new_session(base)
        r = requests.post(f"{base}/sessions/{sid}/screen")
        assert r.status_code == 409

    def test_http_equals_direct_execution(self, service, positive_png, tmp_path):
        """Dual execution: the HTTP wrapper adds nothing to the engine's answer."""
        svc, base = service
        sid = self._new_session(base)
        requests.post(f"{base}/sessions/{sid}/captures?eye=left", data=positive_png)
        via_http = requests.post(f"{base}/sessions/{sid}/screen").json()

        engine = ScreeningEngine(
            default_config(working_resolution=TEST_SIZE, eyes=("left",)),
            SessionStore(tmp_path / "direct"),
        )
        session = engine.create_session("p-direct")
        engine.submit_capture(session, "left", positive_png)
        direct = engine.run_screening(session)

        volatile = {"session_id", "patient_ref", "generated_at", "timings_ms", "elapsed_ms"}

        def scrub(doc):
            if isinstance(doc, dict):
                return {k: scrub(v) for k, v in doc.items() if k not in volatile}
            if isinstance(doc, list):
                return [scrub(v) for v in doc]
            return doc

        assert scrub(via_http) == scrub(direct)


class TestBench:
    def test_bench_smoke(self, tiny_corpus):
        corpus, spec = tiny_corpus
        cfg = default_config(working_resolution=TEST_SIZE)
        result = bench_run(corpus, cfg, min_corpus=spec.count)
        assert result.image_count == spec.count
        assert result.images_per_second > 0
        assert result.peak_rss_bytes > 0
        for pcts in result.per_stage_ms.values():
            assert pcts["p50"] <= pcts["p95"]

    def test_bench_requires_minimum_corpus(self, tiny_corpus):
        corpus, _ = tiny_corpus
        with pytest.raises(ValueError):
            bench_run(corpus, default_config(), min_corpus=50)

    def test_repeated_runs_stable_within_30_percent(self, tiny_corpus):
        corpus, spec = tiny_corpus
        cfg = default_config(working_resolution=TEST_SIZE)
        bench_run(corpus, cfg, min_corpus=spec.count)  # warm caches
        a = bench_run(corpus, cfg, min_corpus=spec.count).images_per_second
        b = bench_run(corpus, cfg, min_corpus=spec.count).images_per_second
        assert max(a, b) / min(a, b) <= 1.3


class TestConcurrentSessions:
    def test_parallel_sessions_stay_isolated(self, service, positive_png, gradable_png):
        """Distinct sessions are fully parallel; each log and report stays its own."""
        import concurrent.futures

        svc, base = service

        def one_flow(i):
            positive = i % 2 == 0
            png = positive_png if positive else gradable_png
            sid = requests.post(f"{base}/sessions", json={"patient_ref": f"c{i}"}).json()["session_id"]
            r = requests.post(f"{base}/sessions/{sid}/captures?eye=left", data=png)
            assert r.json()["action"] == "ready-to-screen"
            report = requests.post(f"{base}/sessions/{sid}/screen").json()
            assert report["session_id"] == sid
            assert report["referral_recommended"] is positive
            return sid, report

        with concurrent.futures.ThreadPoolExecutor(max_workers=6) as pool:
            results = list(pool.map(one_flow, range(12)))

        assert len({sid for sid, _ in results}) == 12
        for sid, report in results:
            replayed = svc.engine.replay(sid)
            assert replayed.report == report


class TestCli:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--bogus"])
        assert exc.value.code == 2

    def test_synth_and_screen_roundtrip(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "c"), "--count", "4",
                     "--seed", "3", "--size", str(TEST_SIZE)]) == 0

        op_doc = {
            "threshold": 0.5, "policy": "youden", "target": None,
            "achieved_sensitivity": 1.0, "achieved_specificity": 1.0,
            "calibration_set_id": "cli-test",
        }
        (tmp_path / "op.json").write_text(json.dumps(op_doc))
        cfg_doc = {"operating_point_path": "op.json", "working_resolution": TEST_SIZE}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg_doc))

        code = main([
            "screen", "--in", str(tmp_path / "c"), "--config", str(tmp_path / "cfg.json"),
            "--store", str(tmp_path / "store"), "--summary", str(tmp_path / "summary.csv"),
            "--no-fsync",
        ])
        assert code == 0
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert len(summary) == 5  # header + 4 rows
        reports = list((tmp_path / "store").glob("*/report.json"))
        assert len(reports) == 4

    def test_calibrate_frozen_example(self, tmp_path, capsys):
        csv_path = tmp_path / "scores.csv"
        csv_path.write_text(
            "score,label\n0.9,1\n0.8,1\n0.4,1\n0.6,0\n0.3,0\n0.1,0\n"
        )
        assert main(["calibrate", str(csv_path), "--policy", "target-sensitivity",
                     "--target", "0.66"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["threshold"] == 0.8
        assert doc["achieved_specificity"] == 1.0

    def test_calibrate_bad_csv_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert main(["calibrate", str(bad), "--policy", "youden"]) == 1

    def test_screen_without_config_exits_2(self, tmp_path):
        assert main(["screen", "--in", str(tmp_path)]) == 2

    def test_replay_cli(self, tmp_path, capsys):
        synth_generate(SynthSpec(count=1, seed=5, size=TEST_SIZE), tmp_path / "c")
        op = tmp_path / "op.json"
        op.write_text(json.dumps({
            "threshold": 0.5, "policy": "youden", "target": None,
            "achieved_sensitivity": 1.0, "achieved_specificity": 1.0,
            "calibration_set_id": "t",
        }))
        main(["screen", "--in", str(tmp_path / "c"), "--operating-point", str(op),
              "--store", str(tmp_path / "store"), "--no-fsync"])
        capsys.readouterr()
        store = SessionStore(tmp_path / "store")
        sid = store.list_sessions()[0]
        assert main(["replay", "--store", str(tmp_path / "store"), sid]) == 0
        out = capsys.readouterr().out
        assert sid in out
        assert "state" in out
