"""Configuration document parsing and validation."""

import json

import pytest

from retscreen.backends import BackendDescriptor
from retscreen.config import (
    ConfigInvalidError,
    PipelineConfig,
    build_backend_set,
    config_from_dict,
    default_config,
    load_config,
)
from retscreen.stages import OperatingPoint

OP_DOC = {
    "threshold": 0.42,
    "policy": "target-sensitivity",
    "target": 0.95,
    "achieved_sensitivity": 0.96,
    "achieved_specificity": 0.88,
    "calibration_set_id": "cal-7",
}


class TestLoadConfig:
    def test_minimal_document(self, tmp_path):
        (tmp_path / "op.json").write_text(json.dumps(OP_DOC))
        (tmp_path / "cfg.json").write_text(json.dumps({"operating_point_path": "op.json"}))
        cfg = load_config(tmp_path / "cfg.json")
        assert cfg.operating_point.threshold == 0.42
        assert cfg.operating_point.calibration_set_id == "cal-7"
        assert cfg.working_resolution == 512
        assert cfg.eyes == ("left", "right")

    def test_missing_operating_point_file_names_path(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"operating_point_path": "gone.json"}))
        with pytest.raises(ConfigInvalidError, match="gone.json"):
            load_config(tmp_path / "cfg.json")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigInvalidError, match="nope.json"):
            load_config(tmp_path / "nope.json")

    def test_config_without_operating_point_rejected(self):
        with pytest.raises(ConfigInvalidError, match="operating_point"):
            config_from_dict({"working_resolution": 256})

    def test_inline_operating_point_and_overrides(self, tmp_path):
        doc = {
            "operating_point": OP_DOC,
            "working_resolution": 256,
            "eyes": ["left"],
            "quality_threshold": 0.6,
            "edd_thresholds": {"AMD": 0.4},
            "vlr": {"open_radius": 3, "overlay_alpha": 0.5},
        }
        (tmp_path / "cfg.json").write_text(json.dumps(doc))
        cfg = load_config(tmp_path / "cfg.json")
        assert cfg.eyes == ("left",)
        assert cfg.quality_threshold == 0.6
        assert cfg.edd_thresholds["AMD"] == 0.4
        assert cfg.edd_thresholds["DR"] == 0.5  # untouched labels keep the default
        assert cfg.vlr_open_radius == 3
        assert cfg.overlay_alpha == 0.5

    def test_external_backend_parses_endpoint(self):
        doc = {
            "operating_point": OP_DOC,
            "backends": {
                "segment": {"kind": "external", "model_id": "unet-v2", "endpoint": "10.0.0.5:9411"}
            },
        }
        cfg = config_from_dict(doc)
        desc = cfg.backend_descriptors["segment"]
        assert desc.kind == "external"
        assert desc.endpoint == ("10.0.0.5", 9411)
        # the other stages keep the in-process reference
        assert cfg.backend_descriptors["quality"].kind == "reference"

    def test_external_backend_requires_endpoint(self):
        doc = {
            "operating_point": OP_DOC,
            "backends": {"pvi": {"kind": "external", "model_id": "m"}},
        }
        with pytest.raises(ConfigInvalidError, match="endpoint"):
            config_from_dict(doc)

    def test_unknown_backend_task_rejected(self):
        doc = {"operating_point": OP_DOC, "backends": {"refraction": {"kind": "reference"}}}
        with pytest.raises(ConfigInvalidError, match="refraction"):
            config_from_dict(doc)

    def test_malformed_json_rejected(self, tmp_path):
        (tmp_path / "cfg.json").write_text("{not json")
        with pytest.raises(ConfigInvalidError):
            load_config(tmp_path / "cfg.json")


class TestValidation:
    def op(self):
        return OperatingPoint.from_json_dict(OP_DOC)

    def test_bad_eyes(self):
        with pytest.raises(ConfigInvalidError):
            PipelineConfig(operating_point=self.op(), eyes=("middle",))
        with pytest.raises(ConfigInvalidError):
            PipelineConfig(operating_point=self.op(), eyes=())
        with pytest.raises(ConfigInvalidError):
            PipelineConfig(operating_point=self.op(), eyes=("left", "left"))

    def test_bad_working_resolution(self):
        with pytest.raises(ConfigInvalidError):
            PipelineConfig(operating_point=self.op(), working_resolution=8)

    def test_capability_mismatch_rejected(self):
        descriptors = {
            task: BackendDescriptor(
                kind="reference", model_id="m", capabilities=frozenset({"classify-quality"})
            )
            for task in ("quality", "pvi", "edd", "segment")
        }
        with pytest.raises(ConfigInvalidError, match="capability"):
            PipelineConfig(operating_point=self.op(), backend_descriptors=descriptors)

    def test_shared_descriptor_shares_instance(self):
        cfg = default_config()
        backends = build_backend_set(cfg)
        assert backends["quality"] is backends["segment"]
