import json

import pytest

from gfocc.config import RunConfig, load_config, save_config, toy_config
from gfocc.refinement import ConfigError


class TestRunConfig:
    def test_empty_document_gives_defaults(self):
        cfg = RunConfig.from_dict({})
        assert cfg.pipeline.blocks == 4 and cfg.pipeline.gaussian_count == 6400
        assert cfg.pipeline.width == 128
        assert cfg.optim.lr == 2e-4 and cfg.optim.weight_decay == 0.01
        assert cfg.splat.cutoff_sigma == 4.0

    @pytest.mark.parametrize("doc, field", [
        ({"pipline": {}}, "pipline"),
        ({"pipeline": {"block": 2}}, "pipeline.block"),
        ({"optim": {"lr": 1e-3, "momentum": 0.9}}, "optim.momentum"),
    ])
    def test_unknown_keys_rejected(self, doc, field):
        with pytest.raises(ConfigError, match=field):
            RunConfig.from_dict(doc)

    @pytest.mark.parametrize("doc", [
        {"pipeline": {"modalities": []}},
        {"pipeline": {"blocks": 0}},
        {"optim": {"lr": -1}},
        {"eval": {"miou_mode": "macro"}},
        {"fit": {"init": "grid"}},
        {"pipeline": "four blocks"},
    ])
    def test_invalid_values_rejected(self, doc):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)

    def test_file_round_trip(self, tmp_path):
        cfg = toy_config()
        save_config(tmp_path / "a.json", cfg)
        back = load_config(tmp_path / "a.json")
        assert back.to_dict() == cfg.to_dict()
        save_config(tmp_path / "b.json", back)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_overrides(self):
        cfg = RunConfig().with_overrides(pipeline={"blocks": 2}, optim={"steps": 7})
        assert cfg.pipeline.blocks == 2 and cfg.optim.steps == 7
        assert cfg.pipeline.width == 128
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(pipeline={"blocks": 0})

    def test_toy_preset(self):
        cfg = toy_config()
        assert (cfg.pipeline.blocks, cfg.pipeline.gaussian_count) == (2, 256)
        assert cfg.pipeline.modalities == ("camera", "lidar_bev")
        json.dumps(cfg.to_dict())
