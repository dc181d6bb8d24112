import json

import pytest

from premixer.config import RunConfig
from premixer.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.T, cfg.horizon, cfg.L, cfg.T_long) == (12, 12, 12, 672)
    assert (cfg.D, cfg.d_model, cfg.d_pe, cfg.d_emb, cfg.d_ctx) == (96, 32, 16, 32, 64)
    assert cfg.optim.lr == 0.005 and cfg.optim.batch == 32
    assert cfg.mask_ratio == 0.5 and cfg.aggregation == "mean"


def test_file_round_trip(tmp_path):
    cfg = RunConfig(seed=4).replace(**{"optim.lr": 0.01, "ablation.no_cl": True})
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    back.save(tmp_path / "d.json")
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


@pytest.mark.parametrize("over", [{"T_long": 100}, {"T": 6}, {"d_pe": 10}, {"mask_ratio": 1.0},
                                  {"spatial_mode": "graph"}, {"aggregation": "max"},
                                  {"split": [1, 1]}, {"dropout": 1.0}])
def test_invalid(over):
    with pytest.raises(ConfigError):
        RunConfig().replace(**over)


def test_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"optim.momentum": 0.9})


def test_bad_json(tmp_path):
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "x.json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")


def test_none_overrides_skipped():
    assert RunConfig().replace(seed=None).seed == 0


def test_resolved_snapshot_is_json():
    assert json.loads(RunConfig().to_json())["optim"]["patience"] == 10
