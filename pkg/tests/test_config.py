import math
from pathlib import Path

import pytest

from yasgd.config import RunConfig, config_from_dict, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = RunConfig()
    assert (cfg.eval_period, cfg.eval_offset, cfg.seed) == (4, 1, 100000)
    assert cfg.bn_momentum == 0.9 and cfg.bn_epsilon == 1e-5
    assert cfg.bucket_bytes == 4 * 2**20
    assert cfg.model_name == "resnet"
    assert RunConfig(world_size=4, batch_per_rank=32).global_batch == 128


@pytest.mark.parametrize("bad", [dict(eval_offset=4), dict(world_size=0), dict(microbatches=3, world_size=2),
                                 dict(transport="udp"), dict(scheduling="eager"), dict(bucket_bytes=0),
                                 dict(layer_dims=(4,)), dict(label_smoothing=1.0), dict(decay="cosine")])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_from_dict():
    cfg = config_from_dict({"bucket_bytes": "inf", "layer_dims": [4, 3], "world_size": 2})
    assert cfg.bucket_bytes == math.inf and cfg.layer_dims == (4, 3)
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"wrold_size": 2})
    assert config_from_dict(cfg.to_dict()) == cfg
    assert cfg.with_overrides(seed=None, epochs=3).epochs == 3


@pytest.mark.parametrize("name", ["small_batch", "large_batch_lars", "large_batch_plain", "quick"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.toml")
    assert cfg.n_train >= 1
