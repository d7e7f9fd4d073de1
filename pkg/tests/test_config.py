"""Run-configuration serialization: round trips, strict keys, coercions."""

import json

import pytest

from ptmrec.config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from ptmrec.errors import ConfigError


class TestRoundTrip:
    def test_default_round_trips(self):
        config = RunConfig()
        assert config_from_dict(config_to_dict(config)) == config

    def test_json_file_round_trips(self, tmp_path):
        config = RunConfig(seed=7, mode="ptmrec_no_kt", strategy="lora")
        path = tmp_path / "run.json"
        save_config(config, path)
        assert load_config(path) == config

    def test_lists_become_tuples(self):
        config = config_from_dict({
            "seeds": [3, 4],
            "split_ratios": [0.7, 0.2, 0.1],
            "train": {"betas": [0.9, 0.99], "eval_ks": [5, 15]},
        })
        assert config.seeds == (3, 4)
        assert config.split_ratios == (0.7, 0.2, 0.1)
        assert config.train.betas == (0.9, 0.99)
        assert config.train.eval_ks == (5, 15)

    def test_nested_sections_built(self):
        config = config_from_dict({
            "synth": {"num_users": 10, "num_items": 12, "num_clusters": 1,
                      "interactions_per_user": 4},
            "encoder": {"layers": 2, "d_model": 16, "n_heads": 2, "d_proj": 8},
        })
        assert config.synth.num_users == 10
        assert config.encoder.layers == 2


class TestRejection:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            config_from_dict({"bogus": 1})

    def test_unknown_nested_key_names_the_section(self):
        with pytest.raises(ConfigError, match="train"):
            config_from_dict({"train": {"learning_rate": 0.1}})

    def test_bad_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            config_from_dict({"mode": "clip_finetune"})

    def test_bad_strategy(self):
        with pytest.raises(ConfigError, match="strategy"):
            config_from_dict({"strategy": "bitfit"})

    def test_split_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="split_ratios"):
            config_from_dict({"split_ratios": [0.5, 0.2, 0.2]})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="train"):
            config_from_dict({"train": 5})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(path)

    def test_invalid_field_value_wrapped(self):
        with pytest.raises(ConfigError):
            config_from_dict({"train": {"accum_steps": 0}})
