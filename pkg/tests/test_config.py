"""Experiment configuration: validation, overrides, stable hashing."""

import json

import pytest

from voice.config import ConfigError, ExperimentConfig, config_hash, load_config


def valid_values(tmp_path):
    weights = tmp_path / "w.bin"
    weights.write_bytes(b"x")
    return {
        "weights": str(weights),
        "data": "synthetic:50:1",
        "explainers": ["gradcam"],
        "sample_count": 5,
        "seeds": [0],
        "out": str(tmp_path / "run"),
    }


class TestValidation:
    def test_valid_config(self, tmp_path):
        cfg = load_config(overrides=valid_values(tmp_path))
        assert cfg.explainers == ["gradcam"]
        assert cfg.iou_t == 0.1

    def test_unknown_key(self, tmp_path):
        over = valid_values(tmp_path)
        over["explaners"] = ["gradcam"]
        with pytest.raises(ConfigError, match="unknown config keys"):
            load_config(overrides=over)

    def test_unknown_explainer(self, tmp_path):
        over = valid_values(tmp_path)
        over["explainers"] = ["shapley"]
        with pytest.raises(ConfigError, match="unknown explainer"):
            load_config(overrides=over)

    def test_pt_domain(self, tmp_path):
        over = valid_values(tmp_path)
        over["p_t"] = 1.5
        with pytest.raises(ConfigError, match="p_t"):
            load_config(overrides=over)

    def test_missing_weights_file(self, tmp_path):
        over = valid_values(tmp_path)
        over["weights"] = str(tmp_path / "missing.bin")
        with pytest.raises(ConfigError, match="weights file not found"):
            load_config(overrides=over)

    def test_empty_seeds(self, tmp_path):
        over = valid_values(tmp_path)
        over["seeds"] = []
        with pytest.raises(ConfigError, match="seeds"):
            load_config(overrides=over)

    def test_bad_challenge(self, tmp_path):
        over = valid_values(tmp_path)
        over["challenges"] = {"snow": [0, 1]}
        with pytest.raises(ConfigError, match="unknown challenge"):
            load_config(overrides=over)

    def test_unsorted_levels(self, tmp_path):
        over = valid_values(tmp_path)
        over["challenges"] = {"gaussian_blur": [3, 1]}
        with pytest.raises(ConfigError, match="sorted"):
            load_config(overrides=over)

    def test_config_file_not_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_config(p)

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            load_config(tmp_path / "none.json")


class TestOverrides:
    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        base = valid_values(tmp_path)
        base["p_t"] = 0.001
        p.write_text(json.dumps(base))
        cfg = load_config(p, overrides={"p_t": 0.05})
        assert cfg.p_t == 0.05

    def test_none_overrides_ignored(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(valid_values(tmp_path)))
        cfg = load_config(p, overrides={"p_t": None})
        assert cfg.p_t == ExperimentConfig().p_t


class TestHash:
    def test_stable_under_key_reordering(self, tmp_path):
        base = valid_values(tmp_path)
        a_items = list(base.items())
        (tmp_path / "a.json").write_text(json.dumps(dict(a_items)))
        (tmp_path / "b.json").write_text(json.dumps(dict(reversed(a_items))))
        ha = config_hash(load_config(tmp_path / "a.json"))
        hb = config_hash(load_config(tmp_path / "b.json"))
        assert ha == hb

    def test_semantic_keys_change_hash(self, tmp_path):
        base = valid_values(tmp_path)
        a = load_config(overrides=base)
        base2 = dict(base)
        base2["p_t"] = 0.25
        b = load_config(overrides=base2)
        assert config_hash(a) != config_hash(b)

    def test_output_location_not_in_hash(self, tmp_path):
        base = valid_values(tmp_path)
        a = load_config(overrides=base)
        base2 = dict(base)
        base2["out"] = str(tmp_path / "elsewhere")
        base2["workers"] = 4
        b = load_config(overrides=base2)
        assert config_hash(a) == config_hash(b)
