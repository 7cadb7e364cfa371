"""Tests for config loading, overrides, the resolved dump and the template."""

import pytest

from memorized_batchnorm.config import (
    apply_overrides,
    dump_resolved,
    flatten,
    load_config,
    parse_flat,
    unflatten,
    write_resolved,
)
from memorized_batchnorm.errors import ConfigError
from memorized_batchnorm.models import ForwardScheme, RunConfig
from memorized_batchnorm.norm import NormMode
from memorized_batchnorm.template import TEMPLATE_PATH, generate_config_template, write_config_template


class TestFlatFormat:
    """Test the flat ``key = value`` format."""

    def test_parse(self):
        values = parse_flat("# comment\nseed = 3\n\nnorm.mode=bn  # trailing\n")
        assert values == {"seed": "3", "norm.mode": "bn"}

    def test_last_value_wins(self):
        assert parse_flat("seed = 1\nseed = 2\n") == {"seed": "2"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="x.cfg:1"):
            parse_flat("seed 1\n", "x.cfg")

    def test_unflatten(self):
        assert unflatten({"a.b": 1, "a.c": 2, "d": 3}) == {"a": {"b": 1, "c": 2}, "d": 3}

    def test_section_clash(self):
        with pytest.raises(ConfigError):
            unflatten({"seed": "1", "seed.value": "2"})


class TestLoadConfig:
    """Test reading config files and applying overrides."""

    def test_defaults(self):
        config = load_config()
        assert config == RunConfig()
        assert config.method == "mbn-double"

    def test_flat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\nnorm.mode = brn\ntrain.lambda_schedule = 0:0.2,0.5:0.8\n", encoding="utf-8")
        config = load_config(path)
        assert config.seed == 7
        assert config.norm.mode is NormMode.BRN
        assert config.train.lambda_schedule == [(0.0, 0.2), (0.5, 0.8)]

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 2\ntrain:\n  forward_scheme: single\n  lr_drops: [0.5]\n", encoding="utf-8")
        config = load_config(path)
        assert config.train.forward_scheme is ForwardScheme.SINGLE
        assert config.train.lr_drops == [0.5]
        assert config.method == "mbn-single"

    def test_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\n", encoding="utf-8")
        config = load_config(path, ["seed=9", "train.batch_size = 32"])
        assert config.seed == 9
        assert config.train.batch_size == 32

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="norm.momentum"):
            load_config(overrides=["norm.momentum=0.5"])

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.batch_size"):
            load_config(overrides=["train.batch_size=zero"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.cfg")

    def test_apply_overrides(self):
        config = apply_overrides(RunConfig(), {"norm.mode": "movnorm", "tag": "k=5"})
        assert config.norm.mode is NormMode.MOVNORM
        assert config.method == "movnorm-double[k=5]"


class TestResolvedDump:
    """Test the sorted flat dump written next to run outputs."""

    def test_reloads_equal(self, tmp_path):
        config = load_config(
            overrides=["norm.mode=brn", "train.lambda_schedule=0:0,0.3:0.25", "model.channels=4,8,8", "tag=x"]
        )
        path = tmp_path / "config.resolved"
        write_resolved(config, path)
        assert load_config(path) == config

    def test_sorted_and_omits_unset(self):
        lines = dump_resolved(RunConfig()).splitlines()
        assert lines == sorted(lines)
        assert not any(line.startswith("data.train_images") for line in lines)
        assert "train.lambda_schedule = 0.0:0.1,0.4:0.5,0.6:0.9" in lines

    def test_flatten_text(self):
        flat = flatten(RunConfig())
        assert flat["norm.mode"] == "mbn"
        assert flat["train.drop_last"] == "false"
        assert flat["bench.batch_sizes"] == "8,16,32,64,128"


class TestTemplate:
    """Test the config template."""

    def test_template_matches_defaults(self):
        assert generate_config_template() == TEMPLATE_PATH.read_text(encoding="utf-8")
        assert load_config(TEMPLATE_PATH) == RunConfig()

    def test_overrides_replace_keys(self):
        text = generate_config_template({"norm.mode": "bn", "data.limit": "100"})
        values = parse_flat(text)
        assert values["norm.mode"] == "bn"
        assert values["data.limit"] == "100"

    def test_invalid_override(self):
        with pytest.raises(ConfigError):
            generate_config_template({"norm.mode": "groupnorm"})

    def test_write(self, tmp_path):
        out = tmp_path / "run.cfg"
        write_config_template(out, {"seed": "5"})
        assert load_config(out).seed == 5
