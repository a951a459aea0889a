"""
Tests for run config loading and validation.
"""

import pytest
import yaml

from ennam_clipsim.config import (
    RunConfig,
    load_run_config,
    parse_eps,
    resolve_run_config,
)
from ennam_clipsim.exceptions import ConfigError
from ennam_clipsim.objective import CLIP_HIGH_OFF, CLIP_LOW_OFF


class TestResolveRunConfig:
    """Tests for resolve_run_config defaults."""

    def test_defaults(self):
        """An empty config resolves to the built-in defaults."""
        config = resolve_run_config({}, use_settings=False)
        assert isinstance(config, RunConfig)
        assert (config.tree.vocab_size, config.tree.horizon, config.tree.prompt_count) == (6, 3, 4)
        assert config.updater == "pg"
        assert config.idealized
        assert config.eta == 100.0
        assert config.refresh_period == 1
        assert config.snapshot_samples == 1024
        assert config.clip.eps_low == 0.2 and config.clip.eps_high == 0.2
        assert config.seed == 0

    def test_npg_eta_default(self):
        config = resolve_run_config({"updater": "npg"}, use_settings=False)
        assert config.eta == 8.0
        assert config.refresh_period == 1

    def test_grpo_refresh_follows_inner_updates(self):
        """For grpo-sgd the refresh period is the number of inner updates."""
        config = resolve_run_config(
            {"updater": "grpo-sgd", "optimizer": {"inner_updates": 4}}, use_settings=False
        )
        assert not config.idealized
        assert config.refresh_period == 4
        assert config.eta is None

    def test_grpo_refresh_mismatch(self):
        with pytest.raises(ConfigError, match="refresh_period"):
            resolve_run_config(
                {"updater": "grpo-sgd", "refresh_period": 3, "optimizer": {"inner_updates": 4}},
                use_settings=False,
            )

    def test_seed_override(self):
        config = resolve_run_config({"seed": 3}, seed=11, use_settings=False)
        assert config.seed == 11

    def test_partial_section_merge(self):
        """A partial section keeps the defaults of its other keys."""
        config = resolve_run_config({"tree": {"vocab_size": 4}}, use_settings=False)
        assert (config.tree.vocab_size, config.tree.horizon) == (4, 3)

    def test_settings_run_defaults(self, mock_clipsim_settings):
        """RUN_DEFAULTS from settings are merged under the file."""
        config = resolve_run_config({"tree": {"horizon": 3}})
        assert config.tree.vocab_size == 3
        assert config.tree.horizon == 3
        assert config.tree.prompt_count == 2
        assert config.steps == 16
        assert config.evaluation.interval == 8
        assert config.evaluation.k == 8


class TestClipParsing:
    """Tests for the clip thresholds."""

    @pytest.mark.parametrize("value", ["off", "OFF", " off ", False])
    def test_off(self, value):
        assert parse_eps(value, CLIP_HIGH_OFF, "clip.eps_high") == CLIP_HIGH_OFF

    def test_numbers(self):
        assert parse_eps(0.28, CLIP_HIGH_OFF, "clip.eps_high") == 0.28
        assert parse_eps("0.1", CLIP_LOW_OFF, "clip.eps_low") == 0.1

    def test_invalid(self):
        with pytest.raises(ConfigError):
            parse_eps("wide", CLIP_HIGH_OFF, "clip.eps_high")
        with pytest.raises(ConfigError):
            parse_eps(None, CLIP_HIGH_OFF, "clip.eps_high")

    def test_yaml_off(self):
        """Unquoted off in a YAML file disables the threshold."""
        raw = yaml.safe_load("clip:\n  eps_low: 0.2\n  eps_high: off\n")
        config = resolve_run_config(raw, use_settings=False)
        assert config.clip.high_off
        assert not config.clip.low_off
        assert config.to_dict()["clip"]["eps_high"] == "off"


class TestValidation:
    """Tests for rejected configs."""

    @pytest.mark.parametrize(
        "raw",
        [
            {"colour": 1},
            {"tree": {"depth": 2}},
            {"optimizer": {"lr": 0.1}},
        ],
    )
    def test_unknown_keys(self, raw):
        with pytest.raises(ConfigError, match="Unknown config key"):
            resolve_run_config(raw, use_settings=False)

    @pytest.mark.parametrize(
        "raw",
        [
            {"tree": {"vocab_size": 0}},
            {"tree": {"horizon": 2.5}},
            {"tree": 3},
            {"updater": "sgd"},
            {"reward": {"kind": "human"}},
            {"reward": {"p": 1.5}},
            {"reward": {"kind": "verifiable", "target_count": 1000}},
            {"advantage": {"nu": 0.7}},
            {"optimizer": {"group_size": 1}},
            {"steps": True},
            {"eta": -1.0},
            {"snapshot_samples": 0},
            {"evaluation": {"k": 4, "samples": 2}},
            {"evaluation": {"temperature": 0.0}},
            {"clip": {"eps_low": 1.5}},
        ],
    )
    def test_invalid_values(self, raw):
        with pytest.raises(ConfigError):
            resolve_run_config(raw, use_settings=False)

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError):
            resolve_run_config(["tree"], use_settings=False)


class TestLoadRunConfig:
    """Tests for load_run_config."""

    def test_load(self, write_config):
        path = write_config({"updater": "npg", "clip": {"eps_high": 0.28}, "seed": 4})
        config = load_run_config(path)
        assert config.updater == "npg"
        assert config.clip.eps_high == 0.28
        assert config.seed == 4

    def test_seed_override(self, write_config):
        assert load_run_config(write_config({"seed": 4}), seed=9).seed == 9

    def test_missing_file(self, temp_output_dir):
        with pytest.raises(ConfigError, match="Cannot read"):
            load_run_config(f"{temp_output_dir}/missing.yaml")

    def test_bad_yaml(self, temp_output_dir):
        path = f"{temp_output_dir}/bad.yaml"
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("tree: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_run_config(path)

    def test_resolved_round_trip(self, write_config):
        """The resolved YAML loads back to the same config."""
        config = load_run_config(write_config({"updater": "grpo-sgd", "clip": {"eps_low": "off"}}))
        again = load_run_config(write_config(yaml.safe_load(config.to_yaml()), "again.yaml"))
        assert again == config

    def test_replace(self):
        config = resolve_run_config({}, use_settings=False)
        wider = config.replace(clip={"eps_low": 0.2, "eps_high": 0.28})
        assert wider.clip.eps_high == 0.28
        assert wider.tree == config.tree
