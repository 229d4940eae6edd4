import pytest

from models.config import RunConfig
from utils.config import config_hash, load_run_config, parse_assignment, write_resolved
from utils.errors import ConfigError, UsageError


class TestLoadRunConfig:
    """Layered configuration resolution"""

    def test_defaults(self):
        config = load_run_config()
        assert config == RunConfig()
        assert config.vocoder.upsample_strides == [8, 10]

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=3\nworld.num_families=3\ns2mu.steps=10\n")
        config = load_run_config(path, ["s2mu.steps=20"], seed=7, out=tmp_path / "runs")
        assert config.seed == 7
        assert config.world.num_families == 3
        assert config.s2mu.steps == 20
        assert config.out == str(tmp_path / "runs")

    def test_lists_and_maps(self):
        config = load_run_config(overrides=[
            "experiment.seeds=4,5", "corpus.direction_scale=en-rom1:0.1", "vocoder.upsample_strides=5,16",
        ])
        assert config.experiment.seeds == [4, 5]
        assert config.corpus.direction_scale == {"en-rom1": 0.1}
        assert config.vocoder.upsample_strides == [5, 16]

    def test_empty_value_means_default(self):
        assert load_run_config(overrides=["s2mu.model_dim="]).s2mu.model_dim is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="Unknown configuration key 'colour.shade'"):
            load_run_config(overrides=["colour.shade=blue"])
        with pytest.raises(ConfigError, match="Invalid configuration"):
            load_run_config(overrides=["kmeans.bogus=1"])

    def test_invalid_values(self):
        with pytest.raises(ConfigError, match="Invalid configuration"):
            load_run_config(overrides=["world.sample_rate=4000"])
        with pytest.raises(ConfigError, match="min_length"):
            load_run_config(overrides=["corpus.min_length=9", "corpus.max_length=4"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError, match="Config file not found"):
            load_run_config(tmp_path / "absent.cfg")

    def test_malformed_assignment(self):
        with pytest.raises(UsageError, match="section.key=value"):
            parse_assignment("world.seed")


def test_resolved_config_reloads_identically(tmp_path):
    config = load_run_config(overrides=["corpus.direction_scale=en-gem1:0.5", "eval.max_examples=3"], seed=2)
    path = write_resolved(config, tmp_path)
    again = load_run_config(path)
    assert again == config
    assert config_hash(again) == config_hash(config)
