import json
from pathlib import Path

import pytest

from metasampler.config import RunConfig, load_config, parse_config, resolve_steps, save_config
from metasampler.errors import ConfigurationError
from metasampler.metatrain import ESConfig
from metasampler.targets import MixtureTaskDistribution
from metasampler.tasks import TaskDistribution

TOML = """
seed = 3

[model]
channels = 4
depth = 1

[model.dataset]
kind = "blobs"
n = 60

[sampler]
kind = "sghmc"
momentum_decay = 0.05
burnin_epochs = 2
thin_epochs = 0.5
num_samples = 4
"""


class TestParse:
    def test_toml(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(TOML)
        cfg = load_config(p)
        assert cfg.seed == 3 and cfg.model.channels == 4 and cfg.sampler.num_samples == 4

    def test_seed_override(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(TOML)
        assert load_config(p, seed=9).seed == 9

    def test_seed_mandatory(self):
        with pytest.raises(ConfigurationError, match="seed"):
            parse_config({})

    @pytest.mark.parametrize("data", [
        {"seed": 0, "bogus": 1},
        {"seed": 0, "sampler": {"step": 0.1}},
        {"seed": 0, "meta_train": {"sigmaa": 0.1}},
    ])
    def test_unknown_keys(self, data):
        with pytest.raises(ConfigurationError):
            parse_config(data)

    @pytest.mark.parametrize("data", [
        {"seed": 0, "sampler": {"step_size": -1}},
        {"seed": 0, "sampler": {"kind": "nuts"}},
        {"seed": 0, "sampler": {"friction": 1.0, "momentum_decay": 0.1}},
        {"seed": 0, "version": 2},
    ])
    def test_invalid_values(self, data):
        with pytest.raises(ConfigurationError):
            parse_config(data)

    def test_unparsable(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text("seed = = 1")
        with pytest.raises(ConfigurationError):
            load_config(p)
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.toml")

    def test_json_roundtrip(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(TOML)
        cfg = load_config(p)
        save_config(tmp_path / "c.json", cfg)
        back = load_config(tmp_path / "c.json")
        assert back == cfg and back.digest() == cfg.digest()

    def test_digest_changes(self):
        assert parse_config({"seed": 0}).digest() != parse_config({"seed": 1}).digest()


class TestSteps:
    def test_epochs(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(TOML)
        cfg = load_config(p)
        # floor(42 / 32) = 1 step per epoch; total = burnin + K * thin = 2 + 4 * 1
        assert resolve_steps(cfg.sampler, 42, 32) == (6, 2, 1)
        # 320 / 32 = 10 steps per epoch: 20 + 4 * 5
        assert resolve_steps(cfg.sampler, 320, 32) == (40, 20, 5)

    def test_explicit_steps(self):
        s = parse_config({"seed": 0, "sampler": {"total_steps": 100, "burnin": 50, "thin": 5,
                                                  "num_samples": 10}}).sampler
        assert resolve_steps(s, 100, 10) == (100, 50, 5)

    def test_total_epochs(self):
        s = parse_config({"seed": 0, "sampler": {"total_epochs": 3, "burnin_epochs": 1, "thin_epochs": 0.5,
                                                  "num_samples": 4}}).sampler
        # 10 steps per epoch
        assert resolve_steps(s, 100, 10) == (30, 10, 5)
        with pytest.raises(ConfigurationError):
            parse_config({"seed": 0, "sampler": {"total_steps": 3, "total_epochs": 3}})

    def test_budget_too_small(self):
        s = parse_config({"seed": 0, "sampler": {"total_steps": 10, "burnin": 5, "thin": 5,
                                                  "num_samples": 3}}).sampler
        with pytest.raises(ConfigurationError):
            resolve_steps(s, 100, 10)


class TestSections:
    def test_es_config(self):
        cfg = parse_config({"seed": 0, "meta_train": {"sigma": 0.05, "inner_steps": 300, "thin": 10}})
        es = cfg.meta_train.es_config()
        assert isinstance(es, ESConfig) and es.sigma == 0.05 and es.burnin_steps == 200

    def test_task_families(self):
        cfg = parse_config({"seed": 0})
        assert isinstance(cfg.meta_train.task_distribution(0), TaskDistribution)
        cfg = parse_config({"seed": 0, "meta_train": {"task_family": "mixture"}})
        assert isinstance(cfg.meta_train.task_distribution(0), MixtureTaskDistribution)

    def test_frozen(self):
        cfg = parse_config({"seed": 0})
        with pytest.raises(Exception):
            cfg.seed = 4

    def test_canonical_json_sorted(self):
        cfg = RunConfig(seed=1)
        assert list(json.loads(cfg.canonical_json())) == sorted(json.loads(cfg.canonical_json()))


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestShippedProfiles:
    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.toml")), ids=lambda p: p.name)
    def test_parses_and_resolves(self, path):
        cfg = load_config(path)
        total, burnin, thin = resolve_steps(cfg.sampler, 42000, cfg.model.batch_size)
        assert total >= burnin and thin >= 1
        cfg.meta_train.es_config()
