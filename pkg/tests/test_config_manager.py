import logging

import pytest

from config_manager import (ConfigError, ConfigManager, FusionConfig, coerce_value, config_keys,
                            configure_logging)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("tau = 0.5\nchannels = 8\niters = 20\n")
    return str(path)


class TestFusionConfig:

    def test_defaults(self):
        config = FusionConfig().validate()
        assert (config.tau, config.patch, config.k_max, config.channels) == (0.25, 8, 256, 16)
        assert (config.gamma, config.variant, config.kv_mode, config.gate_theta) == (1.0, "full", "all_patches", 0.5)
        assert config.token_dim == 16 * 8 * 8

    @pytest.mark.parametrize("overrides", [
        {"tau": 0.0}, {"tau": 1.5}, {"patch": 1}, {"k_max": 0}, {"channels": 0}, {"gamma": -1.0},
        {"variant": "fast"}, {"kv_mode": "local"}, {"gate_theta": 1.2}, {"lr": 0.0}, {"iters": 0},
        {"crop": 16}, {"batch": 0},
    ])
    def test_rejects_out_of_range(self, overrides):
        with pytest.raises(ConfigError):
            FusionConfig(**overrides).validate()

    def test_keys_in_declaration_order(self):
        keys = config_keys()
        assert keys[:3] == ["tau", "patch", "k_max"]
        assert set(keys) == set(FusionConfig().to_dict())


class TestCoerceValue:

    def test_types(self):
        assert coerce_value("channels", "8") == 8
        assert coerce_value("channels", "8.0") == 8
        assert coerce_value("tau", "0.5") == 0.5
        assert coerce_value("variant", " full_sb ") == "full_sb"

    @pytest.mark.parametrize("key, raw", [("channels", "8.5"), ("channels", "many"), ("tau", "high"),
                                          ("channels", True), ("shape", "3")])
    def test_rejects(self, key, raw):
        with pytest.raises(ConfigError):
            coerce_value(key, raw)


class TestConfigManager:

    def test_defaults_without_sources(self):
        manager = ConfigManager()
        assert manager.get_config() == FusionConfig()
        assert set(manager.sources.values()) == {"default"}

    def test_file_values(self, config_file):
        manager = ConfigManager(config_file)
        assert manager.config.tau == 0.5 and manager.config.channels == 8
        assert manager.sources["tau"] == "file"
        assert manager.sources["patch"] == "default"

    def test_environment_beats_file(self, config_file, monkeypatch):
        monkeypatch.setenv("FUSION_TAU", "0.75")
        manager = ConfigManager(config_file)
        assert manager.config.tau == 0.75
        assert manager.sources["tau"] == "env"
        assert manager.sources["channels"] == "file"

    def test_environment_ignored_when_disabled(self, monkeypatch):
        monkeypatch.setenv("FUSION_TAU", "0.75")
        assert ConfigManager(use_env=False).config.tau == 0.25

    def test_flags_beat_environment(self, config_file, monkeypatch):
        monkeypatch.setenv("FUSION_TAU", "0.75")
        manager = ConfigManager(config_file)
        config = manager.apply_overrides({"tau": "0.1", "seed": 9, "iters": None})
        assert (config.tau, config.seed, config.iters) == (0.1, 9, 20)
        assert manager.sources["tau"] == "flag"
        assert manager.sources["iters"] == "file"

    def test_invalid_environment_value(self, monkeypatch):
        monkeypatch.setenv("FUSION_CHANNELS", "wide")
        with pytest.raises(ConfigError):
            ConfigManager()

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError):
            ConfigManager().apply_overrides({"tau": 3})

    def test_describe_names_sources(self, config_file, monkeypatch):
        monkeypatch.setenv("FUSION_GAMMA", "0.5")
        manager = ConfigManager(config_file)
        manager.apply_overrides({"seed": 3})
        lines = manager.describe().splitlines()
        assert len(lines) == len(config_keys())
        by_key = {line.split("=")[0].strip(): line for line in lines}
        assert by_key["tau"].endswith("= 0.5  (file)")
        assert by_key["gamma"].endswith("= 0.5  (env)")
        assert by_key["seed"].endswith("= 3  (flag)")
        assert by_key["patch"].endswith("= 8  (default)")


class TestConfigureLogging:

    def test_writes_log_format(self, tmp_path):
        log_file = tmp_path / "run.log"
        configure_logging("DEBUG", str(log_file))
        logging.getLogger("Pipeline").info("hello fusion")
        for handler in logging.getLogger().handlers:
            handler.flush()
        text = log_file.read_text()
        assert " - Pipeline - INFO - hello fusion" in text

    def test_level_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FUSION_LOG_LEVEL", "warning")
        configure_logging(log_file=str(tmp_path / "run.log"))
        assert logging.getLogger().level == logging.WARNING
