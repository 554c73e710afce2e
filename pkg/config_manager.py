# config_manager.py
# Handles fusion configuration, environment overrides and logging setup

import os
import logging
from dataclasses import dataclass, asdict, fields, replace
from typing import Any, Dict, Optional

from dotenv import load_dotenv

logger = logging.getLogger("ConfigManager")

VARIANTS = ("full", "full_db", "full_sb", "inverted_mask", "dense_attention", "no_mafm")
KV_MODES = ("all_patches", "global_token_only")
ENV_PREFIX = "FUSION_"


class ConfigError(ValueError):
    """Invalid configuration key or value, optionally tied to a file line"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class FusionConfig:
    """
    Hyper-parameters of the fusion network and its desk-scale training run
    """
    tau: float = 0.25
    patch: int = 8
    k_max: int = 256
    channels: int = 16
    gamma: float = 1.0
    variant: str = "full"
    kv_mode: str = "all_patches"
    gate_theta: float = 0.5
    seed: int = 0
    lr: float = 1e-4
    iters: int = 300
    crop: int = 64
    batch: int = 4

    def validate(self) -> "FusionConfig":
        """Check ranges; returns self so calls can be chained"""
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.patch < 2:
            raise ConfigError(f"patch must be >= 2, got {self.patch}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}', expected one of {', '.join(VARIANTS)}")
        if self.kv_mode not in KV_MODES:
            raise ConfigError(f"unknown kv_mode '{self.kv_mode}', expected one of {', '.join(KV_MODES)}")
        if not 0.0 <= self.gate_theta <= 1.0:
            raise ConfigError(f"gate_theta must lie in [0, 1], got {self.gate_theta}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.crop < 4 * self.patch:
            raise ConfigError(f"crop must be >= 4*patch ({4 * self.patch}), got {self.crop}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        return self

    @property
    def token_dim(self) -> int:
        """Length of a flattened patch token, C*p*p"""
        return self.channels * self.patch * self.patch

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def config_keys():
    """Ordered list of recognised config keys"""
    return [f.name for f in fields(FusionConfig)]


def coerce_value(key: str, raw: Any) -> Any:
    """Convert a raw string (or value) to the type of the FusionConfig field"""
    field_types = {f.name: f.type for f in fields(FusionConfig)}
    if key not in field_types:
        raise ConfigError(f"unknown key '{key}'")
    kind = field_types[key]
    if kind in (int, "int"):
        if isinstance(raw, bool):
            raise ConfigError(f"key '{key}' expects an integer, got {raw!r}")
        try:
            as_float = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}' expects an integer, got {raw!r}")
        if not as_float.is_integer():
            raise ConfigError(f"key '{key}' expects an integer, got {raw!r}")
        return int(as_float)
    if kind in (float, "float"):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}' expects a number, got {raw!r}")
    return str(raw).strip()


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Install file + stderr handlers in the project's log format"""
    load_dotenv()
    level_name = (level or os.getenv(f"{ENV_PREFIX}LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv(f"{ENV_PREFIX}LOG_FILE", "video_fusion.log")
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class ConfigManager:
    """
    Resolves a FusionConfig from defaults, a config file, the environment
    and explicit overrides, remembering where every value came from
    """

    def __init__(self, config_file: Optional[str] = None, use_env: bool = True):
        """Initialize the configuration manager"""
        if use_env:
            load_dotenv()
        self.config_file = config_file
        self.use_env = use_env
        self.sources: Dict[str, str] = {key: "default" for key in config_keys()}
        self.config = self._load_config()

    def _load_config(self) -> FusionConfig:
        """Load configuration from file and environment"""
        config = FusionConfig()
        if self.config_file:
            # imported here: media_io depends on this module for FusionConfig
            from media_io import read_config_values
            values = read_config_values(self.config_file)
            config = replace(config, **values)
            for key in values:
                self.sources[key] = "file"
            logger.info(f"Loaded {len(values)} keys from {self.config_file}")
        if self.use_env:
            env_values = self._environment_overrides()
            if env_values:
                config = replace(config, **env_values)
                for key in env_values:
                    self.sources[key] = "env"
        return config.validate()

    def _environment_overrides(self) -> Dict[str, Any]:
        """Collect FUSION_<KEY> variables for known keys"""
        values = {}
        for key in config_keys():
            raw = os.getenv(f"{ENV_PREFIX}{key.upper()}")
            if raw is None or raw == "":
                continue
            values[key] = coerce_value(key, raw)
            logger.info(f"Environment override {ENV_PREFIX}{key.upper()}={raw}")
        return values

    def apply_overrides(self, overrides: Dict[str, Any]) -> FusionConfig:
        """Apply flag values (None means not given); flags win over everything"""
        given = {k: coerce_value(k, v) for k, v in overrides.items() if v is not None}
        if given:
            self.config = replace(self.config, **given).validate()
            for key in given:
                self.sources[key] = "flag"
        return self.config

    def get_config(self) -> FusionConfig:
        return self.config

    def describe(self) -> str:
        """One `key = value  (source)` line per key, in declaration order"""
        values = self.config.to_dict()
        width = max(len(k) for k in values)
        return "\n".join(
            f"{key.ljust(width)} = {values[key]}  ({self.sources[key]})" for key in values
        )
