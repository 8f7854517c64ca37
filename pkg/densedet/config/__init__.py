from densedet.config.config import Config, ConfigError, ConfigFileNotFoundError, load_config

__all__ = ["Config", "ConfigError", "ConfigFileNotFoundError", "load_config"]
