"""Configuration handling class."""
import dataclasses
from functools import lru_cache
from typing import Any, Dict, Optional

import voluptuous as vol
import yaml

from densedet.common.errors import Error
from densedet.detector.dense import DetectConfig
from densedet.detector.nms import OverlapConfig
from densedet.detector.regressor import DEFAULT_PAIR_IOU, DEFAULT_RIDGE_LAMBDA
from densedet.imaging.pyramid import DEFAULT_FS, DEFAULT_UPSCALE, PyramidConfig
from densedet.training.sampler import BatchSpec, SamplerConfig
from densedet.training.trainer import TrainConfig


class ConfigError(Error):
    """The configuration file is not valid YAML or does not match the schema."""


class ConfigFileNotFoundError(ConfigError):
    """File could not be found on disk."""


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _number(**bounds):
    return vol.All(vol.Coerce(float), vol.Range(**bounds))


def _count(minimum: int):
    return vol.All(int, vol.Range(min=minimum))


_SCHEMA = vol.Schema(
    {
        vol.Optional("pyramid"): {
            vol.Optional("upscale"): _number(min=1.0),
            vol.Optional("fs"): _number(min=0.0, max=1.0, min_included=False, max_included=False),
        },
        vol.Optional("detect"): {
            vol.Optional("score_floor"): _number(min=0.0, max=1.0),
            vol.Optional("threads"): _count(1),
        },
        vol.Optional("nms"): {
            vol.Optional("strategy"): vol.In(["max", "avg"]),
            vol.Optional("overlap_threshold"): _number(min=0.0, max=1.0),
            vol.Optional("confidence_floor"): _number(min=0.0, max=1.0),
            vol.Optional("keep_ratio"): _number(min=0.0, max=1.0),
        },
        vol.Optional("regressor"): {
            vol.Optional("ridge_lambda"): _number(min=0.0),
            vol.Optional("pair_iou"): _number(min=0.0, max=1.0),
        },
        vol.Optional("train"): {
            vol.Optional("learning_rate"): _number(min=0.0),
            vol.Optional("momentum"): _number(min=0.0, max=1.0, max_included=False),
            vol.Optional("weight_decay"): _number(min=0.0),
            vol.Optional("iterations"): _count(1),
            vol.Optional("batch_size"): _count(1),
            vol.Optional("positive_fraction"): _number(min=0.0, max=1.0, min_included=False, max_included=False),
            vol.Optional("seed"): _count(0),
            vol.Optional("flip_probability"): _number(min=0.0, max=1.0),
            vol.Optional("positives_per_face"): _count(0),
            vol.Optional("negatives_per_image"): _count(0),
            vol.Optional("near_misses_per_face"): _count(0),
            vol.Optional("positive_iou"): _number(min=0.0, max=1.0, min_included=False),
            vol.Optional("negative_iou"): _number(min=0.0, max=1.0, max_included=False),
        },
        vol.Optional("logging"): {vol.Optional("level"): vol.All(str, vol.Upper, vol.In(LOG_LEVELS))},
    }
)


@dataclasses.dataclass(frozen=True)
class Regressor:
    """A representation of the regressor key in the configuration file.

    Attributes:
        ridge_lambda: Ridge regulariser.
        pair_iou: Minimum IOU for a detection to become a training pair.
    """

    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    pair_iou: float = DEFAULT_PAIR_IOU

    @classmethod
    def from_dict(cls, regressor_cfg: Dict[str, Any]) -> "Regressor":
        return cls(
            ridge_lambda=regressor_cfg.get("ridge_lambda", DEFAULT_RIDGE_LAMBDA),
            pair_iou=regressor_cfg.get("pair_iou", DEFAULT_PAIR_IOU),
        )


@dataclasses.dataclass
class Config:
    """A representation of the configuration file.

    Attributes:
        detect: Pyramid, score floor, suppression and thread settings.
        regressor: Box regressor training settings.
        train: SGD settings.
        sampler: Training patch extraction settings.
        log_level: Name of the logging level.
    """

    detect: DetectConfig = DetectConfig()
    regressor: Regressor = Regressor()
    train: TrainConfig = TrainConfig()
    sampler: SamplerConfig = SamplerConfig()
    log_level: str = "INFO"

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "Config":
        """Creates a Config object from a configuration file.
        Arguments:
            cfg: The validated configuration file as a dict.
        Returns:
            A Config object.
        """
        pyramid = cfg.get("pyramid", {})
        detect = cfg.get("detect", {})
        train = cfg.get("train", {})
        train_defaults = TrainConfig()
        batch_defaults = BatchSpec()
        sampler_defaults = SamplerConfig()
        return cls(
            detect=DetectConfig(
                pyramid=PyramidConfig(upscale=pyramid.get("upscale", DEFAULT_UPSCALE), fs=pyramid.get("fs", DEFAULT_FS)),
                score_floor=detect.get("score_floor", DetectConfig.score_floor),
                nms=OverlapConfig(**cfg.get("nms", {})),
                threads=detect.get("threads", DetectConfig.threads),
            ),
            regressor=Regressor.from_dict(cfg.get("regressor", {})),
            train=TrainConfig(
                learning_rate=train.get("learning_rate", train_defaults.learning_rate),
                momentum=train.get("momentum", train_defaults.momentum),
                weight_decay=train.get("weight_decay", train_defaults.weight_decay),
                iterations=train.get("iterations", train_defaults.iterations),
                batch=BatchSpec(
                    size=train.get("batch_size", batch_defaults.size),
                    positive_fraction=train.get("positive_fraction", batch_defaults.positive_fraction),
                ),
                seed=train.get("seed", train_defaults.seed),
                flip_probability=train.get("flip_probability", train_defaults.flip_probability),
            ),
            sampler=SamplerConfig(
                positives_per_face=train.get("positives_per_face", sampler_defaults.positives_per_face),
                negatives_per_image=train.get("negatives_per_image", sampler_defaults.negatives_per_image),
                near_misses_per_face=train.get("near_misses_per_face", sampler_defaults.near_misses_per_face),
                positive_iou=train.get("positive_iou", sampler_defaults.positive_iou),
                negative_iou=train.get("negative_iou", sampler_defaults.negative_iou),
            ),
            log_level=cfg.get("logging", {}).get("level", "INFO"),
        )


@lru_cache(maxsize=10)
def load_config(path: Optional[str] = None) -> Config:
    """Fetches and validates a configuration file from disk.

    Arguments:
        path: The YAML file; None gives the built-in defaults.

    Raises:
        ConfigFileNotFoundError: If the file does not exist.
        ConfigError: If the file is not YAML or fails validation.

    Returns:
        The parsed configuration.
    """
    if path is None:
        return Config()
    cfg_contents = fetch_config_from_disk(path)
    try:
        raw = yaml.safe_load(cfg_contents)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to load YAML file {path}: {e}") from e
    try:
        validated = _SCHEMA(raw if raw is not None else {})
        return Config.from_dict(validated)
    except (vol.Invalid, Error) as e:
        raise ConfigError(f"Failed to lint file {path}: {e}") from e


def fetch_config_from_disk(path: str) -> str:
    """Fetches config file from disk and returns as string.

    Raises:
        ConfigFileNotFoundError: If we could not find the configuration file on disk.
    Returns:
        The file contents as string.
    """
    try:
        with open(path, "r") as stream:
            return stream.read()
    except FileNotFoundError as e:
        raise ConfigFileNotFoundError(f"Could not locate configuration file in {path}") from e
