"""Layered settings: built-in defaults, then a config file, then command line flags."""
from __future__ import annotations
import dataclasses
import json
import logging
import pathlib
from typing import Any, Optional, Union

import yaml

from .activity import ActivityParams
from .const import (
    CONFIG_FILE,
    DEFAULT_DECIMATION,
    DEFAULT_FPS,
    DEFAULT_QUEUE_SIZE,
    FrameFormat,
)
from .detector import DetectorConfig
from .errors import ConfigError
from .influx import InfluxParams
from .optflow import LKParams
from .peer import PeerParams
from .simgen import DEFAULT_DEPTH_RATIO, DEFAULT_HEIGHT, DEFAULT_NOISE_STD, DEFAULT_WIDTH, SceneScript
from .util import ensure_parent

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class StreamSettings:
    """Input defaults. The source itself always comes from the command line."""

    format: str = FrameFormat.PGM.name
    fps: float = DEFAULT_FPS
    decimation: int = DEFAULT_DECIMATION
    width: Optional[int] = None
    height: Optional[int] = None
    queue_size: int = DEFAULT_QUEUE_SIZE

    def __post_init__(self):
        FrameFormat.parse(self.format)
        if not self.fps > 0:
            raise ValueError("fps must be > 0")
        if self.decimation < 1 or self.queue_size < 1:
            raise ValueError("decimation and queue_size must be >= 1")


@dataclasses.dataclass(frozen=True)
class SimulateSettings:
    """Overrides applied to simulator presets."""

    fps: float = DEFAULT_FPS
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    noise_std: float = DEFAULT_NOISE_STD
    depth_ratio: float = DEFAULT_DEPTH_RATIO

    def apply(self, script: SceneScript) -> SceneScript:
        """Return script with these settings and geometry recomputed for the image size."""
        return dataclasses.replace(
            script,
            fps=self.fps,
            width=self.width,
            height=self.height,
            noise_std=self.noise_std,
            depth_ratio=self.depth_ratio,
            entry=None,
            exit_x=None,
        )


_SECTIONS = {
    "stream": StreamSettings,
    "flow": LKParams,
    "influx": InfluxParams,
    "activity": ActivityParams,
    "detector": DetectorConfig,
    "peer": PeerParams,
    "simulate": SimulateSettings,
}


@dataclasses.dataclass(frozen=True)
class Settings:
    """All tunables grouped by module."""

    stream: StreamSettings = StreamSettings()
    flow: LKParams = LKParams()
    influx: InfluxParams = InfluxParams()
    activity: ActivityParams = ActivityParams()
    detector: DetectorConfig = DetectorConfig()
    peer: PeerParams = PeerParams()
    simulate: SimulateSettings = SimulateSettings()

    def to_dict(self) -> dict[str, Any]:
        """Return nested dict."""
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def override(self, section: str, **values) -> Settings:
        """Return copy with values replaced in section. None values are ignored."""
        values = {key: value for key, value in values.items() if value is not None}
        if not values:
            return self
        try:
            updated = dataclasses.replace(getattr(self, section), **values)
        except (TypeError, ValueError) as error:
            raise ConfigError(f"Invalid {section} setting: {error}") from error
        return dataclasses.replace(self, **{section: updated})


def _build_section(name: str, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"Config section {name!r} must be a mapping")
    cls = _SECTIONS[name]
    known = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in config section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"Invalid value in config section {name!r}: {error}") from error


def load_settings(path: Optional[Union[str, pathlib.Path]] = None) -> Settings:
    """Return settings from a YAML or JSON file layered over defaults.

    A missing file yields the defaults.
    """
    path = pathlib.Path(path or CONFIG_FILE)
    if not path.is_file():
        _LOGGER.debug("Config file %s not found; using defaults", path)
        return Settings()
    try:
        with open(path, "r", encoding="utf-8") as _file:
            data = yaml.load(_file, yaml.SafeLoader) or {}
    except (OSError, yaml.YAMLError) as error:
        raise ConfigError(f"Cannot read config {path}: {error}") from error
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a mapping of sections")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, values) for name, values in data.items()}
    _LOGGER.debug("Loaded config from %s", path)
    return Settings(**sections)


def save_settings(settings: Settings, path: Union[str, pathlib.Path] = CONFIG_FILE):
    """Write settings as JSON."""
    with open(ensure_parent(path), "w", encoding="utf-8") as _file:
        json.dump(settings.to_dict(), _file, indent=2)
        _file.write("\n")
