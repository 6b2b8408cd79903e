"""Synthetic road scenes with ground-truth vehicle arrivals.

Vehicles travel a straight path from an entry point near the horizon to the exit
baseline at the bottom edge of the image. Path progress is eased so that motion is
slow far away and fast close to the camera, and vehicle size grows linearly with the
path fraction from about 4 px to ``base_size``.
"""
from __future__ import annotations
import dataclasses
import json
import logging
import math
import pathlib
from typing import Any, Optional, Union

import cv2
import numpy as np
import yaml

from .const import DEFAULT_FPS, PRESETS, DistractorType
from .errors import SceneError
from .frame_io import Frame, FrameStream
from .util import csv_writer, ensure_parent, format_float, read_csv_rows

_LOGGER = logging.getLogger(__name__)

TRUTH_CSV_HEADER = ("vehicle_id", "first_visible", "arrival")

DEFAULT_WIDTH = 320
DEFAULT_HEIGHT = 180
DEFAULT_NOISE_STD = 0.01
DEFAULT_DEPTH_RATIO = 3.0
MIN_SIZE = 4.0
ASPECT = 0.75
TEXTURE_STD = 0.08
TEXTURE_BLUR = 1.5

_BACKGROUND_STREAM = 1
_NOISE_STREAM = 2
_PRESET_STREAM = 3
_FOLIAGE_STREAM = 4


@dataclasses.dataclass
class Vehicle:
    """Vehicle travelling from entry_fraction of the path to the exit baseline."""

    appear_time: float
    speed: float
    base_size: float = 48.0
    contrast: float = 0.35
    entry_fraction: float = 0.0

    @property
    def arrival_time(self) -> float:
        """Return time the vehicle reaches the exit baseline."""
        return self.appear_time + (1.0 - self.entry_fraction) / self.speed

    def fraction(self, timestamp: float) -> float:
        """Return path fraction at timestamp."""
        return self.entry_fraction + (timestamp - self.appear_time) * self.speed


@dataclasses.dataclass
class Distractor:
    """Non-approaching motion. Fields not used by a kind are ignored."""

    kind: DistractorType
    start: float = 0.0
    duration: Optional[float] = None
    x: float = 0.15
    y: float = 0.6
    speed: float = 20.0
    size: float = 12.0
    contrast: float = -0.3
    amplitude: float = 1.5
    frequency: float = 0.5
    path_speed: float = 1.0 / 12.0
    stop_fraction: float = 0.45
    brake: float = 2.0

    def __post_init__(self):
        self.kind = DistractorType.parse(self.kind)

    def active(self, timestamp: float) -> bool:
        """Return True if visible at timestamp."""
        if timestamp < self.start:
            return False
        return self.duration is None or timestamp < self.start + self.duration


@dataclasses.dataclass
class SceneScript:
    """Scene description. Coordinates are pixels; y grows downward."""

    duration: float
    fps: float = DEFAULT_FPS
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    entry: Optional[tuple[float, float]] = None
    exit_x: Optional[float] = None
    vehicles: list[Vehicle] = dataclasses.field(default_factory=list)
    distractors: list[Distractor] = dataclasses.field(default_factory=list)
    noise_std: float = DEFAULT_NOISE_STD
    depth_ratio: float = DEFAULT_DEPTH_RATIO
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.entry is None:
            self.entry = (0.5 * self.width, 0.25 * self.height)
        self.entry = (float(self.entry[0]), float(self.entry[1]))
        if self.exit_x is None:
            self.exit_x = 0.6 * self.width
        self.vehicles = [
            item if isinstance(item, Vehicle) else Vehicle(**item) for item in self.vehicles
        ]
        self.distractors = [
            item if isinstance(item, Distractor) else Distractor(**item)
            for item in self.distractors
        ]

    @property
    def frame_count(self) -> int:
        """Return number of frames."""
        return int(round(self.duration * self.fps))

    @property
    def exit_point(self) -> tuple[float, float]:
        """Return where the path meets the exit baseline."""
        return (float(self.exit_x), float(self.height))

    def validate(self):
        """Raise SceneError if the script cannot be rendered."""
        if not self.duration > 0 or not self.fps > 0:
            raise SceneError("duration and fps must be > 0")
        if self.width < 16 or self.height < 16:
            raise SceneError(f"Image {self.width}x{self.height} is too small")
        entry_x, entry_y = self.entry
        if not (0 <= entry_x < self.width and 0 <= entry_y < self.height):
            raise SceneError(f"Entry point {self.entry} lies outside the image")
        if not 0 <= self.exit_x <= self.width:
            raise SceneError(f"Exit x {self.exit_x} lies outside the image")
        if self.noise_std < 0:
            raise SceneError("noise_std must be >= 0")
        if not self.depth_ratio >= 1:
            raise SceneError("depth_ratio must be >= 1")
        for number, vehicle in enumerate(self.vehicles):
            if not 0 <= vehicle.appear_time < self.duration:
                raise SceneError(f"Vehicle {number} appears outside the scene duration")
            if not vehicle.speed > 0:
                raise SceneError(f"Vehicle {number} speed must be > 0")
            if not 0 <= vehicle.entry_fraction < 1:
                raise SceneError(f"Vehicle {number} entry_fraction must lie in [0, 1)")
            if not vehicle.base_size >= MIN_SIZE:
                raise SceneError(f"Vehicle {number} base_size must be >= {MIN_SIZE}")
        for number, distractor in enumerate(self.distractors):
            if not (0 <= distractor.x <= 1 and 0 <= distractor.y <= 1):
                raise SceneError(f"Distractor {number} position must be image fractions")
            if distractor.kind == DistractorType.FOLIAGE_PATCH:
                half = distractor.size / 2 + distractor.amplitude
                x, y = distractor.x * self.width, distractor.y * self.height
                if x - half < 0 or x + half > self.width or y - half < 0 or y + half > self.height:
                    raise SceneError(f"Foliage patch {number} exceeds the image")
            if distractor.kind == DistractorType.STOPPING_CAR:
                if not 0 < distractor.stop_fraction < 1 or not distractor.path_speed > 0:
                    raise SceneError(f"Stopping car {number} needs 0 < stop_fraction < 1")
                if distractor.stop_fraction / distractor.path_speed < distractor.brake / 2:
                    raise SceneError(f"Stopping car {number} cannot brake within its path")

    def to_dict(self) -> dict[str, Any]:
        """Return JSON-compatible dict."""
        data = dataclasses.asdict(self)
        data["entry"] = list(self.entry)
        for item in data["distractors"]:
            item["kind"] = DistractorType.parse(item["kind"]).label
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SceneScript:
        """Return script from dict."""
        try:
            script = cls(**data)
        except (TypeError, ValueError) as error:
            raise SceneError(f"Invalid scene script: {error}") from error
        script.validate()
        return script


def load_script(path: Union[str, pathlib.Path]) -> SceneScript:
    """Return script from a JSON or YAML file."""
    try:
        with open(path, "r", encoding="utf-8") as _file:
            data = yaml.load(_file, yaml.SafeLoader)
    except (OSError, yaml.YAMLError) as error:
        raise SceneError(f"Cannot read scene script {path}: {error}") from error
    if not isinstance(data, dict):
        raise SceneError(f"Scene script {path} must be a mapping")
    return SceneScript.from_dict(data)


def save_script(script: SceneScript, path: Union[str, pathlib.Path]):
    """Write script as JSON, or YAML for .yaml/.yml paths."""
    path = ensure_parent(path)
    with open(path, "w", encoding="utf-8") as _file:
        if path.suffix.lower() in (".yaml", ".yml"):
            yaml.dump(script.to_dict(), _file, yaml.SafeDumper, sort_keys=False)
        else:
            json.dump(script.to_dict(), _file, indent=2)


@dataclasses.dataclass(frozen=True)
class VehicleTruth:
    """Analytic timing and centroid trace of one vehicle."""

    vehicle_id: int
    first_visible: float
    arrival: float
    trace: tuple = ()


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    """Ground truth of a rendered scene."""

    vehicles: tuple

    def __len__(self) -> int:
        return len(self.vehicles)

    def to_csv(self, path: str):
        """Write vehicle_id,first_visible,arrival rows."""
        with csv_writer(path, TRUTH_CSV_HEADER) as writer:
            for item in self.vehicles:
                writer.writerow(
                    (item.vehicle_id, format_float(item.first_visible), format_float(item.arrival))
                )

    @classmethod
    def from_csv(cls, path: str) -> GroundTruth:
        """Return ground truth without traces."""
        try:
            rows = read_csv_rows(path, TRUTH_CSV_HEADER)
        except (OSError, ValueError) as error:
            raise SceneError(f"Cannot read ground truth: {error}") from error
        return cls(
            tuple(
                VehicleTruth(int(row["vehicle_id"]), float(row["first_visible"]), float(row["arrival"]))
                for row in rows
            )
        )


def ease(fraction: Union[float, np.ndarray], depth_ratio: float) -> Union[float, np.ndarray]:
    """Return on-screen progress for path fraction. ease(0) = 0, ease(1) = 1."""
    if depth_ratio == 1:
        return fraction
    shrink = 1.0 - 1.0 / depth_ratio
    return (1.0 / (1.0 - shrink * fraction) - 1.0) / (depth_ratio - 1.0)


def _coverage(centers: np.ndarray, low: float, high: float) -> np.ndarray:
    """Return overlap of unit pixels centered at centers with [low, high]."""
    return np.clip(np.minimum(centers + 0.5, high) - np.maximum(centers - 0.5, low), 0.0, 1.0)


class SceneRenderer:
    """Render frames of a script on demand."""

    def __init__(self, script: SceneScript):
        script.validate()
        self.script = script
        self._xs = np.arange(script.width, dtype=np.float64)
        self._ys = np.arange(script.height, dtype=np.float64)
        self.background = self._background()
        self._foliage = {
            number: self._foliage_texture(number, item)
            for number, item in enumerate(script.distractors)
            if item.kind == DistractorType.FOLIAGE_PATCH
        }

    def _background(self) -> np.ndarray:
        script = self.script
        rng = np.random.default_rng((script.seed, _BACKGROUND_STREAM))
        gradient = np.linspace(0.3, 0.6, script.height)[:, None] * np.ones((1, script.width))
        texture = rng.normal(0.0, 1.0, (script.height, script.width))
        texture = cv2.GaussianBlur(texture, (0, 0), TEXTURE_BLUR)
        texture *= TEXTURE_STD / max(texture.std(), 1e-12)
        return gradient + texture

    def _foliage_texture(self, number: int, item: Distractor) -> np.ndarray:
        rng = np.random.default_rng((self.script.seed, _FOLIAGE_STREAM, number))
        side = int(math.ceil(item.size + 2 * item.amplitude)) + 2
        texture = cv2.GaussianBlur(rng.normal(0.0, 1.0, (side, side)), (0, 0), 1.0)
        return texture / max(texture.std(), 1e-12)

    def vehicle_center(self, vehicle: Vehicle, timestamp: float) -> tuple[float, float, float]:
        """Return (x, y, width) of vehicle at timestamp."""
        return self._on_path(vehicle.fraction(timestamp), vehicle.base_size)

    def _on_path(self, fraction: float, base_size: float) -> tuple[float, float, float]:
        progress = ease(fraction, self.script.depth_ratio)
        (entry_x, entry_y), (exit_x, exit_y) = self.script.entry, self.script.exit_point
        x = entry_x + progress * (exit_x - entry_x)
        y = entry_y + progress * (exit_y - entry_y)
        return x, y, MIN_SIZE + (base_size - MIN_SIZE) * min(max(fraction, 0.0), 1.0)

    def _box(self, image: np.ndarray, x: float, y: float, width: float, height: float, contrast: float):
        cov_x = _coverage(self._xs, x - width / 2, x + width / 2)
        cov_y = _coverage(self._ys, y - height / 2, y + height / 2)
        image += contrast * np.outer(cov_y, cov_x)

    def _stopping_fraction(self, item: Distractor, timestamp: float) -> float:
        elapsed = timestamp - item.start
        cruise = item.stop_fraction / item.path_speed - item.brake / 2
        if elapsed <= cruise:
            return elapsed * item.path_speed
        braking = min(elapsed - cruise, item.brake)
        return cruise * item.path_speed + item.path_speed * (braking - braking**2 / (2 * item.brake))

    def _distractor(self, image: np.ndarray, number: int, item: Distractor, timestamp: float):
        script = self.script
        if item.kind == DistractorType.LATERAL_WALKER:
            x = item.x * script.width + item.speed * (timestamp - item.start)
            self._box(image, x, item.y * script.height, item.size * 0.4, item.size, item.contrast)
        elif item.kind == DistractorType.FOLIAGE_PATCH:
            texture = self._foliage[number]
            shift = item.amplitude * math.sin(2 * math.pi * item.frequency * (timestamp - item.start))
            matrix = np.float32([[1, 0, shift], [0, 1, 0]])
            moved = cv2.warpAffine(
                texture, matrix, texture.shape[::-1], flags=cv2.INTER_LINEAR,
                borderMode=cv2.BORDER_REFLECT,
            )
            side = int(round(item.size))
            x0 = int(round(item.x * script.width - side / 2))
            y0 = int(round(item.y * script.height - side / 2))
            pad = (texture.shape[0] - side) // 2
            image[y0 : y0 + side, x0 : x0 + side] += item.contrast * moved[pad : pad + side, pad : pad + side]
        else:
            x, y, width = self._on_path(self._stopping_fraction(item, timestamp), item.size)
            self._box(image, x, y, width, width * ASPECT, item.contrast)

    def clean_frame(self, timestamp: float) -> np.ndarray:
        """Return noise-free luma at timestamp."""
        image = self.background.copy()
        for vehicle in self.script.vehicles:
            if vehicle.appear_time <= timestamp < vehicle.arrival_time:
                x, y, width = self.vehicle_center(vehicle, timestamp)
                self._box(image, x, y, width, width * ASPECT, vehicle.contrast)
        for number, item in enumerate(self.script.distractors):
            if item.active(timestamp):
                self._distractor(image, number, item, timestamp)
        return image

    def frame(self, index: int) -> Frame:
        """Return frame index with pixel noise, quantized to 8 bits."""
        timestamp = index / self.script.fps
        image = self.clean_frame(timestamp)
        if self.script.noise_std > 0:
            rng = np.random.default_rng((self.script.seed, _NOISE_STREAM, index))
            image = image + rng.normal(0.0, self.script.noise_std, image.shape)
        pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
        return Frame.from_bytes(index, timestamp, pixels)

    def truth(self) -> GroundTruth:
        """Return analytic ground truth."""
        script = self.script
        items = []
        for number, vehicle in enumerate(script.vehicles):
            trace = []
            first = int(math.ceil(vehicle.appear_time * script.fps - 1e-9))
            for index in range(first, script.frame_count):
                timestamp = index / script.fps
                if timestamp >= vehicle.arrival_time:
                    break
                x, y, _ = self.vehicle_center(vehicle, timestamp)
                trace.append((timestamp, x, y))
            items.append(VehicleTruth(number, vehicle.appear_time, vehicle.arrival_time, tuple(trace)))
        return GroundTruth(tuple(items))


def render(script: SceneScript) -> tuple[FrameStream, GroundTruth]:
    """Return lazily rendered frames and ground truth of script."""
    renderer = SceneRenderer(script)

    def _generate():
        for index in range(script.frame_count):
            yield renderer.frame(index)

    _LOGGER.debug(
        "Rendering %s: %s frames, %s vehicles, %s distractors",
        script.name,
        script.frame_count,
        len(script.vehicles),
        len(script.distractors),
    )
    return FrameStream(_generate, script.fps, True, script.name), renderer.truth()


def preset(name: str, seed: int = 0, duration: Optional[float] = None) -> SceneScript:
    """Return a named scene.

    single-car: one vehicle visible for 12 s, appearing at 10 s.
    car-train: 20 vehicles about 30 s apart, 12 s visibility with seeded jitter.
    late-appearer: vehicle entering at 80% of the path at 0.1 path/s (2 s visibility).
    walker-distractor: a pedestrian crossing sideways, then one vehicle.
    quiet: background and noise only.
    multi-car: three vehicles arriving close together.
    """
    key = str(name).lower()
    if key not in PRESETS:
        raise SceneError(f"Unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    vehicles: list[Vehicle] = []
    distractors: list[Distractor] = []
    if key == "single-car":
        length = 30.0
        vehicles = [Vehicle(10.0, 1.0 / 12.0)]
    elif key == "car-train":
        rng = np.random.default_rng((seed, _PRESET_STREAM))
        length = 640.0
        for number in range(20):
            appear = 15.0 + 30.0 * number + float(rng.uniform(-3.0, 3.0))
            visibility = 12.0 + float(rng.uniform(-1.0, 1.0))
            vehicles.append(
                Vehicle(
                    appear,
                    1.0 / visibility,
                    base_size=48.0 + float(rng.uniform(-6.0, 6.0)),
                    contrast=0.35 * float(rng.choice([-1.0, 1.0])),
                )
            )
    elif key == "late-appearer":
        length = 20.0
        vehicles = [Vehicle(10.0, 0.1, entry_fraction=0.8)]
    elif key == "walker-distractor":
        length = 45.0
        distractors = [Distractor(DistractorType.LATERAL_WALKER, start=5.0, duration=10.0)]
        vehicles = [Vehicle(25.0, 1.0 / 12.0)]
    elif key == "multi-car":
        length = 45.0
        vehicles = [Vehicle(10.0, 1.0 / 12.0), Vehicle(14.0, 1.0 / 12.0), Vehicle(19.0, 1.0 / 10.0)]
    else:
        length = 60.0
    return SceneScript(
        duration=duration if duration is not None else length,
        vehicles=[item for item in vehicles if duration is None or item.appear_time < duration],
        distractors=distractors,
        seed=seed,
        name=key,
    )
