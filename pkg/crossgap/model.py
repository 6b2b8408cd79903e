"""Trained model persistence (``model.json``)."""
from __future__ import annotations
import dataclasses
import json
import logging
import pathlib
from typing import Any, Union

import numpy as np

from .activity import ActivityParams, NoiseModel, PulseTemplate
from .const import FLOAT_DIGITS, MODEL_FORMAT_VERSION
from .detector import DetectorConfig
from .errors import InfluxError, ModelError
from .influx import InfluxMap, InfluxParams, SamplePointSet
from .optflow import LKParams
from .util import ensure_parent, round_list, round_sig

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Model:
    """Everything one installation learns during training."""

    influx: InfluxMap
    points: SamplePointSet
    template: PulseTemplate
    noise: NoiseModel
    fps: float
    lk: LKParams = LKParams()
    influx_params: InfluxParams = InfluxParams()
    activity_params: ActivityParams = ActivityParams()
    detector: DetectorConfig = DetectorConfig()

    @property
    def width(self) -> int:
        """Return image width."""
        return self.influx.width

    @property
    def height(self) -> int:
        """Return image height."""
        return self.influx.height

    def check_stream(self, width: int, height: int):
        """Raise ModelError if a stream's geometry differs from the model."""
        if (width, height) != (self.width, self.height):
            raise ModelError(
                f"Stream is {width}x{height} but the model was trained on "
                f"{self.width}x{self.height}"
            )

    def to_dict(self) -> dict[str, Any]:
        """Return JSON document with floats rounded to significant digits."""
        influx = self.influx
        rows, cols = influx.grid_shape
        vectors = np.asarray(round_list(influx.vectors)).reshape(-1, 2)
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "width": influx.width,
            "height": influx.height,
            "fps": round_sig(self.fps),
            "stride": influx.stride,
            "offset": influx.offset,
            "grid": [rows, cols],
            "frames_trained": influx.frames_trained,
            "nullified_outbound": influx.nullified_outbound,
            "pfa": round_list(influx.pfa) if influx.pfa is not None else None,
            "m": vectors.tolist(),
            "weights": round_list(influx.weights),
            "sample_points": np.asarray(round_list(self.points.points)).reshape(-1, 2).tolist(),
            "sample_requested": self.points.requested,
            "template": {
                "values": round_list(self.template.values),
                "rate": round_sig(self.template.rate),
            },
            "noise": {
                "sigma": round_sig(self.noise.sigma),
                "method": self.noise.method,
                "sample_count": self.noise.sample_count,
            },
            "config": {
                "flow": _echo(self.lk),
                "influx": _echo(self.influx_params),
                "activity": _echo(self.activity_params),
                "detector": _echo(self.detector),
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Model:
        """Return model from JSON document. Projections are recomputed from the map."""
        version = data.get("format_version")
        if version != MODEL_FORMAT_VERSION:
            raise ModelError(f"Unsupported model format version {version!r}")
        try:
            rows, cols = data["grid"]
            influx = InfluxMap(
                width=int(data["width"]),
                height=int(data["height"]),
                stride=int(data["stride"]),
                offset=int(data["offset"]),
                vectors=np.asarray(data["m"], dtype=np.float64).reshape(rows, cols, 2),
                weights=np.asarray(data["weights"], dtype=np.float64).reshape(rows, cols),
                pfa=tuple(data["pfa"]) if data.get("pfa") is not None else None,
                frames_trained=int(data["frames_trained"]),
                nullified_outbound=bool(data["nullified_outbound"]),
            )
            points = SamplePointSet.from_points(
                influx, np.asarray(data["sample_points"], dtype=np.float64), int(data["sample_requested"])
            )
            template = PulseTemplate(data["template"]["values"], float(data["template"]["rate"]))
            noise = NoiseModel(
                sigma=float(data["noise"]["sigma"]),
                method=str(data["noise"].get("method", "robust-MAD")),
                sample_count=int(data["noise"].get("sample_count", 0)),
            )
            config = data.get("config", {})
            return cls(
                influx=influx,
                points=points,
                template=template,
                noise=noise,
                fps=float(data["fps"]),
                lk=LKParams(**config.get("flow", {})),
                influx_params=InfluxParams(**config.get("influx", {})),
                activity_params=ActivityParams(**config.get("activity", {})),
                detector=DetectorConfig(**config.get("detector", {})),
            )
        except (KeyError, TypeError, ValueError, InfluxError) as error:
            raise ModelError(f"Malformed model document: {error}") from error


def _echo(params) -> dict[str, Any]:
    data = dataclasses.asdict(params)
    return {
        key: round_sig(value, FLOAT_DIGITS) if isinstance(value, float) else value
        for key, value in data.items()
    }


def save_model(model: Model, path: Union[str, pathlib.Path]):
    """Write model.json."""
    path = ensure_parent(path)
    with open(path, "w", encoding="utf-8") as _file:
        json.dump(model.to_dict(), _file, indent=1)
        _file.write("\n")
    _LOGGER.info("Model written to %s", path)


def load_model(path: Union[str, pathlib.Path]) -> Model:
    """Return model read from model.json."""
    try:
        with open(path, "r", encoding="utf-8") as _file:
            data = json.load(_file)
    except OSError as error:
        raise ModelError(f"Cannot read model {path}: {error}") from error
    except json.JSONDecodeError as error:
        raise ModelError(f"Model {path} is not valid JSON: {error}") from error
    if not isinstance(data, dict):
        raise ModelError(f"Model {path} must be a JSON object")
    return Model.from_dict(data)
