"""Constants for crossgap."""
from __future__ import annotations
from enum import IntEnum
from typing import Union

CONFIG_FILE = "config/crossgap.json"
LOG_ENV_VAR = "CROSSGAP_LOG"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# Stream
DEFAULT_FPS = 8.0
DEFAULT_DECIMATION = 1
DEFAULT_QUEUE_SIZE = 8
PGM_SUFFIXES = (".pgm",)
Y4M_MAGIC = b"YUV4MPEG2"
Y4M_FRAME = b"FRAME"
Y4M_COLORSPACES = ("420", "420jpeg", "420paldv", "420mpeg2", "mono")

# Optical flow
DEFAULT_WINDOW_RADIUS = 7
DEFAULT_PYRAMID_LEVELS = 3
DEFAULT_MAX_ITERATIONS = 20
DEFAULT_EPSILON = 0.01
DEFAULT_MIN_EIGEN = 1e-4
DEFAULT_STRIDE = 8
DEFAULT_FRAME_SKIP = 2
REMAP_CHUNK = 16384  # cv2.remap maps must stay below SHRT_MAX rows

# Influx
DEFAULT_ALPHA = 4.0
DEFAULT_RHO_FRACTION = 0.05
DEFAULT_SIGMA_S_FRACTION = 0.20
DEFAULT_BACKTRACK_EPS = 0.05
DEFAULT_SAMPLE_COUNT = 2000
CANDIDATE_BUDGET_FACTOR = 50
PFA_CLUSTER_RADIUS = 3.0  # in strides
SEED_QUANTILE = 0.9

# Activity
DEFAULT_TEMPLATE_SECONDS = 5.0
DEFAULT_PEAK_FRACTION = 0.8
DEFAULT_K_SAL = 6.0
DEFAULT_MIN_SEPARATION = 8.0
DEFAULT_GUARD = 10.0
DEFAULT_BASELINE_SECONDS = 60.0
MAD_SCALE = 1.4826
MIN_MAXIMA = 3

# Detector
DEFAULT_DETECTOR_RATE = 30.0
DEFAULT_P_FA = 1e-3
DEFAULT_RELEASE_RATIO = 0.7
DEFAULT_HOLD = 1.5
Q_TOLERANCE = 1e-7

# Peer
PEER_MAGIC = b"\x43\x47"
PEER_VERSION = 1
PEER_MESSAGE_SIZE = 40
PEER_NODE_ID_SIZE = 16
DEFAULT_PEER_PERIOD = 0.2
DEFAULT_STALENESS_LIMIT = 2.0
BACKOFF_MIN = 0.5
BACKOFF_MAX = 8.0
DEFAULT_PEER_PORT = 9440

# Model persistence
MODEL_FORMAT_VERSION = 1
FLOAT_DIGITS = 9

# Evaluation
DEFAULT_MAX_WARNING = 30.0
DEFAULT_HISTOGRAM_BIN = 1.0
DEFAULT_ROC_POINTS = 200


class FrameFormat(IntEnum):
    """Enums for input frame formats."""

    PGM = 1
    Y4M = 2
    RAW8 = 3

    @staticmethod
    def parse(value: Union[FrameFormat, str, int]) -> FrameFormat:
        """Return Enum from enum, name or value."""
        if isinstance(value, FrameFormat):
            return value
        if isinstance(value, str):
            name = value.upper().replace("-DIR", "").replace("_DIR", "")
            _enum = FrameFormat.__members__.get(name)
            if _enum is not None:
                return _enum
        return FrameFormat(value)


class State(IntEnum):
    """Crossing indication. Values match the peer wire encoding."""

    GAP = 0
    TRAFFIC = 1

    @staticmethod
    def parse(value: Union[State, str, int]) -> State:
        """Return Enum from enum, name or value."""
        if isinstance(value, State):
            return value
        if isinstance(value, str):
            _enum = State.__members__.get(value.upper())
            if _enum is not None:
                return _enum
        return State(value)


class ExitCode(IntEnum):
    """Process exit codes."""

    OK = 0
    USAGE = 2
    DATA = 3
    RUNTIME = 4


class DistractorType(IntEnum):
    """Simulator distractor kinds."""

    LATERAL_WALKER = 1
    FOLIAGE_PATCH = 2
    STOPPING_CAR = 3

    @staticmethod
    def parse(value: Union[DistractorType, str, int]) -> DistractorType:
        """Return Enum from enum, name or value."""
        if isinstance(value, DistractorType):
            return value
        if isinstance(value, str):
            _enum = DistractorType.__members__.get(value.upper().replace("-", "_"))
            if _enum is not None:
                return _enum
        return DistractorType(value)

    @property
    def label(self) -> str:
        """Return name as used in scene scripts."""
        return self.name.lower().replace("_", "-")


PRESETS = ("single-car", "car-train", "late-appearer", "walker-distractor", "quiet", "multi-car")
