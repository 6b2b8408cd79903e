"""Errors for crossgap."""
from .const import ExitCode


class CrossGapError(Exception):
    """General crossgap Exception."""

    exit_code = ExitCode.RUNTIME


class ConfigError(CrossGapError):
    """Invalid configuration or command line usage."""

    exit_code = ExitCode.USAGE


class FrameStreamError(CrossGapError):
    """Unreadable or malformed frame source."""

    exit_code = ExitCode.DATA


class FlowError(CrossGapError):
    """Optical flow inputs are inconsistent."""

    exit_code = ExitCode.DATA


class InfluxError(CrossGapError):
    """Influx map geometry or support problem."""

    exit_code = ExitCode.DATA


class TrainingError(CrossGapError):
    """Training data cannot produce a usable model."""

    exit_code = ExitCode.DATA


class DetectorError(CrossGapError):
    """Degenerate detector inputs."""

    exit_code = ExitCode.DATA


class ModelError(CrossGapError):
    """Model file unreadable or incompatible with the stream."""

    exit_code = ExitCode.DATA


class SceneError(CrossGapError):
    """Invalid simulator scene script."""

    exit_code = ExitCode.DATA


class EvaluationError(CrossGapError):
    """Evaluation inputs cannot be matched."""

    exit_code = ExitCode.DATA


class PeerProtocolError(CrossGapError):
    """Peer link framing or version problem."""


class ActivityError(CrossGapError):
    """Activity samples or point sets are inconsistent."""

    exit_code = ExitCode.DATA


class PeerVersionError(PeerProtocolError):
    """Peer speaks a different protocol version."""
