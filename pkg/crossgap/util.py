"""Utility Methods."""
from __future__ import annotations
import contextlib
import csv
import logging
import os
import pathlib
import sys
import time
from datetime import datetime
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .const import FLOAT_DIGITS, LOG_DATE_FORMAT, LOG_ENV_VAR, LOG_FORMAT

_LOGGER = logging.getLogger(__name__)


def resolve_log_level(level: Optional[str] = None) -> int:
    """Return logging level from argument, environment or default."""
    name = level or os.environ.get(LOG_ENV_VAR) or "INFO"
    value = logging.getLevelName(str(name).upper())
    if not isinstance(value, int):
        raise ValueError(f"Unknown log level: {name}")
    return value


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """Configure logging to stderr and optionally an append-mode file.

    Stdout is left alone; the detector writes its state-change lines there.
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(resolve_log_level(level))
    root_logger.handlers.clear()
    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, mode="a", encoding="utf-8")
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    _LOGGER.info("=" * 60)
    _LOGGER.info("NEW SESSION STARTED - %s", datetime.now().strftime(LOG_DATE_FORMAT))
    _LOGGER.info("=" * 60)


def round_sig(value: float, digits: int = FLOAT_DIGITS) -> float:
    """Return float rounded to significant digits."""
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"Cannot serialize non-finite value: {value}")
    return float(f"{value:.{digits}g}")


def round_list(values: Iterable[float], digits: int = FLOAT_DIGITS) -> list:
    """Return list of floats rounded to significant digits."""
    return [round_sig(value, digits) for value in np.asarray(values, dtype=float).ravel()]


def ensure_parent(path: str) -> pathlib.Path:
    """Return path. Create parent directory if missing."""
    path = pathlib.Path(path)
    if path.parent and not path.parent.is_dir():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


@contextlib.contextmanager
def csv_writer(path: str, header: Sequence[str]) -> Iterator:
    """Yield csv writer with header row written."""
    path = ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as _file:
        writer = csv.writer(_file)
        writer.writerow(header)
        yield writer


def read_csv_rows(path: str, required: Sequence[str]) -> list[dict]:
    """Return rows of a headed CSV. Raise ValueError if columns are missing."""
    with open(path, "r", newline="", encoding="utf-8") as _file:
        reader = csv.DictReader(_file)
        missing = [name for name in required if name not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def format_float(value: float) -> str:
    """Return compact float text for CSV output."""
    return f"{value:.9g}"


class RateLogger:
    """Log processing rate periodically with warnings for slow frames."""

    def __init__(self, name: str, target_fps: float = 0.0, interval: float = 10.0):
        self.name = name
        self.target_fps = target_fps
        self.interval = interval
        self.count = 0
        self.slow_count = 0
        self.start_time = time.monotonic()
        self.last_log = self.start_time

    def tick(self, elapsed: float):
        """Record one processed item that took elapsed seconds."""
        self.count += 1
        if self.target_fps > 0 and elapsed > 1.0 / self.target_fps:
            self.slow_count += 1
        now = time.monotonic()
        if now - self.last_log < self.interval:
            return
        rate = self.count / max(now - self.start_time, 1e-9)
        _LOGGER.info("%s: %.1f frames/s | processed: %s", self.name, rate, self.count)
        if self.slow_count:
            _LOGGER.warning(
                "%s: %s frames slower than %.1f fps in the last %.0f s",
                self.name,
                self.slow_count,
                self.target_fps,
                now - self.last_log,
            )
            self.slow_count = 0
        self.last_log = now

    @property
    def rate(self) -> float:
        """Return mean rate since start."""
        return self.count / max(time.monotonic() - self.start_time, 1e-9)
