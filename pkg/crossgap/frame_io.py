"""Frame sources for crossgap.

Reads 8-bit grayscale frame sequences from a PGM directory, a YUV4MPEG2 file or a
headerless RAW8 byte stream, and presents them as a uniform stream of timestamped
:class:`Frame` values. Writers for the same formats are provided so simulated scenes
can be replayed through any input path.
"""
from __future__ import annotations
import dataclasses
import logging
import pathlib
import queue
import sys
import threading
from typing import BinaryIO, Callable, Iterable, Iterator, Optional, Union

import cv2
import numpy as np

from .const import (
    DEFAULT_DECIMATION,
    DEFAULT_FPS,
    DEFAULT_QUEUE_SIZE,
    PGM_SUFFIXES,
    Y4M_COLORSPACES,
    Y4M_FRAME,
    Y4M_MAGIC,
    FrameFormat,
)
from .errors import FrameStreamError
from .util import ensure_parent

_LOGGER = logging.getLogger(__name__)

STDIN = "-"


@dataclasses.dataclass(frozen=True)
class Frame:
    """Timestamped grayscale luminance grid with values in [0, 1]."""

    index: int
    timestamp: float
    luma: np.ndarray

    def __post_init__(self):
        luma = np.asarray(self.luma, dtype=np.float32)
        if luma.ndim != 2 or luma.size == 0:
            raise ValueError(f"Frame luma must be a non-empty 2-D grid, got {luma.shape}")
        if luma.min() < 0.0 or luma.max() > 1.0:
            raise ValueError("Frame luma values must lie in [0, 1]")
        view = luma.view()
        view.setflags(write=False)
        object.__setattr__(self, "luma", view)

    @classmethod
    def from_bytes(cls, index: int, timestamp: float, data: np.ndarray) -> Frame:
        """Return Frame from 8-bit pixel grid. luma = byte / 255."""
        data = np.asarray(data)
        if data.dtype != np.uint8:
            raise ValueError(f"Expected 8-bit pixels, got {data.dtype}")
        return cls(index, timestamp, data.astype(np.float32) / np.float32(255.0))

    def to_bytes(self) -> np.ndarray:
        """Return 8-bit pixel grid."""
        return np.rint(self.luma * 255.0).astype(np.uint8)

    @property
    def width(self) -> int:
        """Return width in pixels."""
        return int(self.luma.shape[1])

    @property
    def height(self) -> int:
        """Return height in pixels."""
        return int(self.luma.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width)."""
        return (self.height, self.width)


@dataclasses.dataclass
class StreamConfig:
    """Where and how to read frames."""

    source: str = STDIN
    format: FrameFormat = FrameFormat.PGM
    fps: float = DEFAULT_FPS
    decimation: int = DEFAULT_DECIMATION
    width: Optional[int] = None
    height: Optional[int] = None
    queue_size: int = DEFAULT_QUEUE_SIZE

    def __post_init__(self):
        self.format = FrameFormat.parse(self.format)
        self.source = str(self.source)
        if not self.fps > 0:
            raise ValueError("fps must be > 0")
        if int(self.decimation) != self.decimation or self.decimation < 1:
            raise ValueError("decimation must be an integer >= 1")
        self.decimation = int(self.decimation)
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        if self.format == FrameFormat.RAW8:
            if not self.width or not self.height or self.width < 1 or self.height < 1:
                raise ValueError("RAW8 input requires --width and --height")


class FrameStream:
    """Iterable of Frames sharing one geometry.

    File sources are re-opened on every iteration; pipe sources can be consumed once.
    """

    def __init__(
        self,
        factory: Callable[[], Iterator[Frame]],
        fps: float,
        reiterable: bool = True,
        name: str = "",
    ):
        self._factory = factory
        self._reiterable = reiterable
        self._consumed = False
        self.fps = float(fps)
        self.name = name

    def __repr__(self):
        return (
            f"<{self.__module__}.{self.__class__.__name__} "
            f"name={self.name!r} fps={self.fps} reiterable={self._reiterable}>"
        )

    def __iter__(self) -> Iterator[Frame]:
        if self._consumed and not self._reiterable:
            raise FrameStreamError(f"Stream {self.name!r} can only be read once")
        self._consumed = True
        shape = None
        last_timestamp = None
        for frame in self._factory():
            if shape is None:
                shape = frame.shape
            elif frame.shape != shape:
                raise FrameStreamError(
                    f"Dimension mismatch at frame {frame.index}: "
                    f"{frame.width}x{frame.height}, expected {shape[1]}x{shape[0]}"
                )
            if last_timestamp is not None and frame.timestamp <= last_timestamp:
                raise FrameStreamError(f"Non-increasing timestamp at frame {frame.index}")
            last_timestamp = frame.timestamp
            yield frame

    @property
    def reiterable(self) -> bool:
        """Return True if the stream can be iterated more than once."""
        return self._reiterable

    @classmethod
    def from_frames(cls, frames: Iterable[Frame], fps: float, name: str = "memory") -> FrameStream:
        """Return stream over frames held in memory."""
        frames = list(frames)
        return cls(lambda: iter(frames), fps, True, name)


def decimate(stream: FrameStream, k: int) -> FrameStream:
    """Return stream passing every k-th frame. Retained frames keep their timestamps."""
    if int(k) != k or k < 1:
        raise ValueError("decimation factor must be an integer >= 1")
    k = int(k)
    if k == 1:
        return stream

    def _generate() -> Iterator[Frame]:
        for position, frame in enumerate(stream):
            if position % k == 0:
                yield frame

    return FrameStream(_generate, stream.fps, stream.reiterable, f"{stream.name}/{k}")


def open_stream(cfg: StreamConfig) -> FrameStream:
    """Open frame source described by cfg."""
    if cfg.source != STDIN and not pathlib.Path(cfg.source).exists():
        raise FrameStreamError(f"Source not found: {cfg.source}")
    if cfg.format == FrameFormat.PGM:
        if cfg.source == STDIN:
            raise FrameStreamError("PGM input must be a directory, not stdin")
        reader = lambda: _read_pgm_dir(pathlib.Path(cfg.source))
    elif cfg.format == FrameFormat.Y4M:
        reader = lambda: _with_source(cfg.source, _read_y4m)
    else:
        reader = lambda: _with_source(
            cfg.source, lambda _file: _read_raw8(_file, cfg.width, cfg.height)
        )

    def _generate() -> Iterator[Frame]:
        for index, pixels in reader():
            yield Frame.from_bytes(index, index / cfg.fps, pixels)

    stream = FrameStream(_generate, cfg.fps, cfg.source != STDIN, cfg.source)
    _LOGGER.debug("Opened %s stream: %s", cfg.format.name, cfg.source)
    return decimate(stream, cfg.decimation)


def _with_source(source: str, parse: Callable[[BinaryIO], Iterator]) -> Iterator:
    if source == STDIN:
        yield from parse(sys.stdin.buffer)
        return
    try:
        _file = open(source, "rb")
    except OSError as error:
        raise FrameStreamError(f"Cannot read {source}: {error}") from error
    with _file:
        yield from parse(_file)


def _pgm_header(data: bytes, name: str) -> tuple[int, int, int, int]:
    """Return width, height, maxval and pixel offset of a binary PGM."""
    if not data.startswith(b"P5"):
        raise FrameStreamError(f"{name}: not a binary PGM (P5)")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameStreamError(f"{name}: truncated PGM header")
        token = data[start:pos]
        if not token.isdigit():
            raise FrameStreamError(f"{name}: malformed PGM header token {token!r}")
        tokens.append(int(token))
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise FrameStreamError(f"{name}: invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        raise FrameStreamError(f"{name}: only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def read_pgm(path: Union[str, pathlib.Path]) -> np.ndarray:
    """Return 8-bit pixel grid of a P5 PGM file."""
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as error:
        raise FrameStreamError(f"Cannot read {path}: {error}") from error
    width, height, _, offset = _pgm_header(data, path.name)
    if len(data) - offset < width * height:
        raise FrameStreamError(f"{path.name}: truncated pixel data")
    pixels = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if pixels is None or pixels.shape != (height, width) or pixels.dtype != np.uint8:
        raise FrameStreamError(f"{path.name}: could not decode 8-bit grayscale pixels")
    return pixels


def _read_pgm_dir(path: pathlib.Path) -> Iterator[tuple[int, np.ndarray]]:
    if not path.is_dir():
        raise FrameStreamError(f"PGM source must be a directory: {path}")
    files = sorted(
        (item for item in path.iterdir() if item.suffix.lower() in PGM_SUFFIXES),
        key=lambda item: item.name,
    )
    if not files:
        raise FrameStreamError(f"No .pgm files in {path}")
    for index, item in enumerate(files):
        yield index, read_pgm(item)


def _parse_y4m_header(line: bytes) -> tuple[int, int, int]:
    """Return width, height and chroma byte count per frame."""
    tokens = line.split()
    if not tokens or tokens[0] != Y4M_MAGIC:
        raise FrameStreamError("Not a YUV4MPEG2 stream")
    width = height = None
    colorspace = "420jpeg"
    for token in tokens[1:]:
        key, value = token[:1], token[1:].decode("ascii", errors="replace")
        if key == b"W":
            width = int(value)
        elif key == b"H":
            height = int(value)
        elif key == b"C":
            colorspace = value
    if not width or not height:
        raise FrameStreamError("Y4M header is missing W or H")
    if colorspace not in Y4M_COLORSPACES:
        raise FrameStreamError(f"Unsupported Y4M colorspace: C{colorspace}")
    chroma = 0 if colorspace == "mono" else 2 * ((width + 1) // 2) * ((height + 1) // 2)
    return width, height, chroma


def _read_exact(_file: BinaryIO, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining > 0:
        chunk = _file.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_y4m(_file: BinaryIO) -> Iterator[tuple[int, np.ndarray]]:
    header = _file.readline()
    if not header.endswith(b"\n"):
        raise FrameStreamError("Truncated Y4M header")
    width, height, chroma = _parse_y4m_header(header.strip())
    size = width * height
    index = 0
    while True:
        marker = _file.readline()
        if not marker:
            return
        if not marker.startswith(Y4M_FRAME):
            raise FrameStreamError(f"Malformed Y4M frame marker at frame {index}")
        luma = _read_exact(_file, size)
        if len(luma) != size:
            raise FrameStreamError(f"Truncated Y4M frame {index}")
        if chroma and len(_read_exact(_file, chroma)) != chroma:
            raise FrameStreamError(f"Truncated Y4M chroma in frame {index}")
        yield index, np.frombuffer(luma, dtype=np.uint8).reshape(height, width)
        index += 1


def _read_raw8(_file: BinaryIO, width: int, height: int) -> Iterator[tuple[int, np.ndarray]]:
    size = width * height
    index = 0
    while True:
        data = _read_exact(_file, size)
        if not data:
            return
        if len(data) != size:
            raise FrameStreamError(f"Truncated RAW8 frame {index}: {len(data)} of {size} bytes")
        yield index, np.frombuffer(data, dtype=np.uint8).reshape(height, width)
        index += 1


def write_pgm_dir(frames: Iterable[Frame], out_dir: str, prefix: str = "frame_") -> int:
    """Write frames as P5 PGM files named by index. Return frame count."""
    path = pathlib.Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    count = 0
    for frame in frames:
        name = str(path / f"{prefix}{frame.index:06d}.pgm")
        if not cv2.imwrite(name, frame.to_bytes(), [cv2.IMWRITE_PXM_BINARY, 1]):
            raise FrameStreamError(f"Could not write {name}")
        count += 1
    _LOGGER.debug("Wrote %s PGM frames to %s", count, path)
    return count


def write_y4m(frames: Iterable[Frame], path: str, fps: float) -> int:
    """Write frames as a monochrome YUV4MPEG2 file. Return frame count."""
    num, den = _fps_ratio(fps)
    count = 0
    with open(ensure_parent(path), "wb") as _file:
        for frame in frames:
            if count == 0:
                _file.write(
                    b"%s W%d H%d F%d:%d Ip A1:1 Cmono\n"
                    % (Y4M_MAGIC, frame.width, frame.height, num, den)
                )
            _file.write(Y4M_FRAME + b"\n")
            _file.write(frame.to_bytes().tobytes())
            count += 1
    return count


def write_raw8(frames: Iterable[Frame], path: str) -> int:
    """Write frames as headerless 8-bit bytes. Return frame count."""
    count = 0
    with open(ensure_parent(path), "wb") as _file:
        for frame in frames:
            _file.write(frame.to_bytes().tobytes())
            count += 1
    return count


def _fps_ratio(fps: float) -> tuple[int, int]:
    if float(fps).is_integer():
        return int(fps), 1
    return int(round(fps * 1000)), 1000


class FrameQueue:
    """Read a FrameStream on a producer thread into a bounded queue.

    The producer blocks when the queue is full; no frame is dropped. Errors raised by
    the producer are re-raised in the consuming thread.
    """

    _END = object()

    def __init__(self, stream: FrameStream, maxsize: int = DEFAULT_QUEUE_SIZE):
        self.stream = stream
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._running = False
        self._error: Optional[BaseException] = None
        self.thread: Optional[threading.Thread] = None

    def start(self):
        """Start producer thread."""
        if self.thread is not None:
            _LOGGER.warning("FrameQueue is already running")
            return
        self._running = True
        self.thread = threading.Thread(target=self._produce, daemon=True, name="FrameProducer")
        self.thread.start()

    def stop(self):
        """Stop producer thread."""
        self._running = False
        if self.thread:
            while True:
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    break
            self.thread.join(timeout=2)
            if self.thread.is_alive():
                _LOGGER.warning("FrameProducer thread did not stop gracefully")
            self.thread = None

    def _put(self, item) -> bool:
        while self._running:
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self):
        try:
            for frame in self.stream:
                if not self._put(frame):
                    return
        # pylint: disable=broad-except
        except BaseException as error:
            self._error = error
        self._put(self._END)

    def __iter__(self) -> Iterator[Frame]:
        if self.thread is None:
            self.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._END:
                    break
                yield item
            if self._error is not None:
                raise self._error
        finally:
            self.stop()
