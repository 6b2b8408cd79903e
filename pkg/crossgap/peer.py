"""Two-node cooperation over TCP.

Each node sends its latest crossing state as a fixed 40 byte big-endian frame at least
every ``period`` seconds and immediately on a state change. The merged indication is
GAP only while both nodes report GAP and both reports are fresh. A local state that
stopped updating is announced as TRAFFIC.
"""
from __future__ import annotations
import asyncio
import dataclasses
import logging
import math
import struct
import threading
import time
import uuid
from enum import Enum
from typing import Any, Optional

from pyee.base import EventEmitter

from .const import (
    BACKOFF_MAX,
    BACKOFF_MIN,
    DEFAULT_PEER_PERIOD,
    DEFAULT_PEER_PORT,
    DEFAULT_STALENESS_LIMIT,
    PEER_MAGIC,
    PEER_MESSAGE_SIZE,
    PEER_NODE_ID_SIZE,
    PEER_VERSION,
    State,
)
from .detector import CrossingState
from .errors import PeerProtocolError, PeerVersionError

_LOGGER = logging.getLogger(__name__)

WIRE_FORMAT = ">2sB16sQBfQ"
_HEADER_FORMAT = ">2sB"
POLL_INTERVAL = 0.02


class Role(str, Enum):
    """Link roles."""

    LISTEN = "listen"
    CONNECT = "connect"


@dataclasses.dataclass(frozen=True)
class PeerParams:
    """Link timing."""

    period: float = DEFAULT_PEER_PERIOD
    staleness_limit: float = DEFAULT_STALENESS_LIMIT
    backoff_min: float = BACKOFF_MIN
    backoff_max: float = BACKOFF_MAX
    port: int = DEFAULT_PEER_PORT

    def __post_init__(self):
        if not 0 < self.period <= 0.2:
            raise ValueError("period must lie in (0, 0.2] for a 5 Hz minimum rate")
        if not self.staleness_limit > 0:
            raise ValueError("staleness_limit must be > 0")
        if not 0 < self.backoff_min <= self.backoff_max:
            raise ValueError("backoff_min must be > 0 and <= backoff_max")
        if not 0 <= self.port < 65536:
            raise ValueError("port must lie in [0, 65535]")


@dataclasses.dataclass(frozen=True)
class PeerMessage:
    """State report of one node."""

    node_id: bytes
    seq: int
    state: State
    margin: float
    timestamp_ms: int

    def __post_init__(self):
        if len(self.node_id) != PEER_NODE_ID_SIZE:
            raise ValueError(f"node_id must be {PEER_NODE_ID_SIZE} bytes")

    def pack(self) -> bytes:
        """Return wire bytes."""
        return struct.pack(
            WIRE_FORMAT,
            PEER_MAGIC,
            PEER_VERSION,
            self.node_id,
            self.seq,
            int(self.state),
            self.margin,
            self.timestamp_ms,
        )

    @classmethod
    def unpack(cls, data: bytes) -> PeerMessage:
        """Return message from wire bytes."""
        if len(data) != PEER_MESSAGE_SIZE:
            raise PeerProtocolError(f"Expected {PEER_MESSAGE_SIZE} bytes, got {len(data)}")
        magic, version = struct.unpack_from(_HEADER_FORMAT, data)
        if magic != PEER_MAGIC:
            raise PeerProtocolError(f"Bad magic {magic!r}")
        if version != PEER_VERSION:
            raise PeerVersionError(f"Peer protocol version {version}, expected {PEER_VERSION}")
        _, _, node_id, seq, state, margin, timestamp_ms = struct.unpack(WIRE_FORMAT, data)
        try:
            state = State(state)
        except ValueError as error:
            raise PeerProtocolError(f"Unknown state byte {state}") from error
        return cls(node_id, seq, state, margin, timestamp_ms)

    def age(self, now_ms: Optional[int] = None) -> float:
        """Return seconds since the message timestamp."""
        if now_ms is None:
            now_ms = int(time.time() * 1000)
        return max(now_ms - self.timestamp_ms, 0) / 1000.0


@dataclasses.dataclass(frozen=True)
class MergedIndication:
    """Mutually agreed indication."""

    state: State
    staleness: float


def merge(
    local: Optional[CrossingState],
    remote: Optional[PeerMessage],
    limit: float = DEFAULT_STALENESS_LIMIT,
    remote_age: Optional[float] = None,
    local_age: float = 0.0,
) -> MergedIndication:
    """Return GAP only if both sides report GAP and the older input is younger than limit.

    remote_age defaults to the age of the remote wall-clock timestamp.
    """
    if remote is None:
        return MergedIndication(State.TRAFFIC, math.inf)
    if remote_age is None:
        remote_age = remote.age()
    staleness = max(remote_age, local_age)
    if local is None or local.state != State.GAP or remote.state != State.GAP:
        return MergedIndication(State.TRAFFIC, staleness)
    if not staleness < limit:
        return MergedIndication(State.TRAFFIC, staleness)
    return MergedIndication(State.GAP, staleness)


class StateSlot:
    """Latest value shared between threads. One writer, any number of readers."""

    def __init__(self, value: Any = None):
        self._lock = threading.Lock()
        self._value = value
        self._version = 0
        self._updated = time.monotonic() if value is not None else None

    def set(self, value: Any):
        """Replace value."""
        with self._lock:
            self._value = value
            self._version += 1
            self._updated = time.monotonic()

    def get(self) -> Any:
        """Return value."""
        with self._lock:
            return self._value

    @property
    def version(self) -> int:
        """Return number of writes."""
        with self._lock:
            return self._version

    @property
    def age(self) -> float:
        """Return seconds since the last write, inf if never written."""
        with self._lock:
            if self._updated is None:
                return math.inf
            return time.monotonic() - self._updated


class PeerLink:
    """TCP link to the opposite node.

    Events: ``connected`` (peer address), ``disconnected``, ``merged_change``
    (MergedIndication).
    """

    def __init__(
        self,
        role: Role,
        host: str,
        local: StateSlot,
        params: Optional[PeerParams] = None,
        node_id: Optional[bytes] = None,
    ):
        self.role = Role(role)
        self.host = host
        self.local = local
        self.params = params or PeerParams()
        self.port = self.params.port
        self.node_id = node_id or uuid.uuid4().bytes
        self.merged = StateSlot(MergedIndication(State.TRAFFIC, math.inf))
        self.error: Optional[Exception] = None
        self.ready = threading.Event()
        self._remote = StateSlot(None)
        self._events = EventEmitter()
        self._seq = 0
        self._writer: Optional[asyncio.StreamWriter] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._stop: Optional[asyncio.Event] = None
        self._thread: Optional[threading.Thread] = None

    def __repr__(self):
        return (
            f"<{self.__module__}.{self.__class__.__name__} "
            f"role={self.role.value} endpoint={self.host}:{self.port}>"
        )

    @property
    def events(self) -> EventEmitter:
        """Return Event Emitter."""
        return self._events

    @property
    def remote(self) -> Optional[PeerMessage]:
        """Return last accepted remote message."""
        item = self._remote.get()
        return item[0] if item else None

    def local_state(self) -> tuple[Optional[CrossingState], State]:
        """Return local snapshot and the state to announce. A stale snapshot announces TRAFFIC."""
        local = self.local.get()
        if local is None or not self.local.age < self.params.staleness_limit:
            return local, State.TRAFFIC
        return local, local.state

    def _next_message(self) -> PeerMessage:
        local, state = self.local_state()
        self._seq += 1
        return PeerMessage(
            node_id=self.node_id,
            seq=self._seq,
            state=state,
            margin=local.margin if local is not None else math.nan,
            timestamp_ms=int(time.time() * 1000),
        )

    def update_merged(self) -> MergedIndication:
        """Recompute merged indication from the latest snapshots."""
        item = self._remote.get()
        local_age = self.local.age
        if item is None:
            merged = merge(self.local.get(), None, self.params.staleness_limit, local_age=local_age)
        else:
            message, received = item
            merged = merge(
                self.local.get(),
                message,
                self.params.staleness_limit,
                remote_age=time.monotonic() - received,
                local_age=local_age,
            )
        previous = self.merged.get()
        self.merged.set(merged)
        if previous.state != merged.state:
            _LOGGER.info("Merged indication %s", merged.state.name)
            self._events.emit("merged_change", merged)
        return merged

    async def _sleep(self, delay: float) -> bool:
        """Wait delay seconds. Return True if stopping."""
        try:
            await asyncio.wait_for(self._stop.wait(), timeout=delay)
        except asyncio.TimeoutError:
            return False
        return True

    async def _merge_loop(self):
        while True:
            self.update_merged()
            await asyncio.sleep(POLL_INTERVAL)

    async def _send_loop(self, writer: asyncio.StreamWriter):
        last_state = None
        last_sent = -math.inf
        while True:
            _, state = self.local_state()
            now = time.monotonic()
            if state != last_state or now - last_sent >= self.params.period:
                writer.write(self._next_message().pack())
                await writer.drain()
                last_state, last_sent = state, now
            await asyncio.sleep(POLL_INTERVAL)

    async def _session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> bool:
        """Exchange messages until the link fails. Return True if any message was accepted."""
        peer = writer.get_extra_info("peername")
        _LOGGER.info("Peer link connected: %s", peer)
        self._events.emit("connected", peer)
        last_seq = None
        healthy = False
        sender = asyncio.ensure_future(self._send_loop(writer))
        try:
            while True:
                data = await reader.readexactly(PEER_MESSAGE_SIZE)
                try:
                    message = PeerMessage.unpack(data)
                except PeerVersionError as error:
                    _LOGGER.error("Refusing peer %s: %s", peer, error)
                    break
                except PeerProtocolError as error:
                    _LOGGER.error("Closing link to %s: %s", peer, error)
                    break
                if last_seq is not None and message.seq <= last_seq:
                    _LOGGER.warning(
                        "Sequence regression from %s: %s after %s; resetting link",
                        peer,
                        message.seq,
                        last_seq,
                    )
                    break
                last_seq = message.seq
                healthy = True
                self._remote.set((message, time.monotonic()))
                self.update_merged()
        except (asyncio.IncompleteReadError, ConnectionError, OSError) as error:
            _LOGGER.info("Peer link lost: %s", error or "closed")
        finally:
            self._remote.set(None)
            self.update_merged()
            sender.cancel()
            await asyncio.gather(sender, return_exceptions=True)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            self._events.emit("disconnected")
        return healthy

    async def _on_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if self._writer is not None and not self._writer.is_closing():
            _LOGGER.warning("Replacing existing peer connection")
            self._writer.close()
        self._writer = writer
        await self._session(reader, writer)

    async def _serve(self):
        try:
            server = await asyncio.start_server(self._on_client, self.host, self.port)
        except OSError as error:
            raise PeerProtocolError(f"Cannot listen on {self.host}:{self.port}: {error}") from error
        self.port = server.sockets[0].getsockname()[1]
        _LOGGER.info("Peer link listening on %s:%s", self.host, self.port)
        self.ready.set()
        try:
            await server.serve_forever()
        finally:
            # open sessions keep wait_closed() pending
            if self._writer is not None:
                self._writer.close()
            server.close()
            await server.wait_closed()

    async def _connect_loop(self):
        delay = self.params.backoff_min
        self.ready.set()
        while True:
            try:
                reader, writer = await asyncio.open_connection(self.host, self.port)
            except OSError as error:
                _LOGGER.debug("Connect to %s:%s failed: %s", self.host, self.port, error)
            else:
                self._writer = writer
                if await self._session(reader, writer):
                    delay = self.params.backoff_min
            _LOGGER.debug("Reconnecting in %.1f s", delay)
            if await self._sleep(delay):
                return
            delay = min(delay * 2, self.params.backoff_max)

    async def run(self):
        """Run link until stop()."""
        self._loop = asyncio.get_running_loop()
        self._stop = asyncio.Event()
        merger = asyncio.ensure_future(self._merge_loop())
        main = asyncio.ensure_future(
            self._serve() if self.role == Role.LISTEN else self._connect_loop()
        )
        stopper = asyncio.ensure_future(self._stop.wait())
        try:
            await asyncio.wait({main, stopper}, return_when=asyncio.FIRST_COMPLETED)
            if main.done() and not main.cancelled() and main.exception() is not None:
                raise main.exception()
        finally:
            for task in (main, merger, stopper):
                task.cancel()
            await asyncio.gather(main, merger, stopper, return_exceptions=True)
            self.merged.set(MergedIndication(State.TRAFFIC, math.inf))

    def _thread_main(self):
        try:
            asyncio.run(self.run())
        # pylint: disable=broad-except
        except Exception as error:
            self.error = error
            _LOGGER.error("Peer link failed: %s", error)
        finally:
            self.ready.set()

    def start(self):
        """Run link on a daemon thread."""
        if self._thread is not None:
            _LOGGER.warning("Peer link is already running")
            return
        self._thread = threading.Thread(target=self._thread_main, daemon=True, name="PeerLink")
        self._thread.start()

    def stop(self):
        """Stop link thread."""
        if self._loop is not None and self._stop is not None:
            try:
                self._loop.call_soon_threadsafe(self._stop.set)
            except RuntimeError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=2)
            if self._thread.is_alive():
                _LOGGER.warning("PeerLink thread did not stop gracefully")
            self._thread = None


def run_link(
    role: Role,
    endpoint: tuple[str, int],
    state_source: StateSlot,
    merged_sink=None,
    params: Optional[PeerParams] = None,
) -> PeerLink:
    """Start a link on a background thread and return it.

    merged_sink, if given, is called with each changed MergedIndication on the link thread.
    """
    host, port = endpoint
    params = dataclasses.replace(params or PeerParams(), port=port)
    link = PeerLink(role, host, state_source, params)
    if merged_sink is not None:
        link.events.on("merged_change", merged_sink)
    link.start()
    link.ready.wait(timeout=5)
    if link.error is not None:
        link.stop()
        raise link.error
    return link
