"""Tests for the peer wire format, merge rule and TCP link."""
import math
import socket
import struct
import threading
import time

import numpy as np
import pytest

from crossgap.const import PEER_MESSAGE_SIZE, State
from crossgap.detector import CrossingState
from crossgap.errors import PeerProtocolError, PeerVersionError
from crossgap.peer import (
    WIRE_FORMAT,
    PeerMessage,
    PeerParams,
    Role,
    StateSlot,
    merge,
    run_link,
)

NODE = bytes(range(16))
GAP = CrossingState(State.GAP, -1.0, 0.0, 1.0)
TRAFFIC = CrossingState(State.TRAFFIC, 2.0, 0.0, 5.0)


def _message(state=State.GAP, seq=1, timestamp_ms=1000):
    return PeerMessage(NODE, seq, state, -0.5, timestamp_ms)


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return predicate()


def test_wire_layout_is_forty_bytes():
    assert struct.calcsize(WIRE_FORMAT) == PEER_MESSAGE_SIZE == 40
    data = PeerMessage(NODE, 7, State.TRAFFIC, 1.5, 123456789).pack()
    assert len(data) == 40
    assert data[:3] == b"CG\x01"
    assert data[3:19] == NODE
    assert data[19:27] == (7).to_bytes(8, "big")
    assert data[27] == 1
    assert struct.unpack(">f", data[28:32])[0] == 1.5
    assert data[32:] == (123456789).to_bytes(8, "big")


def test_unpack_restores_fields():
    message = PeerMessage.unpack(_message(seq=42).pack())
    assert message.node_id == NODE
    assert message.seq == 42
    assert message.state == State.GAP
    assert message.margin == -0.5
    assert message.timestamp_ms == 1000


def test_unpack_rejects_bad_frames():
    data = bytearray(_message().pack())
    with pytest.raises(PeerProtocolError):
        PeerMessage.unpack(bytes(data[:39]))
    bad_magic = bytes(b"XX" + data[2:])
    with pytest.raises(PeerProtocolError, match="magic"):
        PeerMessage.unpack(bad_magic)
    bad_state = bytearray(data)
    bad_state[27] = 9
    with pytest.raises(PeerProtocolError, match="state"):
        PeerMessage.unpack(bytes(bad_state))


def test_unpack_rejects_other_version():
    data = bytearray(_message().pack())
    data[2] = 2
    with pytest.raises(PeerVersionError):
        PeerMessage.unpack(bytes(data))


def test_node_id_length_is_checked():
    with pytest.raises(ValueError):
        PeerMessage(b"short", 1, State.GAP, 0.0, 0)


def test_message_age():
    assert _message(timestamp_ms=1000).age(now_ms=3500) == pytest.approx(2.5)
    assert _message(timestamp_ms=1000).age(now_ms=500) == 0.0


def test_merge_without_remote_is_traffic():
    merged = merge(GAP, None)
    assert merged.state == State.TRAFFIC
    assert math.isinf(merged.staleness)


@pytest.mark.parametrize(
    "local, remote, expected",
    [
        (GAP, State.GAP, State.GAP),
        (GAP, State.TRAFFIC, State.TRAFFIC),
        (TRAFFIC, State.GAP, State.TRAFFIC),
        (TRAFFIC, State.TRAFFIC, State.TRAFFIC),
        (None, State.GAP, State.TRAFFIC),
    ],
)
def test_merge_truth_table(local, remote, expected):
    assert merge(local, _message(remote), remote_age=0.1).state == expected


def test_merge_stale_remote_is_traffic():
    assert merge(GAP, _message(), limit=2.0, remote_age=1.9).state == State.GAP
    stale = merge(GAP, _message(), limit=2.0, remote_age=2.0)
    assert stale.state == State.TRAFFIC
    assert stale.staleness == 2.0
    assert merge(GAP, _message(), limit=2.0, remote_age=0.1, local_age=2.5).state == State.TRAFFIC


def test_state_slot_counts_writes():
    slot = StateSlot()
    assert slot.get() is None
    slot.set(GAP)
    slot.set(TRAFFIC)
    assert slot.get() is TRAFFIC
    assert slot.version == 2


def test_peer_params_validation():
    with pytest.raises(ValueError):
        PeerParams(period=0.5)
    with pytest.raises(ValueError):
        PeerParams(backoff_min=4.0, backoff_max=1.0)
    with pytest.raises(ValueError):
        PeerParams(port=70000)


class _Publisher:
    """Re-publish a state into a slot every 20 ms, like a detector stepping live."""

    def __init__(self, slot, value):
        self.slot = slot
        self.value = value
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            self.slot.set(self.value)
            self._stop.wait(0.02)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=1)


FAST = PeerParams(period=0.05, staleness_limit=0.5, backoff_min=0.1, backoff_max=0.2)


def test_state_slot_age():
    assert math.isinf(StateSlot().age)
    slot = StateSlot(GAP)
    assert slot.age < 1.0
    time.sleep(0.05)
    before = slot.age
    slot.set(GAP)
    assert slot.age < before


def test_loopback_link_merges_both_nodes():
    listen_state, connect_state = StateSlot(), StateSlot()
    changes = []
    with _Publisher(listen_state, GAP) as listen_pub, _Publisher(connect_state, GAP):
        listener = run_link(Role.LISTEN, ("127.0.0.1", 0), listen_state, None, FAST)
        try:
            assert listener.port > 0
            start = time.monotonic()
            connector = run_link(Role.CONNECT, ("127.0.0.1", listener.port), connect_state, changes.append, FAST)
            try:
                both_gap = lambda: (
                    listener.merged.get().state == State.GAP and connector.merged.get().state == State.GAP
                )
                assert _wait_for(both_gap)
                assert time.monotonic() - start <= 0.4
                assert changes and changes[-1].state == State.GAP
                assert connector.remote.node_id == listener.node_id

                listen_pub.value = TRAFFIC
                assert _wait_for(lambda: connector.merged.get().state == State.TRAFFIC)
                listen_pub.value = GAP
                assert _wait_for(lambda: connector.merged.get().state == State.GAP)

                stopped = time.monotonic()
                listener.stop()
                assert _wait_for(lambda: connector.merged.get().state == State.TRAFFIC)
                assert time.monotonic() - stopped <= FAST.staleness_limit + FAST.period + 0.2
            finally:
                connector.stop()
        finally:
            listener.stop()
    assert connector.merged.get().state == State.TRAFFIC


def test_silent_local_detector_turns_both_nodes_traffic():
    listen_state, connect_state = StateSlot(GAP), StateSlot(GAP)
    with _Publisher(connect_state, GAP):
        listener = run_link(Role.LISTEN, ("127.0.0.1", 0), listen_state, None, FAST)
        try:
            connector = run_link(Role.CONNECT, ("127.0.0.1", listener.port), connect_state, None, FAST)
            try:
                assert _wait_for(lambda: connector.remote is not None)
                # listen_state is never written again and goes stale after 0.5 s
                time.sleep(2 * FAST.staleness_limit)
                assert listener.merged.get().state == State.TRAFFIC
                assert listener.merged.get().staleness >= FAST.staleness_limit
                assert _wait_for(lambda: connector.remote.state == State.TRAFFIC)
                assert connector.merged.get().state == State.TRAFFIC
            finally:
                connector.stop()
        finally:
            listener.stop()


def test_sequence_regression_resets_link():
    listen_state = StateSlot()
    dropped = threading.Event()
    with _Publisher(listen_state, GAP):
        listener = run_link(Role.LISTEN, ("127.0.0.1", 0), listen_state, None, FAST)
        listener.events.on("disconnected", dropped.set)
        try:
            with socket.create_connection(("127.0.0.1", listener.port), timeout=2) as sock:
                now_ms = int(time.time() * 1000)
                sock.sendall(_message(seq=5, timestamp_ms=now_ms).pack())
                assert _wait_for(lambda: listener.remote is not None and listener.remote.seq == 5)
                sock.sendall(_message(seq=3, timestamp_ms=now_ms).pack())
                assert dropped.wait(2)
                assert listener.remote is None
                assert listener.merged.get().state == State.TRAFFIC
        finally:
            listener.stop()


def test_listen_on_busy_port_raises():
    params = PeerParams()
    first = run_link(Role.LISTEN, ("127.0.0.1", 0), StateSlot(), None, params)
    try:
        with pytest.raises(PeerProtocolError, match="Cannot listen"):
            run_link(Role.LISTEN, ("127.0.0.1", first.port), StateSlot(), None, params)
    finally:
        first.stop()


def test_merged_gap_implies_both_gap_and_fresh():
    rng = np.random.default_rng(0)
    limit = 2.0
    for _ in range(1000):
        local_state, remote_state = rng.integers(0, 2, size=2)
        local = CrossingState(State(int(local_state)), 0.0, 0.0, 0.0) if rng.random() > 0.1 else None
        remote = _message(State(int(remote_state))) if rng.random() > 0.1 else None
        remote_age, local_age = rng.uniform(0.0, 4.0, size=2)
        merged = merge(local, remote, limit, float(remote_age), float(local_age))
        if merged.state == State.GAP:
            assert local.state == State.GAP and remote.state == State.GAP
            assert max(remote_age, local_age) < limit
