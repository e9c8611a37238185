import socket
import struct

import numpy as np
import pytest

from src.comm import (HEADER, MAGIC, SynchronousBus, TrajectoryMessage, decode, encode,
                      encoded_size)
from src.errors import DecodeError, ProtocolError
from src.ocp import leader_assumed
from src.topology import generate
from services.transport import StreamBus, VehicleLink, read_frame, write_frame


def message(sender: int, timestep: int, horizon: int = 3, offset: float = 0.0) -> TrajectoryMessage:
    k = np.arange(horizon + 1, dtype=float)
    samples = np.column_stack([offset + 2.0 * k, np.full(horizon + 1, 20.0)])
    return TrajectoryMessage(sender=sender, timestep=timestep, horizon=horizon, samples=samples)


def test_encoded_size_of_short_message():
    msg = TrajectoryMessage(sender=3, timestep=7, horizon=1, samples=np.array([[0.0, 20.0], [2.0, 20.0]]))
    data = encode(msg)
    assert len(data) == 49 == encoded_size(1)
    assert data[:4] == MAGIC
    assert data[4] == 1
    assert struct.unpack_from("<H", data, 5)[0] == 3
    assert struct.unpack_from("<Q", data, 7)[0] == 7
    assert struct.unpack_from("<H", data, 15)[0] == 1
    assert struct.unpack_from("<4d", data, 17) == (0.0, 20.0, 2.0, 20.0)
    assert decode(data) == msg


def test_round_trip_preserves_bits(rng):
    for _ in range(1000):
        horizon = int(rng.integers(1, 40))
        samples = rng.normal(scale=1e3, size=(horizon + 1, 2))
        msg = TrajectoryMessage(sender=int(rng.integers(0, 0xFFFF)), timestep=int(rng.integers(0, 2**62)),
                                horizon=horizon, samples=samples)
        back = decode(encode(msg))
        assert back == msg
        assert back.samples.tobytes() == samples.tobytes()


def test_truncated_buffers_report_their_length():
    data = encode(message(1, 4))
    for cut in (0, 2, 4, 10, HEADER.size, len(data) - 1):
        with pytest.raises(DecodeError) as excinfo:
            decode(data[:cut])
        assert excinfo.value.offset == cut


def test_bad_magic_and_version_offsets():
    data = bytearray(encode(message(1, 4)))
    bad_magic = bytes(b"XMPC" + data[4:])
    with pytest.raises(DecodeError) as excinfo:
        decode(bad_magic)
    assert excinfo.value.offset == 0

    data[4] = 9
    with pytest.raises(DecodeError) as excinfo:
        decode(bytes(data))
    assert excinfo.value.offset == 4


def test_trailing_bytes_are_rejected():
    data = encode(message(1, 4))
    with pytest.raises(DecodeError) as excinfo:
        decode(data + b"\x00")
    assert excinfo.value.offset == len(data)


def test_non_finite_sample_is_rejected():
    data = bytearray(encode(message(1, 4)))
    data[HEADER.size + 8:HEADER.size + 16] = struct.pack("<d", float("nan"))
    with pytest.raises(DecodeError) as excinfo:
        decode(bytes(data))
    assert excinfo.value.offset == HEADER.size + 8


def test_message_shape_is_checked():
    with pytest.raises(ValueError):
        TrajectoryMessage(sender=1, timestep=0, horizon=3, samples=np.zeros((3, 2)))


def test_message_trajectory_conversion():
    traj = leader_assumed(10.0, 20.0, horizon=5, dt=0.1)
    msg = TrajectoryMessage.from_trajectory(0, 2, traj)
    assert msg.horizon == 5
    np.testing.assert_array_equal(msg.to_trajectory().outputs, traj.outputs)


def post_all(bus: SynchronousBus, timestep: int, skip=()):
    for j in range(bus.graph.n_followers + 1):
        if j not in skip:
            bus.post(message(j, timestep, offset=-10.0 * j))


@pytest.mark.parametrize("kind", ["pf", "bd"])
def test_bus_delivers_information_sets(kind):
    graph = generate(kind, 4)
    bus = SynchronousBus(graph)
    post_all(bus, 0)
    inboxes = bus.exchange()
    for i in range(5):
        expected = sorted(j for j, r in graph.edges if r == i)
        assert sorted(inboxes[i]) == expected
        for j, msg in inboxes[i].items():
            assert msg.sender == j
    assert sorted(bus.last_deliveries) == sorted(graph.edges)
    assert bus.timestep == 1


def test_bus_reports_missing_sender():
    bus = SynchronousBus(generate("pf", 3))
    post_all(bus, 0, skip=(2,))
    with pytest.raises(ProtocolError) as excinfo:
        bus.exchange(timeout=0.05)
    assert excinfo.value.sender == 2
    assert bus.timestep == 0


def test_bus_rejects_duplicates_and_stale_messages():
    bus = SynchronousBus(generate("pf", 2))
    bus.post(message(1, 0))
    with pytest.raises(ProtocolError):
        bus.post(message(1, 0))
    with pytest.raises(ProtocolError):
        bus.post(message(2, 1))
    with pytest.raises(ProtocolError):
        bus.post(message(7, 0))


def test_bus_advances_in_lockstep():
    bus = SynchronousBus(generate("pf", 2))
    for t in range(3):
        post_all(bus, t)
        inboxes = bus.exchange()
        assert inboxes[2][1].timestep == t
    assert bus.timestep == 3


def test_frames_over_socketpair():
    a, b = socket.socketpair()
    try:
        write_frame(a, b"hello")
        write_frame(a, b"")
        assert read_frame(b) == b"hello"
        assert read_frame(b) == b""
        a.close()
        with pytest.raises(ProtocolError):
            read_frame(b)
    finally:
        b.close()


def test_stream_bus_routes_over_sockets():
    graph = generate("pf", 2)
    pairs = {i: socket.socketpair() for i in range(3)}
    try:
        coordinator = StreamBus(SynchronousBus(graph), {i: pair[0] for i, pair in pairs.items()})
        links = {i: VehicleLink(i, pair[1]) for i, pair in pairs.items()}
        for i, link in links.items():
            link.publish(message(i, 0, offset=-10.0 * i))
        coordinator.step()
        inboxes = {i: link.receive_inbox() for i, link in links.items()}
        assert inboxes[0] == {}
        assert list(inboxes[1]) == [0]
        assert list(inboxes[2]) == [1]
        assert inboxes[2][1] == message(1, 0, offset=-10.0)
    finally:
        for left, right in pairs.values():
            left.close()
            right.close()


def test_link_refuses_foreign_messages():
    left, right = socket.socketpair()
    try:
        with pytest.raises(ProtocolError):
            VehicleLink(1, left).publish(message(2, 0))
    finally:
        left.close()
        right.close()


def test_stream_bus_needs_every_vehicle():
    left, right = socket.socketpair()
    try:
        with pytest.raises(ProtocolError):
            StreamBus(SynchronousBus(generate("pf", 2)), {0: left})
    finally:
        left.close()
        right.close()
