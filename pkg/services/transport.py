# Stream transport service
import logging
import socket
import struct
from typing import Dict, List

from src.comm import SynchronousBus, TrajectoryMessage, decode, encode
from src.errors import DecodeError, ProtocolError

# Configure logger
logger = logging.getLogger(__name__)

LENGTH_PREFIX = struct.Struct("<I")


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ProtocolError(f"connection closed with {remaining} of {size} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(LENGTH_PREFIX.pack(len(payload)) + payload)


def read_frame(sock: socket.socket) -> bytes:
    (size,) = LENGTH_PREFIX.unpack(_recv_exact(sock, LENGTH_PREFIX.size))
    return _recv_exact(sock, size)


def send_message(sock: socket.socket, msg: TrajectoryMessage) -> None:
    write_frame(sock, encode(msg))


def recv_message(sock: socket.socket) -> TrajectoryMessage:
    return decode(read_frame(sock))


class VehicleLink:
    """Vehicle side of a coordinator connection."""

    def __init__(self, vehicle: int, sock: socket.socket):
        self.vehicle = vehicle
        self.sock = sock

    def publish(self, msg: TrajectoryMessage) -> None:
        if msg.sender != self.vehicle:
            raise ProtocolError(f"link of vehicle {self.vehicle} cannot publish for {msg.sender}", sender=msg.sender)
        send_message(self.sock, msg)

    def receive_inbox(self) -> Dict[int, TrajectoryMessage]:
        """Read the count frame followed by that many messages."""
        (count,) = LENGTH_PREFIX.unpack(read_frame(self.sock))
        inbox = {}
        for _ in range(count):
            msg = recv_message(self.sock)
            inbox[msg.sender] = msg
        return inbox


class StreamBus:
    """
    Coordinator that runs a SynchronousBus over one stream socket per vehicle.
    Each ``step`` reads one framed message from every vehicle, exchanges, and
    writes every vehicle its inbox, so vehicles stay in lockstep.
    """

    def __init__(self, bus: SynchronousBus, connections: Dict[int, socket.socket]):
        self.bus = bus
        self.connections = connections
        expected = set(range(bus.graph.n_followers + 1))
        if set(connections) != expected:
            missing = sorted(expected - set(connections))
            raise ProtocolError(f"no connection for vehicles {missing}", sender=missing[0] if missing else None)

    def step(self) -> Dict[int, Dict[int, TrajectoryMessage]]:
        for vehicle, sock in sorted(self.connections.items()):
            try:
                msg = recv_message(sock)
            except DecodeError as e:
                logger.error(f"vehicle {vehicle} sent an undecodable frame: {e}")
                raise
            if msg.sender != vehicle:
                raise ProtocolError(f"connection of vehicle {vehicle} carried a message from {msg.sender}",
                                    sender=msg.sender)
            self.bus.post(msg)
        inboxes = self.bus.exchange()
        for vehicle, sock in sorted(self.connections.items()):
            messages: List[TrajectoryMessage] = list(inboxes[vehicle].values())
            write_frame(sock, LENGTH_PREFIX.pack(len(messages)))
            for msg in messages:
                send_message(sock, msg)
        return inboxes
