"""
Assumed-trajectory messages, the lockstep bus that routes them along the
topology, and the binary wire codec used when vehicles run as separate
processes.

Wire layout (little-endian):

    b"DMPC" | version u8 | sender u16 | timestep u64 | horizon u16 | (horizon+1) x (position f64, velocity f64)
"""

import logging
import struct
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DecodeError, ProtocolError
from .ocp import Trajectory
from .topology import TopologyGraph

logger = logging.getLogger(__name__)

MAGIC = b"DMPC"
VERSION = 1
HEADER = struct.Struct("<4sBHQH")
SAMPLE_DTYPE = np.dtype("<f8")


class TrajectoryMessage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    sender: int = Field(..., ge=0, le=0xFFFF)
    timestep: int = Field(..., ge=0, le=0xFFFFFFFFFFFFFFFF)
    horizon: int = Field(..., ge=1, le=0xFFFF)
    samples: np.ndarray

    @model_validator(mode="after")
    def check_samples(self):
        if self.samples.shape != (self.horizon + 1, 2):
            raise ValueError(f"expected {self.horizon + 1} (position, velocity) samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("message samples must be finite")
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryMessage):
            return NotImplemented
        return (self.sender, self.timestep, self.horizon) == (other.sender, other.timestep, other.horizon) \
            and self.samples.tobytes() == other.samples.tobytes()

    @classmethod
    def from_trajectory(cls, sender: int, timestep: int, trajectory: Trajectory) -> "TrajectoryMessage":
        return cls(sender=sender, timestep=timestep, horizon=trajectory.horizon,
                   samples=np.array(trajectory.outputs, dtype=float))

    def to_trajectory(self) -> Trajectory:
        return Trajectory(outputs=self.samples.copy())


def encoded_size(horizon: int) -> int:
    return HEADER.size + (horizon + 1) * 2 * SAMPLE_DTYPE.itemsize


def encode(msg: TrajectoryMessage) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, msg.sender, msg.timestep, msg.horizon)
    return header + np.ascontiguousarray(msg.samples, dtype=SAMPLE_DTYPE).tobytes()


def decode(data: bytes) -> TrajectoryMessage:
    data = bytes(data)
    if len(data) < len(MAGIC):
        raise DecodeError("truncated magic", offset=len(data))
    if data[:4] != MAGIC:
        raise DecodeError(f"bad magic {data[:4]!r}", offset=0)
    if len(data) < 5:
        raise DecodeError("truncated header", offset=len(data))
    if data[4] != VERSION:
        raise DecodeError(f"unsupported version {data[4]}", offset=4)
    if len(data) < HEADER.size:
        raise DecodeError("truncated header", offset=len(data))
    _, _, sender, timestep, horizon = HEADER.unpack_from(data, 0)
    if horizon < 1:
        raise DecodeError(f"horizon must be at least 1, got {horizon}", offset=HEADER.size - 2)
    expected = encoded_size(horizon)
    if len(data) < expected:
        raise DecodeError(f"truncated samples: need {expected} bytes, have {len(data)}", offset=len(data))
    if len(data) > expected:
        raise DecodeError(f"{len(data) - expected} trailing bytes", offset=expected)
    samples = np.frombuffer(data, dtype=SAMPLE_DTYPE, offset=HEADER.size).reshape(horizon + 1, 2).astype(float)
    if not np.all(np.isfinite(samples)):
        bad = int(np.flatnonzero(~np.isfinite(samples.reshape(-1)))[0])
        raise DecodeError("non-finite sample", offset=HEADER.size + bad * SAMPLE_DTYPE.itemsize)
    return TrajectoryMessage(sender=sender, timestep=timestep, horizon=horizon, samples=samples)


class SynchronousBus:
    """
    Lockstep message bus. Every vehicle posts one message per timestep;
    ``exchange`` blocks until all have posted and then hands each vehicle the
    messages of its information set.
    """

    def __init__(self, graph: TopologyGraph, timeout: float = 5.0):
        self.graph = graph
        self.timeout = timeout
        self.timestep = 0
        self._senders = list(range(graph.n_followers + 1))
        self._info: Dict[int, List[int]] = {i: [] for i in self._senders}
        for j, i in graph.edges:
            self._info[i].append(j)
        for i in self._info:
            self._info[i].sort()
        self._pending: Dict[int, TrajectoryMessage] = {}
        self._cond = threading.Condition()
        self.last_deliveries: List[Tuple[int, int]] = []

    def post(self, msg: TrajectoryMessage) -> None:
        with self._cond:
            if msg.timestep != self.timestep:
                raise ProtocolError(f"message from vehicle {msg.sender} is tagged timestep {msg.timestep}, "
                                    f"bus is at {self.timestep}", sender=msg.sender)
            if msg.sender not in self._info:
                raise ProtocolError(f"unknown sender {msg.sender}", sender=msg.sender)
            if msg.sender in self._pending:
                raise ProtocolError(f"vehicle {msg.sender} posted twice at timestep {self.timestep}", sender=msg.sender)
            self._pending[msg.sender] = msg
            self._cond.notify_all()

    def exchange(self, timeout: Optional[float] = None) -> Dict[int, Dict[int, TrajectoryMessage]]:
        """Wait for every sender, deliver, and advance to the next timestep."""
        timeout = self.timeout if timeout is None else timeout
        with self._cond:
            complete = self._cond.wait_for(lambda: len(self._pending) == len(self._senders), timeout=timeout)
            if not complete:
                missing = next(j for j in self._senders if j not in self._pending)
                raise ProtocolError(f"no message from vehicle {missing} at timestep {self.timestep}", sender=missing)
            inboxes = {i: {j: self._pending[j] for j in self._info[i]} for i in self._senders}
            self.last_deliveries = [(j, i) for i in self._senders for j in self._info[i]]
            logger.debug(f"timestep {self.timestep}: delivered {len(self.last_deliveries)} messages")
            self._pending = {}
            self.timestep += 1
            return inboxes
