"""Binary wire format and the simulated transport channel.

Frame layout (all integers little-endian, payload float64 little-endian):

    offset  size  field
    0       4     magic b"FDP1"
    4       1     type: 1 = client update, 2 = server model
    5       2     version u16 (currently 1)
    7       ...   type-specific body
    end     4     CRC-32 over bytes [4, end), i.e. everything between the
                  magic and the checksum

Client update body:
    round u32 | client_id u32 | dp_applied u8 | count u32 | count * f64
Server model body:
    round u32 | layout_digest u64 | count u32 | count * f64

The magic check plus the CRC coverage of type, version, and body means any
single corrupted byte is rejected; decoding never silently accepts a bad
frame.  Concatenated frames form the on-disk capture format used for
replay (see ``iter_frames``).
"""

import struct
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

__all__ = [
    "WIRE_VERSION",
    "MAGIC",
    "ClientMessage",
    "ServerMessage",
    "WireError",
    "BadMagicError",
    "BadTypeError",
    "BadVersionError",
    "BadChecksumError",
    "TruncatedError",
    "TrailingBytesError",
    "ChannelClosedError",
    "encode",
    "decode",
    "iter_frames",
    "write_capture",
    "read_capture",
    "ChannelConfig",
    "SimChannel",
]

MAGIC = b"FDP1"
WIRE_VERSION = 1
_TYPE_CLIENT = 1
_TYPE_SERVER = 2

_CLIENT_HEAD = struct.Struct("<BHIIBI")  # type, version, round, client_id, dp, count
_SERVER_HEAD = struct.Struct("<BHIQI")  # type, version, round, digest, count
_CRC = struct.Struct("<I")


class WireError(Exception):
    """Base class for malformed frames."""


class BadMagicError(WireError):
    pass


class BadTypeError(WireError):
    pass


class BadVersionError(WireError):
    pass


class BadChecksumError(WireError):
    pass


class TruncatedError(WireError):
    pass


class TrailingBytesError(WireError):
    pass


class ChannelClosedError(Exception):
    pass


@dataclass(eq=False)
class ClientMessage:
    """One client's (possibly privatized) update for a given round."""

    round: int
    client_id: int
    delta: np.ndarray
    dp_applied: bool
    version: int = WIRE_VERSION

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)

    def __eq__(self, other):
        return (
            isinstance(other, ClientMessage)
            and self.version == other.version
            and self.round == other.round
            and self.client_id == other.client_id
            and self.dp_applied == other.dp_applied
            and self.delta.shape == other.delta.shape
            and np.array_equal(self.delta, other.delta)
        )


@dataclass(eq=False)
class ServerMessage:
    """Global parameters distributed to the clients for a given round."""

    round: int
    theta: np.ndarray
    layout_digest: int
    version: int = WIRE_VERSION

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)

    def __eq__(self, other):
        return (
            isinstance(other, ServerMessage)
            and self.version == other.version
            and self.round == other.round
            and self.layout_digest == other.layout_digest
            and self.theta.shape == other.theta.shape
            and np.array_equal(self.theta, other.theta)
        )


def encode(msg: Union[ClientMessage, ServerMessage]) -> bytes:
    if isinstance(msg, ClientMessage):
        body = _CLIENT_HEAD.pack(
            _TYPE_CLIENT,
            msg.version,
            msg.round,
            msg.client_id,
            1 if msg.dp_applied else 0,
            msg.delta.size,
        ) + msg.delta.astype("<f8").tobytes()
    elif isinstance(msg, ServerMessage):
        body = _SERVER_HEAD.pack(
            _TYPE_SERVER, msg.version, msg.round, msg.layout_digest, msg.theta.size
        ) + msg.theta.astype("<f8").tobytes()
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return MAGIC + body + _CRC.pack(zlib.crc32(body))


def _decode_at(buf: bytes, offset: int):
    """Decode one frame starting at ``offset``; returns (message, end)."""
    if len(buf) - offset < 4:
        raise TruncatedError("frame shorter than magic")
    if buf[offset : offset + 4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) - offset < 7:
        raise TruncatedError("frame shorter than type and version")
    mtype = buf[offset + 4]
    (version,) = struct.unpack_from("<H", buf, offset + 5)
    if mtype not in (_TYPE_CLIENT, _TYPE_SERVER):
        raise BadTypeError(f"unknown frame type {mtype}")
    if version != WIRE_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    head = _CLIENT_HEAD if mtype == _TYPE_CLIENT else _SERVER_HEAD
    body_start = offset + 4
    if len(buf) - body_start < head.size:
        raise TruncatedError("frame shorter than header")
    fields = head.unpack_from(buf, body_start)
    count = fields[-1]
    payload_start = body_start + head.size
    body_end = payload_start + 8 * count
    if len(buf) < body_end + _CRC.size:
        raise TruncatedError("frame shorter than declared payload")
    (stored_crc,) = _CRC.unpack_from(buf, body_end)
    if zlib.crc32(buf[body_start:body_end]) != stored_crc:
        raise BadChecksumError("checksum mismatch")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=payload_start)
    values = values.astype(np.float64)
    if mtype == _TYPE_CLIENT:
        _, version, rnd, client_id, dp, _ = fields
        msg = ClientMessage(rnd, client_id, values, bool(dp), version)
    else:
        _, version, rnd, digest, _ = fields
        msg = ServerMessage(rnd, values, digest, version)
    return msg, body_end + _CRC.size


def decode(buf: bytes) -> Union[ClientMessage, ServerMessage]:
    """Decode exactly one frame; the buffer must contain nothing else."""
    msg, end = _decode_at(buf, 0)
    if end != len(buf):
        raise TrailingBytesError(f"{len(buf) - end} trailing bytes after frame")
    return msg


def iter_frames(buf: bytes) -> Iterator[Union[ClientMessage, ServerMessage]]:
    """Decode a concatenated frame sequence (the capture format)."""
    offset = 0
    while offset < len(buf):
        msg, offset = _decode_at(buf, offset)
        yield msg


def write_capture(path, frames) -> None:
    with open(path, "wb") as fh:
        for frame in frames:
            fh.write(frame)


def read_capture(path) -> list:
    with open(path, "rb") as fh:
        return list(iter_frames(fh.read()))


@dataclass(frozen=True)
class ChannelConfig:
    drop_rate: float = 0.0
    latency_ticks: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.latency_ticks < 0:
            raise ValueError("latency_ticks must be nonnegative")


class SimChannel:
    """Single-producer single-consumer simulated link.

    Each send independently drops the frame with probability ``drop_rate``
    (one uniform draw per send, so the drop pattern is fixed by the seed);
    surviving frames become receivable after ``latency_ticks`` clock ticks
    and are delivered in send order.
    """

    def __init__(self, config: ChannelConfig, capture: Optional[list] = None):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._clock = 0
        self._queue = deque()
        self._closed = False
        self._capture = capture

    def send(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosedError("send on closed channel")
        if self._rng.random() < self.config.drop_rate:
            return
        self._queue.append((self._clock + self.config.latency_ticks, bytes(frame)))
        if self._capture is not None:
            self._capture.append(bytes(frame))

    def tick(self, n: int = 1) -> None:
        self._clock += int(n)

    def recv(self) -> Optional[bytes]:
        if self._closed:
            raise ChannelClosedError("recv on closed channel")
        if self._queue and self._queue[0][0] <= self._clock:
            return self._queue.popleft()[1]
        return None

    def recv_ready(self) -> list:
        out = []
        while True:
            frame = self.recv()
            if frame is None:
                return out
            out.append(frame)

    def close(self) -> None:
        self._closed = True
