"""Wire format shared by the coordinator and workers.

Frame layout (all integers little-endian)::

    magic    4 bytes   b"RGW1"
    type     u8        MsgType
    length   u32       payload byte count
    payload  length bytes
    crc      u32       zlib.crc32(payload)

Parameters travel as ParamWire::

    u32 entry count
    per entry: u32 name length, name (utf-8), u32 rank, rank x u64 dims
    u64 value count
    value count x f64

A parameter file on disk is ``b"RGP1" + ParamWire``.
"""

from __future__ import annotations

import enum
import json
import math
import queue
import socket
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .policy import ParamVector

MAGIC = b"RGW1"
PARAM_FILE_MAGIC = b"RGP1"
HEADER = struct.Struct("<4sBI")
CRC = struct.Struct("<I")
FRAME_OVERHEAD = HEADER.size + CRC.size
MAX_PAYLOAD = 2**31


class MsgType(enum.IntEnum):
    HELLO = 0
    ASSIGN_CONFIG = 1
    PARAMS = 2
    LOCAL_MODEL = 3
    SHUTDOWN = 4
    ERROR = 5
    ACK = 6


class ProtocolError(Exception):
    """Base class for everything that can go wrong decoding bytes off the wire."""


class BadMagic(ProtocolError):
    pass


class BadChecksum(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class ConnectionClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, int(MsgType(msg_type)), len(payload)) + payload + CRC.pack(zlib.crc32(payload))


def _parse(buf: bytes | bytearray | memoryview, start: int = 0) -> tuple[Frame, int] | None:
    """Decode one frame at ``buf[start:]``; None if more bytes are needed."""
    avail = len(buf) - start
    if avail >= 4 and bytes(buf[start:start + 4]) != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(buf[start:start + 4])!r}")
    if avail < 4 and bytes(buf[start:]) != MAGIC[:avail]:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(buf[start:])!r}")
    if avail < HEADER.size:
        return None
    _, raw_type, length = HEADER.unpack_from(buf, start)
    if length > MAX_PAYLOAD:
        raise MalformedPayload(f"declared payload length {length} too large")
    end = start + HEADER.size + length + CRC.size
    if len(buf) < end:
        return None
    payload = bytes(buf[start + HEADER.size:end - CRC.size])
    (crc,) = CRC.unpack_from(buf, end - CRC.size)
    if crc != zlib.crc32(payload):
        raise BadChecksum(f"crc mismatch on {length}-byte payload")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMessageType(f"message type {raw_type}") from None
    return Frame(msg_type, payload), end


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    parsed = _parse(data)
    if parsed is None:
        raise TruncatedFrame(f"{len(data)} bytes is not a complete frame")
    frame, end = parsed
    if end != len(data):
        raise MalformedPayload(f"{len(data) - end} trailing bytes after frame")
    return frame


class StreamDecoder:
    """Incremental decoder: feed arbitrary chunks, get back whole frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Frame]:
        self._buf += chunk
        frames = []
        pos = 0
        while True:
            parsed = _parse(self._buf, pos)
            if parsed is None:
                break
            frame, pos = parsed
            frames.append(frame)
        del self._buf[:pos]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if self._buf:
            raise TruncatedFrame(f"stream ended with {len(self._buf)} undecoded bytes")


# ---------------------------------------------------------------------------
# ParamWire
# ---------------------------------------------------------------------------

def encode_params(params: ParamVector) -> bytes:
    parts = [struct.pack("<I", len(params.manifest))]
    for name, shape in params.manifest:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
    parts.append(struct.pack("<Q", params.values.size))
    parts.append(params.values.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def decode_params(data: bytes, version: int = 0) -> ParamVector:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise MalformedPayload("ParamWire truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    manifest = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedPayload("tensor name is not utf-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        manifest.append((name, tuple(dims)))
    (n_values,) = struct.unpack("<Q", take(8))
    declared = sum(math.prod(shape) for _, shape in manifest)
    if n_values != declared:
        raise MalformedPayload(f"value count {n_values} disagrees with manifest total {declared}")
    values = np.frombuffer(take(8 * n_values), dtype="<f8").astype(np.float64)
    if pos != len(view):
        raise MalformedPayload(f"{len(view) - pos} trailing bytes after ParamWire")
    try:
        return ParamVector(values, tuple(manifest), version)
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from None


def save_params(params: ParamVector, path: str | Path) -> None:
    Path(path).write_bytes(PARAM_FILE_MAGIC + encode_params(params))


def load_params(path: str | Path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != PARAM_FILE_MAGIC:
        raise BadMagic(f"{path} is not a parameter file")
    return decode_params(data[4:])


# ---------------------------------------------------------------------------
# message payloads
# ---------------------------------------------------------------------------

PARAMS_HEADER = struct.Struct("<QQ")          # round, version
ACK_FORMAT = struct.Struct("<Q32s")            # round, sha256 of the received values


@dataclass(frozen=True)
class LocalModelStats:
    round: int
    worker_id: int
    total_steps: int
    cumulative_steps: int
    episodes: int
    mean_episode_reward: float
    collection_seconds: float
    update_seconds: float
    kl_coeff: float

    _STRUCT = struct.Struct("<QQQQQdddd")

    def pack(self) -> bytes:
        return self._STRUCT.pack(self.round, self.worker_id, self.total_steps, self.cumulative_steps,
                                 self.episodes, self.mean_episode_reward, self.collection_seconds,
                                 self.update_seconds, self.kl_coeff)

    @classmethod
    def unpack(cls, data: bytes) -> "LocalModelStats":
        return cls(*cls._STRUCT.unpack(data))


def encode_params_msg(round_: int, params: ParamVector) -> bytes:
    return PARAMS_HEADER.pack(round_, params.version) + encode_params(params)


def decode_params_msg(payload: bytes) -> tuple[int, ParamVector]:
    if len(payload) < PARAMS_HEADER.size:
        raise MalformedPayload("Params payload too short")
    round_, version = PARAMS_HEADER.unpack_from(payload)
    return round_, decode_params(payload[PARAMS_HEADER.size:], version)


def encode_local_model(stats: LocalModelStats, params: ParamVector) -> bytes:
    return stats.pack() + struct.pack("<Q", params.version) + encode_params(params)


def decode_local_model(payload: bytes) -> tuple[LocalModelStats, ParamVector]:
    size = LocalModelStats._STRUCT.size
    if len(payload) < size + 8:
        raise MalformedPayload("LocalModel payload too short")
    stats = LocalModelStats.unpack(payload[:size])
    (version,) = struct.unpack_from("<Q", payload, size)
    return stats, decode_params(payload[size + 8:], version)


def encode_ack(round_: int, params: ParamVector) -> bytes:
    return ACK_FORMAT.pack(round_, bytes.fromhex(params.digest()))


def decode_ack(payload: bytes) -> tuple[int, str]:
    if len(payload) != ACK_FORMAT.size:
        raise MalformedPayload("Ack payload has wrong size")
    round_, digest = ACK_FORMAT.unpack(payload)
    return round_, digest.hex()


def encode_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def decode_json(payload: bytes) -> dict:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"bad json payload: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedPayload("json payload must be an object")
    return doc


@dataclass(frozen=True)
class Hello:
    requested_id: int
    pid: int
    env: str = ""

    def encode(self) -> bytes:
        return encode_json(asdict(self))

    @classmethod
    def decode(cls, payload: bytes) -> "Hello":
        doc = decode_json(payload)
        try:
            return cls(int(doc["requested_id"]), int(doc["pid"]), str(doc.get("env", "")))
        except (KeyError, TypeError, ValueError):
            raise MalformedPayload("bad Hello payload") from None


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

class Channel:
    """Bidirectional frame pipe. ``recv`` raises TimeoutError or ConnectionClosed."""

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._decoder = StreamDecoder()
        self._ready: list[Frame] = []

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        try:
            self.sock.sendall(encode_frame(msg_type, payload))
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def recv(self, timeout: float | None = None) -> Frame:
        while not self._ready:
            self.sock.settimeout(timeout)
            try:
                chunk = self.sock.recv(1 << 16)
            except socket.timeout:
                raise TimeoutError("no frame within timeout") from None
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class QueueChannel(Channel):
    """In-process endpoint; frames still go through the byte codec."""

    _CLOSED = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        if self._closed:
            raise ConnectionClosed("channel closed")
        self._outbox.put(encode_frame(msg_type, payload))

    def recv(self, timeout: float | None = None) -> Frame:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        if item is self._CLOSED:
            self._inbox.put(item)
            raise ConnectionClosed("peer closed the channel")
        return decode_frame(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSED)


def channel_pair() -> tuple[QueueChannel, QueueChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return QueueChannel(b_to_a, a_to_b), QueueChannel(a_to_b, b_to_a)
