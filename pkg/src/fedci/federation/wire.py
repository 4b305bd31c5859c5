"""Binary wire format: parameter sets, message payloads and stream framing.

Frame layout: ``b"FCI1"`` | u8 type | u32-LE payload length | payload.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from ..model import NODE_EMB, PERSONAL_BIAS

MAGIC = b"FCI1"
FRAME_HEADER = struct.Struct("<4sBI")
HEADER_BYTES = FRAME_HEADER.size
MAX_PAYLOAD = 2 ** 31


class MessageType(enum.IntEnum):
    HELLO = 0
    GLOBAL = 1
    LOCAL = 2
    METRICS = 3
    SHUTDOWN = 4


class DecodeError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class FramingError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameter sets


def serialize_params(params: Mapping[str, np.ndarray]) -> bytes:
    """Encode tensors as f32-LE in insertion order. The client bias is refused."""
    if PERSONAL_BIAS in params:
        raise ProtocolError(f"{PERSONAL_BIAS!r} is private to the client and never leaves it")
    out = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF:
            raise ProtocolError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ProtocolError(f"{name}: too many dims")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise DecodeError(f"truncated {what}: need {n} bytes, have {len(buf) - offset}", offset)
    return buf[offset:offset + n]


def deserialize_params(buf: bytes, offset: int = 0) -> Dict[str, np.ndarray]:
    """Inverse of :func:`serialize_params`; yields float32 arrays."""
    buf = bytes(buf)
    (count,) = struct.unpack("<I", _take(buf, offset, 4, "tensor count"))
    offset += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _take(buf, offset, 2, "name length"))
        offset += 2
        try:
            name = _take(buf, offset, nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("tensor name is not UTF-8", offset) from None
        offset += nlen
        if name in out:
            raise DecodeError(f"duplicate tensor {name!r}", offset)
        if name == PERSONAL_BIAS:
            raise DecodeError(f"{PERSONAL_BIAS!r} must not appear on the wire", offset)
        (ndim,) = struct.unpack("<B", _take(buf, offset, 1, "ndim"))
        offset += 1
        dims = struct.unpack(f"<{ndim}I", _take(buf, offset, 4 * ndim, "dims"))
        offset += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = _take(buf, offset, 4 * n, f"data of {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
        offset += 4 * n
    if offset != len(buf):
        raise DecodeError(f"{len(buf) - offset} trailing bytes", offset)
    return out


def element_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


# ---------------------------------------------------------------------------
# message payloads


def encode_hello(client_id: int, node_ids: Sequence[int]) -> bytes:
    return struct.pack(f"<II{len(node_ids)}I", client_id, len(node_ids), *node_ids)


def decode_hello(buf: bytes) -> Tuple[int, List[int]]:
    cid, n = struct.unpack("<II", _take(buf, 0, 8, "hello header"))
    nodes = struct.unpack(f"<{n}I", _take(buf, 8, 4 * n, "node ids"))
    if len(buf) != 8 + 4 * n:
        raise DecodeError("trailing bytes in HELLO", 8 + 4 * n)
    return cid, list(nodes)


def encode_global(round_no: int, params: Mapping[str, np.ndarray]) -> bytes:
    return struct.pack("<I", round_no) + serialize_params(params)


def decode_global(buf: bytes):
    (round_no,) = struct.unpack("<I", _take(buf, 0, 4, "round"))
    return round_no, deserialize_params(buf, 4)


def encode_local(round_no: int, client_id: int, params: Mapping[str, np.ndarray]) -> bytes:
    return struct.pack("<II", round_no, client_id) + serialize_params(params)


def decode_local(buf: bytes):
    round_no, cid = struct.unpack("<II", _take(buf, 0, 8, "round/client"))
    return round_no, cid, deserialize_params(buf, 8)


def encode_metrics(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def decode_metrics(buf: bytes):
    return json.loads(bytes(buf).decode("utf-8"))


# ---------------------------------------------------------------------------
# framing


def frame_message(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FramingError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return FRAME_HEADER.pack(MAGIC, int(msg_type), len(payload)) + payload


@dataclass
class Frame:
    type: MessageType
    payload: bytes

    @property
    def wire_bytes(self) -> int:
        return HEADER_BYTES + len(self.payload)


class FrameParser:
    """Incremental decoder tolerant of arbitrary stream fragmentation.

    After any framing error the parser is dead and refuses further input.
    """

    def __init__(self):
        self._buf = bytearray()
        self.dead = False

    def feed(self, data: bytes) -> List[Frame]:
        if self.dead:
            raise FramingError("connection is dead after an earlier framing error")
        self._buf += data
        frames = []
        while self._buf:
            head = bytes(self._buf[:len(MAGIC)])
            if head != MAGIC[:len(head)]:
                self.dead = True
                raise FramingError(f"bad magic {head!r}")
            if len(self._buf) < HEADER_BYTES:
                break
            _, mtype, length = FRAME_HEADER.unpack_from(self._buf)
            try:
                mtype = MessageType(mtype)
            except ValueError:
                self.dead = True
                raise FramingError(f"unknown message type {mtype}") from None
            if len(self._buf) < HEADER_BYTES + length:
                break
            payload = bytes(self._buf[HEADER_BYTES:HEADER_BYTES + length])
            del self._buf[:HEADER_BYTES + length]
            frames.append(Frame(mtype, payload))
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """Signal end of stream; leftover bytes mean a truncated message."""
        if self._buf:
            self.dead = True
            raise FramingError(f"stream ended inside a message ({len(self._buf)} bytes pending)")


def split_node_rows(params: Mapping[str, np.ndarray]):
    """Separate the node-embedding table from the shared parameters."""
    shared = {k: v for k, v in params.items() if k not in (NODE_EMB, PERSONAL_BIAS)}
    return params.get(NODE_EMB), shared
