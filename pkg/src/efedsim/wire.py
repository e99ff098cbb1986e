"""Binary message framing for the client/server/verifier simulation.

Frame layout (all integers little-endian):

    magic 0xEF 0x4C | version 0x01 | kind u8 | from u32 | to u32 |
    seq u64 | payload length u32 | payload

Node ids pack the role into the high byte and the index into the low three
bytes. A matrix payload is rows u32, cols u32, then rows*cols float64
values row-major; an SVD triple is m u32, n u32, k u32, then U (m*k),
sigma (k), Vt (k*n). Encoding then decoding any well-formed message
reproduces it bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from enum import IntEnum

import numpy as np

__all__ = [
    "Role",
    "NodeId",
    "Kind",
    "WeightSlot",
    "Message",
    "SvdTriple",
    "WeightShardPayload",
    "ActivationPayload",
    "ValidationProbePayload",
    "ProbeResultPayload",
    "TrustReportPayload",
    "StatusUpdatePayload",
    "ReassignmentPayload",
    "CodecError",
    "BadMagicError",
    "TruncatedFrameError",
    "UnknownKindError",
    "LengthOverflowError",
    "encode",
    "decode",
    "decode_stream",
    "encode_matrix",
    "frame_size",
    "FRAME_HEADER_SIZE",
    "MATRIX_HEADER_SIZE",
    "SVD_HEADER_SIZE",
    "SHARD_HEADER_SIZE",
    "MAX_PAYLOAD",
]

MAGIC = b"\xef\x4c"
VERSION = 1
FRAME_HEADER_SIZE = 24
MATRIX_HEADER_SIZE = 8
SVD_HEADER_SIZE = 12
SHARD_HEADER_SIZE = 7  # layer u32 + slot u8 + head u8 + encoding u8
TRUST_REPORT_SIZE = 29
MAX_PAYLOAD = 1 << 30
_MAX_INDEX = 1 << 24


class CodecError(ValueError):
    """Base class for malformed frames."""


class BadMagicError(CodecError):
    pass


class TruncatedFrameError(CodecError):
    pass


class UnknownKindError(CodecError):
    pass


class LengthOverflowError(CodecError):
    pass


class Role(IntEnum):
    CLIENT = 1
    SERVER = 2
    VERIFIER = 3


@dataclass(frozen=True)
class NodeId:
    role: Role
    index: int

    def __post_init__(self):
        if not 0 <= self.index < _MAX_INDEX:
            raise ValueError(f"node index {self.index} outside [0, 2^24)")

    def pack(self) -> int:
        return (int(self.role) << 24) | self.index

    @classmethod
    def unpack(cls, value: int) -> "NodeId":
        role_byte = value >> 24
        try:
            role = Role(role_byte)
        except ValueError as exc:
            raise CodecError(f"unknown node role byte {role_byte}") from exc
        return cls(role=role, index=value & (_MAX_INDEX - 1))

    def __str__(self):
        return f"{self.role.name.lower()}{self.index}"


class Kind(IntEnum):
    WEIGHT_SHARD = 1
    ACTIVATION = 2
    VALIDATION_PROBE = 3
    PROBE_RESULT = 4
    TRUST_REPORT = 5
    STATUS_UPDATE = 6
    REASSIGNMENT = 7


class WeightSlot(IntEnum):
    """Which weight matrix of a layer a shard message carries."""

    W_Q = 1
    W_K = 2
    W_V = 3
    W_O = 4
    W_1 = 5
    W_2 = 6
    LN1_GAIN = 7
    LN1_BIAS = 8
    LN2_GAIN = 9
    LN2_BIAS = 10


class _ArrayEqMixin:
    """Field-wise equality that handles ndarray members."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)
                        and a.shape == b.shape and np.array_equal(a, b)):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SvdTriple(_ArrayEqMixin):
    """Wire form of a truncated SVD: exactly the three transmitted factors."""

    u: np.ndarray  # m x k
    sigma: np.ndarray  # k
    v_t: np.ndarray  # k x n

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v_t.shape[1]

    @property
    def k(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True, eq=False)
class WeightShardPayload(_ArrayEqMixin):
    layer: int
    slot: WeightSlot
    head: int
    body: object  # np.ndarray (dense) or SvdTriple (compressed)


@dataclass(frozen=True, eq=False)
class ActivationPayload(_ArrayEqMixin):
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class ValidationProbePayload(_ArrayEqMixin):
    probe_id: int
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class ProbeResultPayload(_ArrayEqMixin):
    probe_id: int
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class TrustReportPayload(_ArrayEqMixin):
    server: NodeId
    acc: float
    layers: float
    score: float
    active: bool


@dataclass(frozen=True, eq=False)
class StatusUpdatePayload(_ArrayEqMixin):
    active: bool


@dataclass(frozen=True, eq=False)
class ReassignmentPayload(_ArrayEqMixin):
    new_owner: NodeId
    start: int
    stop: int


_PAYLOAD_TYPES = {
    Kind.WEIGHT_SHARD: WeightShardPayload,
    Kind.ACTIVATION: ActivationPayload,
    Kind.VALIDATION_PROBE: ValidationProbePayload,
    Kind.PROBE_RESULT: ProbeResultPayload,
    Kind.TRUST_REPORT: TrustReportPayload,
    Kind.STATUS_UPDATE: StatusUpdatePayload,
    Kind.REASSIGNMENT: ReassignmentPayload,
}


@dataclass(frozen=True, eq=False)
class Message(_ArrayEqMixin):
    kind: Kind
    sender: NodeId
    receiver: NodeId
    seq: int
    payload: object

    def __post_init__(self):
        expected = _PAYLOAD_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise TypeError(
                f"{self.kind.name} requires {expected.__name__}, "
                f"got {type(self.payload).__name__}"
            )


# ---------------------------------------------------------------------------
# Matrix / SVD body encoding
# ---------------------------------------------------------------------------


def encode_matrix(m: np.ndarray) -> bytes:
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"matrix payload must be 2-D, got ndim={m.ndim}")
    return struct.pack("<II", m.shape[0], m.shape[1]) + m.astype("<f8").tobytes()


def _decode_matrix(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    if off + MATRIX_HEADER_SIZE > len(buf):
        raise TruncatedFrameError("matrix header extends past payload")
    rows, cols = struct.unpack_from("<II", buf, off)
    off += MATRIX_HEADER_SIZE
    nbytes = rows * cols * 8
    if off + nbytes > len(buf):
        raise TruncatedFrameError("matrix data extends past payload")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off)
    return data.reshape(rows, cols).copy(), off + nbytes


def _encode_svd(t: SvdTriple) -> bytes:
    parts = [struct.pack("<III", t.m, t.n, t.k)]
    parts.append(np.ascontiguousarray(t.u, dtype=np.float64).astype("<f8").tobytes())
    parts.append(np.ascontiguousarray(t.sigma, dtype=np.float64).astype("<f8").tobytes())
    parts.append(np.ascontiguousarray(t.v_t, dtype=np.float64).astype("<f8").tobytes())
    return b"".join(parts)


def _decode_svd(buf: bytes, off: int) -> tuple[SvdTriple, int]:
    if off + SVD_HEADER_SIZE > len(buf):
        raise TruncatedFrameError("svd header extends past payload")
    m, n, k = struct.unpack_from("<III", buf, off)
    off += SVD_HEADER_SIZE
    counts = (m * k, k, k * n)
    arrays = []
    for count in counts:
        nbytes = count * 8
        if off + nbytes > len(buf):
            raise TruncatedFrameError("svd data extends past payload")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).copy())
        off += nbytes
    u, sigma, v_t = arrays
    return SvdTriple(u=u.reshape(m, k), sigma=sigma, v_t=v_t.reshape(k, n)), off


# ---------------------------------------------------------------------------
# Payload encoding per kind
# ---------------------------------------------------------------------------


def _encode_payload(msg: Message) -> bytes:
    p = msg.payload
    if msg.kind is Kind.WEIGHT_SHARD:
        compressed = isinstance(p.body, SvdTriple)
        head = struct.pack("<IBBB", p.layer, int(p.slot), p.head, int(compressed))
        body = _encode_svd(p.body) if compressed else encode_matrix(p.body)
        return head + body
    if msg.kind is Kind.ACTIVATION:
        return encode_matrix(p.matrix)
    if msg.kind in (Kind.VALIDATION_PROBE, Kind.PROBE_RESULT):
        return struct.pack("<I", p.probe_id) + encode_matrix(p.matrix)
    if msg.kind is Kind.TRUST_REPORT:
        return struct.pack("<Iddd B", p.server.pack(), p.acc, p.layers, p.score,
                           1 if p.active else 0)
    if msg.kind is Kind.STATUS_UPDATE:
        return struct.pack("<B", 1 if p.active else 0)
    if msg.kind is Kind.REASSIGNMENT:
        return struct.pack("<III", p.new_owner.pack(), p.start, p.stop)
    raise UnknownKindError(f"unknown kind {msg.kind}")


def _decode_payload(kind: Kind, buf: bytes):
    if kind is Kind.WEIGHT_SHARD:
        if len(buf) < SHARD_HEADER_SIZE:
            raise TruncatedFrameError("weight-shard header missing")
        layer, slot, head, enc = struct.unpack_from("<IBBB", buf, 0)
        off = SHARD_HEADER_SIZE
        if enc == 0:
            body, off = _decode_matrix(buf, off)
        elif enc == 1:
            body, off = _decode_svd(buf, off)
        else:
            raise CodecError(f"unknown weight encoding byte {enc}")
        _require_consumed(buf, off)
        return WeightShardPayload(layer=layer, slot=WeightSlot(slot), head=head,
                                  body=body)
    if kind is Kind.ACTIVATION:
        matrix, off = _decode_matrix(buf, 0)
        _require_consumed(buf, off)
        return ActivationPayload(matrix=matrix)
    if kind in (Kind.VALIDATION_PROBE, Kind.PROBE_RESULT):
        if len(buf) < 4:
            raise TruncatedFrameError("probe id missing")
        (probe_id,) = struct.unpack_from("<I", buf, 0)
        matrix, off = _decode_matrix(buf, 4)
        _require_consumed(buf, off)
        cls = ValidationProbePayload if kind is Kind.VALIDATION_PROBE else ProbeResultPayload
        return cls(probe_id=probe_id, matrix=matrix)
    if kind is Kind.TRUST_REPORT:
        if len(buf) != TRUST_REPORT_SIZE:
            raise TruncatedFrameError(
                f"trust report payload must be {TRUST_REPORT_SIZE} bytes, got {len(buf)}"
            )
        server, acc, layers, score, status = struct.unpack("<Iddd B", buf)
        return TrustReportPayload(server=NodeId.unpack(server), acc=acc,
                                  layers=layers, score=score, active=bool(status))
    if kind is Kind.STATUS_UPDATE:
        if len(buf) != 1:
            raise TruncatedFrameError(f"status payload must be 1 byte, got {len(buf)}")
        return StatusUpdatePayload(active=bool(buf[0]))
    if kind is Kind.REASSIGNMENT:
        if len(buf) != 12:
            raise TruncatedFrameError(f"reassignment payload must be 12 bytes, got {len(buf)}")
        owner, start, stop = struct.unpack("<III", buf)
        return ReassignmentPayload(new_owner=NodeId.unpack(owner), start=start, stop=stop)
    raise UnknownKindError(f"unknown kind {kind}")


def _require_consumed(buf: bytes, off: int) -> None:
    if off != len(buf):
        raise CodecError(f"payload has {len(buf) - off} undecoded trailing bytes")


# ---------------------------------------------------------------------------
# Frame encoding
# ---------------------------------------------------------------------------


def encode(msg: Message) -> bytes:
    """Serialize one message to its wire frame."""
    payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise LengthOverflowError(f"payload of {len(payload)} bytes exceeds cap")
    header = MAGIC + struct.pack(
        "<BBIIQI", VERSION, int(msg.kind), msg.sender.pack(), msg.receiver.pack(),
        msg.seq, len(payload),
    )
    return header + payload


def _decode_one(data: bytes, off: int) -> tuple[Message, int]:
    if len(data) - off < FRAME_HEADER_SIZE:
        raise TruncatedFrameError(
            f"frame needs {FRAME_HEADER_SIZE} header bytes, have {len(data) - off}"
        )
    if data[off:off + 2] != MAGIC:
        raise BadMagicError(f"bad magic {data[off:off + 2]!r}")
    version, kind_byte, frm, to, seq, length = struct.unpack_from(
        "<BBIIQI", data, off + 2
    )
    if version != VERSION:
        raise CodecError(f"unsupported frame version {version}")
    try:
        kind = Kind(kind_byte)
    except ValueError as exc:
        raise UnknownKindError(f"unknown message kind byte {kind_byte}") from exc
    if length > MAX_PAYLOAD:
        raise LengthOverflowError(f"declared payload of {length} bytes exceeds cap")
    start = off + FRAME_HEADER_SIZE
    if start + length > len(data):
        raise TruncatedFrameError(
            f"payload declared {length} bytes but only {len(data) - start} present"
        )
    payload = _decode_payload(kind, data[start:start + length])
    msg = Message(kind=kind, sender=NodeId.unpack(frm), receiver=NodeId.unpack(to),
                  seq=seq, payload=payload)
    return msg, start + length


def decode(data: bytes) -> Message:
    """Parse exactly one frame; trailing bytes are an error."""
    msg, end = _decode_one(data, 0)
    if end != len(data):
        raise CodecError(f"{len(data) - end} trailing bytes after frame")
    return msg


def decode_stream(data: bytes) -> list:
    """Parse a back-to-back sequence of frames."""
    msgs, off = [], 0
    while off < len(data):
        msg, off = _decode_one(data, off)
        msgs.append(msg)
    return msgs


def frame_size(msg: Message) -> int:
    return FRAME_HEADER_SIZE + len(_encode_payload(msg))
