"""Binary codec for the four CDTP sub-protocols.

Query (10) and Control&Transfer (20) packets share one envelope::

    byte 0      protocol id
    byte 1      operation id
    bytes 2-3   number of fields
    byte 4      payload indication
    rest        fields, each a 4-byte length followed by that many data bytes

Bandwidth (30) and Batch (40) packets use fixed layouts.  Every multi-byte
integer is big-endian.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, fields
from typing import ClassVar, Union

QUERY = 10
CT = 20
BANDWIDTH = 30
BATCH = 40
PROTOCOLS = (QUERY, CT, BANDWIDTH, BATCH)

SERVER_PORT = 6000
BATCH_CLIENT_PORT = 7000
BATCH_CONTROLLER_PORT = 7001

ENVELOPE = struct.Struct("!BBHB")
FIELD_LEN = struct.Struct("!I")
BW_SHORT = struct.Struct("!BBIH")
BW_LONG = struct.Struct("!BBIHIQBI")
BATCH_PACKET = struct.Struct("!BBB")

MAX_FIELD = 0xFFFFFFFF
# Upper bound on a single field accepted from a stream; datagrams are bounded by their own length.
MAX_STREAM_FIELD = 16 * 1024 * 1024


class WireError(ValueError):
    """Base class for every decode/encode failure."""


class TruncatedPacket(WireError):
    pass


class UnknownOpId(WireError):
    pass


class ProtocolIdMismatch(WireError):
    pass


class FieldSizeMismatch(WireError):
    pass


class EncodingError(WireError):
    pass


# Field kinds.  Integers carry their width; "str" and "bytes" are variable.
U8, U16, U32 = 1, 2, 4
BOOL = "bool"
IP = "ip"
STR = "str"
BYTES = "bytes"
STRLIST = "strlist"

_FIXED = {U8: 1, U16: 2, U32: 4, BOOL: 1, IP: 4}


@dataclass(frozen=True)
class _FieldListOp:
    protocol: ClassVar[int]
    op_id: ClassVar[int]
    layout: ClassVar[tuple]
    has_payload: ClassVar[bool] = False


# --------------------------------------------------------------------------
# Query protocol
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StartQuerySessionRequest(_FieldListOp):
    query_port: int
    transfer_port: int
    control_port: int
    bw_peer2_port: int
    protocol = QUERY
    op_id = 0
    layout = (U16, U16, U16, U16)


@dataclass(frozen=True)
class StartQuerySessionReply(_FieldListOp):
    session_handle: int
    success: bool
    protocol = QUERY
    op_id = 1
    layout = (U32, BOOL)


@dataclass(frozen=True)
class StopQuerySession(_FieldListOp):
    session_handle: int
    protocol = QUERY
    op_id = 2
    layout = (U32,)


@dataclass(frozen=True)
class LsRequest(_FieldListOp):
    session_handle: int
    protocol = QUERY
    op_id = 3
    layout = (U32,)


@dataclass(frozen=True)
class LsReply(_FieldListOp):
    session_handle: int
    success: bool
    names: tuple[str, ...] = ()
    protocol = QUERY
    op_id = 4
    layout = (U32, BOOL, STRLIST)


@dataclass(frozen=True)
class PwdRequest(_FieldListOp):
    session_handle: int
    protocol = QUERY
    op_id = 5
    layout = (U32,)


@dataclass(frozen=True)
class PwdReply(_FieldListOp):
    session_handle: int
    success: bool
    path: str
    protocol = QUERY
    op_id = 6
    layout = (U32, BOOL, STR)


@dataclass(frozen=True)
class CdRequest(_FieldListOp):
    session_handle: int
    dir: str
    protocol = QUERY
    op_id = 7
    layout = (U32, STR)


@dataclass(frozen=True)
class CdReply(_FieldListOp):
    session_handle: int
    success: bool
    protocol = QUERY
    op_id = 8
    layout = (U32, BOOL)


@dataclass(frozen=True)
class GetRequest(_FieldListOp):
    session_handle: int
    file_name: str
    protocol = QUERY
    op_id = 9
    layout = (U32, STR)


@dataclass(frozen=True)
class GetReply(_FieldListOp):
    session_handle: int
    success: bool
    service_ip: str = "0.0.0.0"
    service_tcp_port: int = 0
    service_session_id: int = 0
    transfer_session_id: int = 0
    file_size: int = 0
    link_speed_bps: int = 0
    protocol = QUERY
    op_id = 10
    layout = (U32, BOOL, IP, U16, U32, U32, U32, U32)


# --------------------------------------------------------------------------
# Control & Transfer protocol
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StartTransferRequest(_FieldListOp):
    service_session_id: int
    transfer_session_id: int
    start_position: int
    chunk_size: int
    requested_link_speed_bps: int
    bw_peer2_port: int
    protocol = CT
    op_id = 0
    layout = (U32, U32, U32, U32, U32, U16)


@dataclass(frozen=True)
class TransferReply(_FieldListOp):
    """One chunk of file data.

    ``data`` is the whole zero-padded chunk; only its first
    ``actual_chunk_size`` bytes are file content.
    """

    transfer_session_id: int
    actual_chunk_size: int
    is_last: bool
    chunk_number: int
    data: bytes
    protocol = CT
    op_id = 1
    layout = (U32, U32, BOOL, U32, BYTES)
    has_payload = True

    @classmethod
    def padded(cls, transfer_session_id: int, chunk: bytes, chunk_size: int,
               is_last: bool, chunk_number: int) -> "TransferReply":
        if len(chunk) > chunk_size:
            raise EncodingError(f"chunk of {len(chunk)} bytes exceeds chunk size {chunk_size}")
        return cls(transfer_session_id, len(chunk), is_last, chunk_number,
                   bytes(chunk) + bytes(chunk_size - len(chunk)))

    @property
    def payload(self) -> bytes:
        return self.data[: self.actual_chunk_size]


@dataclass(frozen=True)
class TransferDenied(_FieldListOp):
    transfer_session_id: int
    reason: int
    protocol = CT
    op_id = 2
    layout = (U32, U8)


class DenyReason:
    INCOMPATIBLE_LINK_SPEED = 1
    BAD_SERVICE_SESSION = 2
    ALREADY_SERVING = 3
    GOING_DOWN = 4
    CHUNK_TOO_BIG = 5
    INTERNAL = 6

    TEXT = {
        1: "Incompatible link speed",
        2: "Transfer Session Id of the service client was incompatible",
        3: "Service client already serving",
        4: "Serving Client going down",
        5: "Chunk size too big",
        6: "Internal",
    }


@dataclass(frozen=True)
class RetransmissionRequest(_FieldListOp):
    transfer_session_id: int
    size_received: int
    service_client_occupied: bool
    protocol = CT
    op_id = 3
    layout = (U32, U32, BOOL)


@dataclass(frozen=True)
class RetransmissionReply(_FieldListOp):
    transfer_session_id: int
    success: bool
    alt_ip: str = "0.0.0.0"
    alt_port: int = 0
    new_service_session_id: int = 0
    protocol = CT
    op_id = 4
    layout = (U32, BOOL, IP, U16, U32)


@dataclass(frozen=True)
class ProgressReport(_FieldListOp):
    transfer_session_id: int
    bytes_received: int
    protocol = CT
    op_id = 5
    layout = (U32, U32)


@dataclass(frozen=True)
class DisengageCommand(_FieldListOp):
    transfer_session_id: int
    bytes_received: int
    service_client_occupied: bool
    protocol = CT
    op_id = 6
    layout = (U32, U32, BOOL)


QUERY_OPS = (StartQuerySessionRequest, StartQuerySessionReply, StopQuerySession, LsRequest,
             LsReply, PwdRequest, PwdReply, CdRequest, CdReply, GetRequest, GetReply)
CT_OPS = (StartTransferRequest, TransferReply, TransferDenied, RetransmissionRequest,
          RetransmissionReply, ProgressReport, DisengageCommand)
_BY_ID = {QUERY: {c.op_id: c for c in QUERY_OPS}, CT: {c.op_id: c for c in CT_OPS}}

QueryOp = Union[StartQuerySessionRequest, StartQuerySessionReply, StopQuerySession, LsRequest,
                LsReply, PwdRequest, PwdReply, CdRequest, CdReply, GetRequest, GetReply]
CtOp = Union[StartTransferRequest, TransferReply, TransferDenied, RetransmissionRequest,
             RetransmissionReply, ProgressReport, DisengageCommand]


# --------------------------------------------------------------------------
# Bandwidth protocol
# --------------------------------------------------------------------------


class BwType:
    BREAKTHROUGH_REQUEST = 0
    BREAKTHROUGH_REPLY = 1
    MEASUREMENT_REQUEST = 2
    MEASUREMENT_REPLY = 3
    PAIR_FIRST = 4
    PAIR_SECOND = 5


@dataclass(frozen=True)
class BwPacket:
    packet_type: int
    token: int
    peer_port: int
    sequence: int = 0
    send_time: int = 0
    multiplication_factor: int = 0
    base_payload_size: int = 0
    payload: bytes = b""
    protocol: ClassVar[int] = BANDWIDTH

    @property
    def is_short(self) -> bool:
        return self.packet_type in (BwType.BREAKTHROUGH_REQUEST, BwType.BREAKTHROUGH_REPLY)

    def expected_payload_len(self) -> int:
        if self.packet_type == BwType.MEASUREMENT_REPLY:
            return self.base_payload_size
        return self.multiplication_factor * self.base_payload_size


BW_HEADER_LEN = BW_LONG.size  # 25


# --------------------------------------------------------------------------
# Batch protocol
# --------------------------------------------------------------------------


class BatchOp:
    BEGIN_REQUEST = 0
    BEGIN_REPLY = 1
    BEGIN_RESULT = 2


@dataclass(frozen=True)
class BatchPacket:
    op_id: int
    data: int = 0
    protocol: ClassVar[int] = BATCH


Packet = Union[QueryOp, CtOp, BwPacket, BatchPacket]


# --------------------------------------------------------------------------
# encode
# --------------------------------------------------------------------------


def _encode_value(kind, value) -> bytes:
    if kind in (U8, U16, U32):
        try:
            return value.to_bytes(kind, "big")
        except (OverflowError, AttributeError) as exc:
            raise EncodingError(f"{value!r} does not fit in {kind} bytes") from exc
    if kind == BOOL:
        return b"\x01" if value else b"\x00"
    if kind == IP:
        try:
            return ipaddress.IPv4Address(value).packed
        except ValueError as exc:
            raise EncodingError(str(exc)) from exc
    if kind == STR:
        return value.encode("utf-8", "surrogateescape")
    if kind == BYTES:
        return bytes(value)
    raise AssertionError(kind)


def _field(data: bytes) -> bytes:
    if len(data) > MAX_FIELD:
        raise EncodingError(f"field of {len(data)} bytes exceeds the 32-bit length prefix")
    return FIELD_LEN.pack(len(data)) + data


def _encode_field_list(op: _FieldListOp) -> bytes:
    chunks = []
    for kind, f in zip(op.layout, fields(op)):
        value = getattr(op, f.name)
        if kind == STRLIST:
            chunks.extend(_field(_encode_value(STR, name)) for name in value)
        else:
            chunks.append(_field(_encode_value(kind, value)))
    if len(chunks) > 0xFFFF:
        raise EncodingError("more than 65535 fields")
    if isinstance(op, TransferReply) and op.actual_chunk_size > len(op.data):
        raise EncodingError("actual chunk size exceeds the chunk")
    header = ENVELOPE.pack(op.protocol, op.op_id, len(chunks), 1 if op.has_payload else 0)
    return header + b"".join(chunks)


def _encode_bw(p: BwPacket) -> bytes:
    try:
        if p.is_short:
            return BW_SHORT.pack(BANDWIDTH, p.packet_type, p.token, p.peer_port)
        if p.packet_type not in (2, 3, 4, 5):
            raise EncodingError(f"unknown bandwidth packet type {p.packet_type}")
        if len(p.payload) != p.expected_payload_len():
            raise EncodingError(
                f"payload of {len(p.payload)} bytes, layout requires {p.expected_payload_len()}")
        head = BW_LONG.pack(BANDWIDTH, p.packet_type, p.token, p.peer_port, p.sequence,
                            p.send_time, p.multiplication_factor, p.base_payload_size)
    except struct.error as exc:
        raise EncodingError(str(exc)) from exc
    return head + p.payload


def encode(op: Packet) -> bytes:
    """Return the exact on-wire bytes of ``op``."""
    if isinstance(op, _FieldListOp):
        return _encode_field_list(op)
    if isinstance(op, BwPacket):
        return _encode_bw(op)
    if isinstance(op, BatchPacket):
        try:
            return BATCH_PACKET.pack(BATCH, op.op_id, op.data)
        except struct.error as exc:
            raise EncodingError(str(exc)) from exc
    raise TypeError(f"cannot encode {type(op).__name__}")


# --------------------------------------------------------------------------
# decode
# --------------------------------------------------------------------------


def _split_fields(data: bytes, count: int, offset: int) -> list[bytes]:
    out = []
    end = len(data)
    for i in range(count):
        if offset + 4 > end:
            raise TruncatedPacket(f"field {i + 1} length prefix cut off")
        (n,) = FIELD_LEN.unpack_from(data, offset)
        offset += 4
        if n > end - offset:
            raise FieldSizeMismatch(f"field {i + 1} declares {n} bytes, {end - offset} remain")
        out.append(bytes(data[offset:offset + n]))
        offset += n
    if offset != end:
        raise FieldSizeMismatch(f"{end - offset} trailing bytes after the last field")
    return out


def _decode_value(kind, raw: bytes, name: str):
    if kind in _FIXED and len(raw) != _FIXED[kind]:
        raise FieldSizeMismatch(f"{name}: expected {_FIXED[kind]} bytes, got {len(raw)}")
    if kind in (U8, U16, U32):
        return int.from_bytes(raw, "big")
    if kind == BOOL:
        return raw != b"\x00"
    if kind == IP:
        return str(ipaddress.IPv4Address(raw))
    if kind == STR:
        return raw.decode("utf-8", "surrogateescape")
    return raw


def build_op(cls, raw_fields: list[bytes]):
    """Turn the raw field list of an envelope into an instance of ``cls``."""
    layout = cls.layout
    names = [f.name for f in fields(cls)]
    if layout[-1] == STRLIST:
        fixed = len(layout) - 1
        if len(raw_fields) < fixed:
            raise FieldSizeMismatch(f"{cls.__name__} needs at least {fixed} fields")
    elif len(raw_fields) != len(layout):
        raise FieldSizeMismatch(
            f"{cls.__name__} has {len(layout)} fields, packet carries {len(raw_fields)}")
    values = []
    for i, kind in enumerate(layout):
        if kind == STRLIST:
            values.append(tuple(_decode_value(STR, r, names[i]) for r in raw_fields[i:]))
        else:
            values.append(_decode_value(kind, raw_fields[i], names[i]))
    op = cls(*values)
    if isinstance(op, TransferReply) and op.actual_chunk_size > len(op.data):
        raise FieldSizeMismatch("actual chunk size exceeds the data chunk")
    return op


def _decode_field_list(data: bytes, protocol: int):
    if len(data) < ENVELOPE.size:
        raise TruncatedPacket(f"{len(data)} bytes, envelope header needs {ENVELOPE.size}")
    _, op_id, count, _flag = ENVELOPE.unpack_from(data)
    cls = _BY_ID[protocol].get(op_id)
    if cls is None:
        raise UnknownOpId(f"protocol {protocol} has no operation {op_id}")
    return build_op(cls, _split_fields(data, count, ENVELOPE.size))


def _decode_bw(data: bytes) -> BwPacket:
    if len(data) < 2:
        raise TruncatedPacket("bandwidth packet shorter than 2 bytes")
    ptype = data[1]
    if ptype in (0, 1):
        if len(data) < BW_SHORT.size:
            raise TruncatedPacket("breakthrough packet shorter than 8 bytes")
        if len(data) != BW_SHORT.size:
            raise FieldSizeMismatch("breakthrough packet longer than 8 bytes")
        _, _, token, port = BW_SHORT.unpack(data)
        return BwPacket(ptype, token, port)
    if ptype not in (2, 3, 4, 5):
        raise UnknownOpId(f"unknown bandwidth packet type {ptype}")
    if len(data) < BW_LONG.size:
        raise TruncatedPacket(f"measurement packet header needs {BW_LONG.size} bytes")
    _, _, token, port, seq, send_time, factor, base = BW_LONG.unpack_from(data)
    pkt = BwPacket(ptype, token, port, seq, send_time, factor, base, bytes(data[BW_LONG.size:]))
    if len(pkt.payload) != pkt.expected_payload_len():
        raise FieldSizeMismatch(
            f"payload of {len(pkt.payload)} bytes, header implies {pkt.expected_payload_len()}")
    return pkt


def _decode_batch(data: bytes) -> BatchPacket:
    if len(data) < BATCH_PACKET.size:
        raise TruncatedPacket("batch packet shorter than 3 bytes")
    if len(data) != BATCH_PACKET.size:
        raise FieldSizeMismatch("batch packet longer than 3 bytes")
    _, op_id, value = BATCH_PACKET.unpack(data)
    if op_id > 2:
        raise UnknownOpId(f"unknown batch operation {op_id}")
    return BatchPacket(op_id, value)


def decode(data: bytes, expected_protocol: int | None = None) -> Packet:
    """Parse one packet.  Raises a :class:`WireError` subclass on bad input."""
    if not data:
        raise TruncatedPacket("empty packet")
    protocol = data[0]
    if expected_protocol is not None and protocol != expected_protocol:
        raise ProtocolIdMismatch(f"expected protocol {expected_protocol}, got {protocol}")
    if protocol in (QUERY, CT):
        return _decode_field_list(data, protocol)
    if protocol == BANDWIDTH:
        return _decode_bw(data)
    if protocol == BATCH:
        return _decode_batch(data)
    raise ProtocolIdMismatch(f"unknown protocol id {protocol}")


async def read_packet(stream, max_field: int = MAX_STREAM_FIELD):
    """Read one Query/CT packet from a byte stream.

    ``stream.read_exactly`` must raise on EOF.  Field lengths above
    ``max_field`` are rejected before any allocation.
    """
    head = await stream.read_exactly(ENVELOPE.size)
    protocol, op_id, count, _flag = ENVELOPE.unpack(head)
    if protocol not in (QUERY, CT):
        raise ProtocolIdMismatch(f"stream carries protocol {protocol}")
    cls = _BY_ID[protocol].get(op_id)
    if cls is None:
        raise UnknownOpId(f"protocol {protocol} has no operation {op_id}")
    raw = []
    for _ in range(count):
        (n,) = FIELD_LEN.unpack(await stream.read_exactly(4))
        if n > max_field:
            raise FieldSizeMismatch(f"field of {n} bytes exceeds stream limit {max_field}")
        raw.append(await stream.read_exactly(n) if n else b"")
    return build_op(cls, raw)
