import asyncio
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtp import wire
from opgen import any_op, field_list_op

GOLDEN = {
    "stop_query_session_1": wire.StopQuerySession(1),
    "batch_begin_request": wire.BatchPacket(wire.BatchOp.BEGIN_REQUEST),
    "batch_begin_result_ok": wire.BatchPacket(wire.BatchOp.BEGIN_RESULT, 1),
    "start_query_session_request": wire.StartQuerySessionRequest(6001, 6002, 6003, 6004),
    "start_query_session_reply": wire.StartQuerySessionReply(0xABCD, True),
    "ls_reply_two_names": wire.LsReply(9, True, ("a", "b")),
    "ls_reply_empty": wire.LsReply(9, True, ()),
    "cd_request_dotdot": wire.CdRequest(9, ".."),
    "get_reply_head": wire.GetReply(0x11, True, "10.0.0.1", 6000, 0x22, 0x33, 561282, 120000),
    "transfer_denied_bad_session": wire.TransferDenied(7, wire.DenyReason.BAD_SERVICE_SESSION),
    "progress_report": wire.ProgressReport(0x01020304, 8192),
    "transfer_reply_padded": wire.TransferReply(5, 3, True, 0, b"abc\x00"),
    "retransmission_request": wire.RetransmissionRequest(7, 1024, True),
    "breakthrough_request": wire.BwPacket(wire.BwType.BREAKTHROUGH_REQUEST, 0xDEADBEEF, 5000),
    "measurement_request": wire.BwPacket(2, 1, 5000, 7, 0x0102030405060708, 1, 4, b"wxyz"),
    "pair_second_factor2": wire.BwPacket(5, 1, 5000, 8, 0, 2, 2, b"\x01\x02\x03\x04"),
}


def load_vectors():
    out = {}
    for line in (Path(__file__).parent / "golden" / "vectors.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, hexdata = line.split(None, 1)
        out[name] = bytes.fromhex(hexdata.replace(" ", ""))
    return out


VECTORS = load_vectors()


def test_every_vector_has_an_op():
    assert set(VECTORS) == set(GOLDEN)


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_encode(name):
    assert wire.encode(GOLDEN[name]) == VECTORS[name]


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_decode(name):
    assert wire.decode(VECTORS[name]) == GOLDEN[name]


def test_transfer_reply_padding():
    op = wire.TransferReply.padded(5, b"abc", 4, True, 0)
    assert op.data == b"abc\x00"
    assert op.payload == b"abc"
    with pytest.raises(wire.EncodingError):
        wire.TransferReply.padded(5, b"abcde", 4, True, 0)


def test_payload_flag_only_on_transfer_reply():
    rng = random.Random(1)
    for cls in wire.QUERY_OPS + wire.CT_OPS:
        flag = wire.encode(field_list_op(rng, cls))[4]
        assert flag == (1 if cls is wire.TransferReply else 0)


def test_strlist_is_one_field_per_name():
    raw = wire.encode(wire.LsReply(1, True, ("x", "yy", "")))
    assert int.from_bytes(raw[2:4], "big") == 5


def test_measurement_reply_payload_is_base_size():
    p = wire.BwPacket(wire.BwType.MEASUREMENT_REPLY, 1, 2, 3, 4, 3, 5, bytes(5))
    assert len(wire.encode(p)) == wire.BW_HEADER_LEN + 5
    with pytest.raises(wire.EncodingError):
        wire.encode(wire.BwPacket(wire.BwType.MEASUREMENT_REPLY, 1, 2, 3, 4, 3, 5, bytes(15)))


# errors ------------------------------------------------------------------


def test_two_byte_input_is_truncated():
    with pytest.raises(wire.TruncatedPacket):
        wire.decode(b"\x0a\x00")


def test_empty_input_is_truncated():
    with pytest.raises(wire.TruncatedPacket):
        wire.decode(b"")


def test_every_strict_prefix_of_a_vector_fails():
    for name, raw in VECTORS.items():
        for n in range(len(raw)):
            with pytest.raises(wire.WireError):
                wire.decode(raw[:n])


def test_unknown_op_ids():
    with pytest.raises(wire.UnknownOpId):
        wire.decode(bytes([10, 11, 0, 0, 0]))
    with pytest.raises(wire.UnknownOpId):
        wire.decode(bytes([20, 7, 0, 0, 0]))
    with pytest.raises(wire.UnknownOpId):
        wire.decode(bytes([30, 6]) + bytes(30))
    with pytest.raises(wire.UnknownOpId):
        wire.decode(bytes([40, 3, 0]))


def test_protocol_mismatch():
    with pytest.raises(wire.ProtocolIdMismatch):
        wire.decode(VECTORS["progress_report"], expected_protocol=wire.QUERY)
    with pytest.raises(wire.ProtocolIdMismatch):
        wire.decode(bytes([99, 0, 0, 0, 0]))


def test_field_size_mismatch():
    # session handle carried in 3 bytes
    bad = bytes.fromhex("0a 02 0001 00 00000003 000001".replace(" ", ""))
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(bad)
    # declared length runs past the end
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(bytes.fromhex("0a0200010000000009000001"))
    # trailing garbage
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(VECTORS["stop_query_session_1"] + b"\x00")
    # wrong field count
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(bytes.fromhex("0a0200000000"[:10]))


def test_actual_chunk_size_larger_than_data_rejected():
    raw = bytearray(VECTORS["transfer_reply_padded"])
    raw[4 + 4 + 4 + 4 + 3] = 9  # actual_chunk_size = 9 > 4 data bytes
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(bytes(raw))
    with pytest.raises(wire.EncodingError):
        wire.encode(wire.TransferReply(1, 9, True, 0, b"abc"))


def test_encoding_errors():
    with pytest.raises(wire.EncodingError):
        wire.encode(wire.StartQuerySessionRequest(70000, 1, 2, 3))
    with pytest.raises(wire.EncodingError):
        wire.encode(wire.GetReply(1, True, "not-an-ip"))
    with pytest.raises(wire.EncodingError):
        wire.encode(wire.BatchPacket(0, 256))
    with pytest.raises(TypeError):
        wire.encode(object())


def test_bandwidth_payload_length_checked():
    raw = VECTORS["measurement_request"]
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(raw[:-1])
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(raw + b"!")
    with pytest.raises(wire.FieldSizeMismatch):
        wire.decode(VECTORS["breakthrough_request"] + b"!")


# stream reader -------------------------------------------------------------


class BytesStream:
    def __init__(self, data: bytes):
        self.data = data

    async def read_exactly(self, n):
        if n > len(self.data):
            raise asyncio.IncompleteReadError(self.data, n)
        out, self.data = self.data[:n], self.data[n:]
        return out


def test_read_packet_consumes_exactly_one_packet():
    a, b = VECTORS["get_reply_head"], VECTORS["transfer_reply_padded"]
    s = BytesStream(a + b)

    async def go():
        return await wire.read_packet(s), await wire.read_packet(s)

    assert asyncio.run(go()) == (GOLDEN["get_reply_head"], GOLDEN["transfer_reply_padded"])
    assert s.data == b""


def test_read_packet_limits_field_length():
    raw = bytes.fromhex("1401000501") + (1 << 30).to_bytes(4, "big")
    with pytest.raises(wire.FieldSizeMismatch):
        asyncio.run(wire.read_packet(BytesStream(raw)))


def test_read_packet_rejects_datagram_protocols():
    with pytest.raises(wire.ProtocolIdMismatch):
        asyncio.run(wire.read_packet(BytesStream(VECTORS["measurement_request"])))


# properties ----------------------------------------------------------------


@settings(max_examples=300)
@given(st.randoms(use_true_random=False))
def test_round_trip(rng):
    op = any_op(rng)
    raw = wire.encode(op)
    assert wire.decode(raw) == op
    assert wire.encode(wire.decode(raw)) == raw


@settings(max_examples=500)
@given(st.binary(max_size=80))
def test_fuzz_decode_returns_value_or_wire_error(data):
    try:
        op = wire.decode(data)
    except wire.WireError:
        return
    assert wire.decode(wire.encode(op)) == op


@settings(max_examples=300)
@given(st.sampled_from(sorted(VECTORS)), st.data())
def test_mutated_vectors_never_crash(name, data):
    raw = bytearray(VECTORS[name])
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] = data.draw(st.integers(0, 255))
    try:
        wire.decode(bytes(raw))
    except wire.WireError:
        pass
