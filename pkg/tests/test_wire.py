import random

import pytest
from aioquic.buffer import Buffer
from aioquic.quic.packet import QuicPacketType, pull_quic_header
from hypothesis import given
from hypothesis import strategies as st

from quicwall.wire import (
    DRAFT_29,
    EmptyPayload,
    MalformedHeader,
    OversizedConnectionId,
    PacketKind,
    ParseContext,
    UnsupportedVersion,
    WireError,
    build_long_header,
    build_short_header,
    coalesce,
    decode_varint,
    encode_varint,
    parse_datagram,
    parse_hex,
    stateless_reset_shape,
)

DCID = bytes.fromhex("0001020304050607")
SCID = bytes.fromhex("08090a0b0c0d0e0f")

cids = st.binary(min_size=0, max_size=20)
delimited_kinds = st.sampled_from([PacketKind.INITIAL, PacketKind.ZERO_RTT, PacketKind.HANDSHAKE])


def test_initial_layout_matches_hand_assembly():
    pkt = build_long_header(PacketKind.INITIAL, DRAFT_29, DCID, SCID, b"\xaa\xbb\xcc\xdd")
    expected = (
        bytes([0xC0])
        + bytes.fromhex("ff00001d")
        + b"\x08" + DCID
        + b"\x08" + SCID
        + b"\x00"  # token length
        + b"\x04"  # length varint
        + b"\xaa\xbb\xcc\xdd"
    )
    assert pkt == expected
    [h] = parse_datagram(pkt)
    assert h.kind is PacketKind.INITIAL
    assert (h.version, h.dcid, h.scid) == (0xFF00001D, DCID, SCID)
    assert h.payload(pkt) == b"\xaa\xbb\xcc\xdd"


@pytest.mark.parametrize(
    "kind, ref",
    [(PacketKind.INITIAL, QuicPacketType.INITIAL), (PacketKind.HANDSHAKE, QuicPacketType.HANDSHAKE)],
)
def test_long_header_agrees_with_reference_dissector(kind, ref):
    rng = random.Random(7)
    for _ in range(50):
        dcid, scid = rng.randbytes(rng.randint(0, 20)), rng.randbytes(rng.randint(0, 20))
        pkt = build_long_header(kind, DRAFT_29, dcid, scid, rng.randbytes(rng.randint(1, 300)))
        theirs = pull_quic_header(Buffer(data=pkt), host_cid_length=8)
        [ours] = parse_datagram(pkt)
        assert theirs.packet_type is ref
        assert theirs.version == ours.version
        assert theirs.destination_cid == ours.dcid
        assert theirs.source_cid == ours.scid
        assert theirs.packet_length == ours.payload_offset + ours.payload_length


def test_short_header_agrees_with_reference_dissector():
    pkt = build_short_header(DCID, b"\x11" * 20)
    theirs = pull_quic_header(Buffer(data=pkt), host_cid_length=8)
    [ours] = parse_datagram(pkt, ParseContext(default_dcid_length=8))
    assert theirs.destination_cid == ours.dcid == DCID


def test_short_header_with_known_length():
    pkt = build_short_header(DCID, b"ciphertext")
    [h] = parse_datagram(pkt, ParseContext(expected_dcid_lengths={"flow": 8}), flow="flow")
    assert h.kind is PacketKind.SHORT
    assert h.dcid == DCID and h.scid is None and not h.ambiguous
    assert h.payload(pkt) == b"ciphertext"


def test_short_header_without_expectation_is_ambiguous():
    [h] = parse_datagram(build_short_header(DCID, b"x"))
    assert h.ambiguous and h.dcid == b""


def test_empty_payload():
    with pytest.raises(EmptyPayload):
        parse_datagram(b"")


def test_initial_first_byte_bits():
    pkt = build_long_header(PacketKind.INITIAL, DRAFT_29, DCID, SCID, b"abcd")
    assert pkt[0] >> 6 == 0b11
    assert (pkt[0] >> 4) & 0b11 == 0b00


def test_oversized_cids_rejected():
    with pytest.raises(OversizedConnectionId):
        build_long_header(PacketKind.INITIAL, DRAFT_29, bytes(21), SCID)
    with pytest.raises(OversizedConnectionId):
        build_long_header(PacketKind.INITIAL, DRAFT_29, DCID, bytes(21))
    with pytest.raises(OversizedConnectionId):
        build_short_header(bytes(21))


def test_oversized_cid_length_on_wire_is_malformed():
    pkt = bytearray(build_long_header(PacketKind.INITIAL, DRAFT_29, DCID, SCID, b"abcd"))
    pkt[5] = 21
    with pytest.raises(MalformedHeader):
        parse_datagram(bytes(pkt))


def test_short_header_sizes():
    pkt = build_short_header(bytes(5), bytes(16))
    assert len(pkt) == 22 and 0x40 <= pkt[0] <= 0x7F
    assert len(build_short_header(b"", b"\x00")) == 2


def test_wrong_expected_length_shows_implicit_length_hazard():
    dcid = bytes.fromhex("a1a2a3a4a5a6a7a8")
    pkt = build_short_header(dcid, b"\xff" * 16)
    [right] = parse_datagram(pkt, ParseContext(default_dcid_length=8))
    [wrong] = parse_datagram(pkt, ParseContext(default_dcid_length=4))
    assert right.dcid == dcid
    assert wrong.dcid == dcid[:4] != right.dcid


def test_unsupported_version():
    pkt = build_long_header(PacketKind.INITIAL, 0x00000001, DCID, SCID, b"abcd")
    with pytest.raises(UnsupportedVersion) as exc:
        parse_datagram(pkt)
    assert exc.value.version == 1
    [h] = parse_datagram(pkt, ParseContext(accepted_versions={1, DRAFT_29}))
    assert h.version == 1


def test_version_negotiation_ignores_type_bits():
    pkt = build_long_header(PacketKind.VERSION_NEGOTIATION, 0, DCID, SCID, DRAFT_29.to_bytes(4, "big"))
    for first in (0x80, 0xFF, 0xA5):
        [h] = parse_datagram(bytes([first]) + pkt[1:])
        assert h.kind is PacketKind.VERSION_NEGOTIATION


def test_retry_consumes_rest():
    pkt = build_long_header(PacketKind.RETRY, DRAFT_29, DCID, SCID, b"token" + bytes(16))
    [h] = parse_datagram(pkt)
    assert h.kind is PacketKind.RETRY and h.payload_length == 21


def test_initial_token_is_skipped():
    pkt = build_long_header(PacketKind.INITIAL, DRAFT_29, DCID, SCID, b"pn", token=b"tok")
    [h] = parse_datagram(pkt)
    assert h.token == b"tok" and h.payload(pkt) == b"pn"


def test_fixed_bit_zero_is_malformed():
    pkt = bytearray(build_long_header(PacketKind.HANDSHAKE, DRAFT_29, DCID, SCID, b"x"))
    pkt[0] &= ~0x40
    with pytest.raises(MalformedHeader):
        parse_datagram(bytes(pkt))
    with pytest.raises(MalformedHeader):
        parse_datagram(b"\x00" + DCID, ParseContext(default_dcid_length=8))


def test_length_past_end_is_malformed():
    pkt = build_long_header(PacketKind.HANDSHAKE, DRAFT_29, DCID, SCID, b"abcdef")
    with pytest.raises(MalformedHeader):
        parse_datagram(pkt[:-1])


def test_parse_context_rejects_bad_lengths():
    with pytest.raises(ValueError):
        ParseContext(expected_dcid_lengths={"f": 21})
    with pytest.raises(ValueError):
        ParseContext(default_dcid_length=-1)


@pytest.mark.parametrize(
    "value, encoded",
    [
        (37, "25"),
        (15293, "7bbd"),
        (494878333, "9d7f3e7d"),
        (151288809941952652, "c2197c5eff14e88c"),
    ],
)
def test_varint_known_encodings(value, encoded):
    # sample encodings published with the QUIC transport RFC
    assert encode_varint(value).hex() == encoded
    assert decode_varint(bytes.fromhex(encoded), 0) == (value, len(encoded) // 2)


@given(st.integers(0, 2**62 - 1))
def test_varint_roundtrip(n):
    data = encode_varint(n)
    assert decode_varint(data + b"junk", 0) == (n, len(data))


def test_parse_hex():
    assert parse_hex("0x c0 FF\n00") == b"\xc0\xff\x00"
    with pytest.raises(ValueError):
        parse_hex("zz")


def _random_long(rng: random.Random) -> tuple[PacketKind, bytes, bytes, bytes, bytes]:
    kind = rng.choice([PacketKind.INITIAL, PacketKind.ZERO_RTT, PacketKind.HANDSHAKE])
    dcid = rng.randbytes(rng.randint(0, 20))
    scid = rng.randbytes(rng.randint(0, 20))
    payload = rng.randbytes(rng.randint(0, 200))
    token = rng.randbytes(rng.randint(0, 30)) if kind is PacketKind.INITIAL else b""
    return kind, dcid, scid, payload, token


def test_thousand_random_roundtrips():
    rng = random.Random(29)
    for _ in range(1000):
        kind, dcid, scid, payload, token = _random_long(rng)
        pkt = build_long_header(kind, DRAFT_29, dcid, scid, payload, token=token)
        [h] = parse_datagram(pkt)
        assert (h.kind, h.version, h.dcid, h.scid, h.token) == (kind, DRAFT_29, dcid, scid, token)
        assert h.payload(pkt) == payload
        assert h.payload_offset + h.payload_length == len(pkt)


def test_thousand_random_coalesced_splits():
    rng = random.Random(30)
    for _ in range(1000):
        parts = [_random_long(rng) for _ in range(rng.randint(1, 5))]
        wires = [build_long_header(k, DRAFT_29, d, s, p, token=t) for k, d, s, p, t in parts]
        tail = None
        if rng.random() < 0.5:
            tail = rng.randbytes(rng.randint(0, 20))
            wires.append(build_short_header(tail, rng.randbytes(rng.randint(1, 50))))
        datagram = coalesce(wires)
        ctx = ParseContext(default_dcid_length=len(tail) if tail is not None else None)
        headers = parse_datagram(datagram, ctx)
        assert len(headers) == len(wires)
        for (k, d, s, p, _), h in zip(parts, headers):
            assert (h.kind, h.dcid, h.scid) == (k, d, s)
            assert h.payload(datagram) == p
        if tail is not None:
            assert headers[-1].kind is PacketKind.SHORT and headers[-1].dcid == tail


@given(kind=delimited_kinds, dcid=cids, scid=cids, payload=st.binary(max_size=300))
def test_roundtrip_property(kind, dcid, scid, payload):
    pkt = build_long_header(kind, DRAFT_29, dcid, scid, payload)
    [h] = parse_datagram(pkt)
    assert (h.kind, h.dcid, h.scid) == (kind, dcid, scid)
    assert h.payload(pkt) == payload


@given(dcid=cids, payload=st.binary(max_size=100))
def test_short_roundtrip_property(dcid, payload):
    pkt = build_short_header(dcid, payload)
    [h] = parse_datagram(pkt, ParseContext(default_dcid_length=len(dcid)))
    assert h.dcid == dcid and h.payload(pkt) == payload


def test_fuzz_only_declared_errors():
    rng = random.Random(10_000)
    ctxs = [ParseContext(), ParseContext(default_dcid_length=8)]
    outcomes = {"ok": 0, "error": 0}
    for i in range(10_000):
        data = rng.randbytes(rng.randint(0, 64))
        if i % 3 == 0 and data:
            # bias toward long headers with the accepted version so deeper paths run
            data = bytes([data[0] | 0xC0]) + DRAFT_29.to_bytes(4, "big") + data[1:]
        try:
            headers = parse_datagram(data, ctxs[i % 2])
        except WireError:
            outcomes["error"] += 1
            continue
        outcomes["ok"] += 1
        for h in headers:
            end = h.payload_offset + h.payload_length
            assert 0 <= h.payload_offset <= end <= len(data)
    assert outcomes["ok"] > 0 and outcomes["error"] > 0


@given(st.binary(min_size=1, max_size=80))
def test_fuzz_property(data):
    try:
        parse_datagram(data, ParseContext(default_dcid_length=4))
    except WireError:
        pass


def test_shape_examples():
    shape = stateless_reset_shape(bytes([0x40]) + bytes(20))
    assert shape.plausible_short_header and shape.meets_min_length
    assert shape.token_window == bytes(16)
    short = stateless_reset_shape(bytes([0x40]) + bytes(19))
    assert short.plausible_short_header and not short.meets_min_length
    assert short.token_window is None
    assert not stateless_reset_shape(b"").looks_like_reset


def test_data_packet_is_reset_shaped():
    pkt = build_short_header(bytes(5), random.Random(1).randbytes(16))
    assert stateless_reset_shape(pkt).looks_like_reset


def _reset_shaped(rng: random.Random, length: int) -> bytes:
    return bytes([0x40 | rng.randrange(0x40)]) + rng.randbytes(length - 1)


def test_reset_shaped_packets_parse_as_short_headers():
    rng = random.Random(21)
    for _ in range(1000):
        pkt = _reset_shaped(rng, rng.randint(21, 200))
        accepted_under = [
            n for n in range(21)
            if parse_datagram(pkt, ParseContext(default_dcid_length=n))[0].kind is PacketKind.SHORT
        ]
        assert accepted_under == list(range(21))


@given(st.binary(max_size=64))
def test_shape_flags_exactly_fixed_bit_and_length(data):
    expected = len(data) >= 21 and data[0] >> 6 == 0b01
    assert stateless_reset_shape(data).looks_like_reset == expected
