"""Externally visible QUIC wire image: long/short headers and coalesced packets.

Nothing here decrypts anything. Packet numbers, tokens and payloads are
carried as opaque bytes; only the fields a middlebox can read in clear are
interpreted.
"""

from __future__ import annotations

import enum
from collections.abc import Hashable, Iterable, Mapping
from dataclasses import dataclass, field

DRAFT_29 = 0xFF00001D
MAX_CID_LEN = 20
RESET_MIN_LEN = 21
RESET_TOKEN_LEN = 16

HEADER_FORM_BIT = 0x80
FIXED_BIT = 0x40


class WireError(ValueError):
    """Base class for wire decoding/encoding errors."""


class EmptyPayload(WireError):
    pass


class MalformedHeader(WireError):
    pass


class UnsupportedVersion(WireError):
    def __init__(self, version: int):
        super().__init__(f"unsupported QUIC version 0x{version:08x}")
        self.version = version


class OversizedConnectionId(WireError):
    pass


class PacketKind(enum.Enum):
    INITIAL = "Initial"
    ZERO_RTT = "0-RTT"
    HANDSHAKE = "Handshake"
    RETRY = "Retry"
    VERSION_NEGOTIATION = "VersionNegotiation"
    SHORT = "Short"

    @property
    def is_long(self) -> bool:
        return self is not PacketKind.SHORT


_LONG_TYPE_BITS = {
    PacketKind.INITIAL: 0,
    PacketKind.ZERO_RTT: 1,
    PacketKind.HANDSHAKE: 2,
    PacketKind.RETRY: 3,
}
_LONG_TYPE_FROM_BITS = {v: k for k, v in _LONG_TYPE_BITS.items()}


@dataclass(frozen=True)
class QuicHeader:
    """One QUIC packet inside a UDP datagram.

    ``scid`` is ``None`` for short headers (absent), which is different from
    an empty connection ID. ``payload_offset``/``payload_length`` delimit the
    protected region (packet number plus ciphertext) within the datagram.
    ``ambiguous`` is set on a short header parsed without a known DCID length.
    """

    kind: PacketKind
    dcid: bytes
    scid: bytes | None = None
    version: int | None = None
    payload_offset: int = 0
    payload_length: int = 0
    token: bytes = b""
    ambiguous: bool = False

    @property
    def payload_span(self) -> tuple[int, int]:
        return self.payload_offset, self.payload_length

    def payload(self, datagram: bytes) -> bytes:
        return datagram[self.payload_offset : self.payload_offset + self.payload_length]


@dataclass
class ParseContext:
    """What the parser needs to know that the wire does not say.

    Short headers carry no DCID length; ``expected_dcid_lengths`` maps a flow
    key (typically ``(FiveTuple, Direction)``) to the length the receiver
    chose. ``default_dcid_length`` applies when no flow is given or the flow
    is unknown.
    """

    accepted_versions: frozenset[int] = frozenset({DRAFT_29})
    expected_dcid_lengths: Mapping[Hashable, int] = field(default_factory=dict)
    default_dcid_length: int | None = None

    def __post_init__(self) -> None:
        self.accepted_versions = frozenset(self.accepted_versions)
        lengths = list(self.expected_dcid_lengths.values())
        if self.default_dcid_length is not None:
            lengths.append(self.default_dcid_length)
        for n in lengths:
            if not 0 <= n <= MAX_CID_LEN:
                raise ValueError(f"expected DCID length {n} outside [0, {MAX_CID_LEN}]")

    def dcid_length(self, flow: Hashable | None = None) -> int | None:
        if flow is not None and flow in self.expected_dcid_lengths:
            return self.expected_dcid_lengths[flow]
        return self.default_dcid_length


# -- variable-length integers -------------------------------------------------


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    if value < 1 << 6:
        return value.to_bytes(1, "big")
    if value < 1 << 14:
        return (value | 0x4000).to_bytes(2, "big")
    if value < 1 << 30:
        return (value | 0x8000_0000).to_bytes(4, "big")
    if value < 1 << 62:
        return (value | 0xC000_0000_0000_0000).to_bytes(8, "big")
    raise ValueError("varint too large")


def decode_varint(data: bytes, offset: int) -> tuple[int, int]:
    """Return ``(value, new_offset)``; raises MalformedHeader on truncation."""
    if offset >= len(data):
        raise MalformedHeader("truncated variable-length integer")
    size = 1 << (data[offset] >> 6)
    if offset + size > len(data):
        raise MalformedHeader("truncated variable-length integer")
    value = data[offset] & 0x3F
    for b in data[offset + 1 : offset + size]:
        value = (value << 8) | b
    return value, offset + size


# -- builders -----------------------------------------------------------------


def _check_cid(cid: bytes, what: str) -> None:
    if len(cid) > MAX_CID_LEN:
        raise OversizedConnectionId(f"{what} is {len(cid)} bytes, limit is {MAX_CID_LEN}")


def build_long_header(
    kind: PacketKind,
    version: int,
    dcid: bytes,
    scid: bytes,
    payload: bytes = b"",
    *,
    token: bytes = b"",
) -> bytes:
    """Encode one long-header packet; ``payload`` stands in for PN + ciphertext.

    For Retry the payload is the retry token plus integrity tag; for Version
    Negotiation it is the list of supported versions. Neither has a Length
    field, so both must be the last packet in a datagram.
    """
    if not kind.is_long:
        raise ValueError(f"{kind.value} is not a long header form")
    _check_cid(dcid, "DCID")
    _check_cid(scid, "SCID")
    if kind is PacketKind.VERSION_NEGOTIATION:
        if version != 0:
            raise ValueError("version negotiation packets carry version 0")
        first = HEADER_FORM_BIT
    else:
        if version == 0:
            raise ValueError("version 0 is reserved for version negotiation")
        first = HEADER_FORM_BIT | FIXED_BIT | (_LONG_TYPE_BITS[kind] << 4)
    if token and kind is not PacketKind.INITIAL:
        raise ValueError("only Initial packets carry a token")

    out = bytearray([first])
    out += version.to_bytes(4, "big")
    out += bytes([len(dcid)]) + dcid
    out += bytes([len(scid)]) + scid
    if kind is PacketKind.INITIAL:
        out += encode_varint(len(token)) + token
    if kind in (PacketKind.INITIAL, PacketKind.ZERO_RTT, PacketKind.HANDSHAKE):
        out += encode_varint(len(payload))
    out += payload
    return bytes(out)


def build_short_header(dcid: bytes, payload: bytes = b"", *, key_phase: bool = False) -> bytes:
    _check_cid(dcid, "DCID")
    first = FIXED_BIT | (0x04 if key_phase else 0)
    return bytes([first]) + dcid + payload


# -- parser -------------------------------------------------------------------


def _take(data: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(data):
        raise MalformedHeader(f"truncated {what}")
    return data[offset : offset + n], offset + n


def _parse_cid(data: bytes, offset: int, what: str) -> tuple[bytes, int]:
    if offset >= len(data):
        raise MalformedHeader(f"truncated {what} length")
    n = data[offset]
    if n > MAX_CID_LEN:
        raise MalformedHeader(f"{what} length {n} exceeds {MAX_CID_LEN}")
    return _take(data, offset + 1, n, what)


def _parse_long(data: bytes, start: int, ctx: ParseContext) -> tuple[QuicHeader, int]:
    first = data[start]
    raw_version, off = _take(data, start + 1, 4, "version")
    version = int.from_bytes(raw_version, "big")
    dcid, off = _parse_cid(data, off, "DCID")
    scid, off = _parse_cid(data, off, "SCID")

    if version == 0:
        end = len(data)
        header = QuicHeader(
            PacketKind.VERSION_NEGOTIATION, dcid, scid, 0, off, end - off
        )
        return header, end
    if version not in ctx.accepted_versions:
        raise UnsupportedVersion(version)
    if not first & FIXED_BIT:
        raise MalformedHeader("fixed bit is zero")

    kind = _LONG_TYPE_FROM_BITS[(first >> 4) & 0x03]
    token = b""
    if kind is PacketKind.RETRY:
        end = len(data)
        return QuicHeader(kind, dcid, scid, version, off, end - off), end
    if kind is PacketKind.INITIAL:
        token_len, off = decode_varint(data, off)
        token, off = _take(data, off, token_len, "token")
    length, off = decode_varint(data, off)
    if off + length > len(data):
        raise MalformedHeader("packet length exceeds datagram")
    return QuicHeader(kind, dcid, scid, version, off, length, token), off + length


def _parse_short(data: bytes, start: int, dcid_len: int | None) -> QuicHeader:
    if not data[start] & FIXED_BIT:
        raise MalformedHeader("fixed bit is zero")
    off = start + 1
    if dcid_len is None:
        return QuicHeader(
            PacketKind.SHORT, b"", None, None, off, len(data) - off, ambiguous=True
        )
    dcid, off = _take(data, off, dcid_len, "DCID")
    return QuicHeader(PacketKind.SHORT, dcid, None, None, off, len(data) - off)


def parse_datagram(
    payload: bytes, ctx: ParseContext | None = None, flow: Hashable | None = None
) -> list[QuicHeader]:
    """Split a UDP payload into its QUIC packets, in wire order.

    ``flow`` selects the expected short-header DCID length from ``ctx``.
    """
    if not payload:
        raise EmptyPayload("empty UDP payload")
    ctx = ctx or ParseContext()
    data = bytes(payload)
    headers: list[QuicHeader] = []
    offset = 0
    while offset < len(data):
        if data[offset] & HEADER_FORM_BIT:
            header, offset = _parse_long(data, offset, ctx)
        else:
            header = _parse_short(data, offset, ctx.dcid_length(flow))
            offset = len(data)
        headers.append(header)
    return headers


def coalesce(packets: Iterable[bytes]) -> bytes:
    return b"".join(packets)


# -- stateless reset shape ----------------------------------------------------


@dataclass(frozen=True)
class ShapeReport:
    plausible_short_header: bool
    meets_min_length: bool
    token_window: bytes | None

    @property
    def looks_like_reset(self) -> bool:
        return self.plausible_short_header and self.meets_min_length


def stateless_reset_shape(payload: bytes) -> ShapeReport:
    """Report whether ``payload`` could be a stateless reset.

    Such a packet is two fixed bits ``01``, at least 38 unpredictable bits and
    a 128-bit token: 21 bytes minimum. It is indistinguishable from a short
    header packet, which is why this is a shape check and nothing more.
    """
    plausible = bool(payload) and (payload[0] & 0xC0) == FIXED_BIT
    long_enough = len(payload) >= RESET_MIN_LEN
    window = bytes(payload[-RESET_TOKEN_LEN:]) if long_enough else None
    return ShapeReport(plausible, long_enough, window)


def parse_hex(text: str) -> bytes:
    """Decode a whitespace-insensitive hex dump (two hex chars per byte)."""
    cleaned = "".join(text.split())
    if cleaned.startswith(("0x", "0X")):
        cleaned = cleaned[2:]
    return bytes.fromhex(cleaned)
