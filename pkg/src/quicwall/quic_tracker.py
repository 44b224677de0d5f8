"""Stateful QUIC tracking on the connection IDs exposed in clear.

The client's first Initial opens an entry (SYN_SENT) and records its SCID.
The server's Initial must be addressed to that SCID (SYN_RECV) and supplies
the server SCID. The client's next Initial or Handshake addressed to the
server SCID completes the mapping (ESTABLISHED). From SYN_RECV on, every
packet's DCID must equal the SCID its receiver chose.

Teardown is encrypted and therefore invisible; entries only ever expire.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

from quicwall.conntable import (
    ConnTable,
    CtClass,
    CtState,
    Direction,
    Event,
    FiveTuple,
    Proto,
    Reason,
    Refusal,
    Transition,
)
from quicwall.wire import (
    DRAFT_29,
    PacketKind,
    ParseContext,
    QuicHeader,
    UnsupportedVersion,
    WireError,
    parse_datagram,
)

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    STRICT_DCID = "strict"
    TUPLE_FALLBACK = "fallback"


@dataclass(frozen=True)
class QuicConfig:
    mode: Mode = Mode.STRICT_DCID
    accepted_versions: frozenset[int] = field(default_factory=lambda: frozenset({DRAFT_29}))
    ttl: float = 30


@dataclass(frozen=True)
class QuicConnExtra:
    client_scid: bytes
    server_scid: bytes | None = None
    mode: Mode = Mode.STRICT_DCID

    @property
    def dcid_len_to_client(self) -> int:
        return len(self.client_scid)

    @property
    def dcid_len_to_server(self) -> int | None:
        return None if self.server_scid is None else len(self.server_scid)

    def expected_dcid(self, direction: Direction) -> bytes | None:
        """DCID a packet travelling in ``direction`` must carry."""
        return self.server_scid if direction is Direction.ORIGINAL else self.client_scid


# strictest first
_SEVERITY = [
    Reason.MALFORMED_QUIC,
    Reason.BAD_VERSION,
    Reason.NO_ENTRY,
    Reason.NOT_INITIAL,
    Reason.DCID_MISMATCH,
]

_NEUTRAL_KINDS = {PacketKind.RETRY, PacketKind.VERSION_NEGOTIATION, PacketKind.ZERO_RTT}


@dataclass(frozen=True)
class _Cursor:
    state: CtState
    extra: QuicConnExtra | None
    unreplied: bool
    assured: bool


def _step_header(
    cur: _Cursor, h: QuicHeader, direction: Direction, config: QuicConfig
) -> tuple[_Cursor, bool]:
    """Apply one header; returns the new cursor and whether it was neutral."""
    if h.kind in _NEUTRAL_KINDS:
        if cur.state is CtState.NONE:
            raise Refusal(Reason.NOT_INITIAL, f"{h.kind.value} cannot open a connection")
        log.info("ignoring %s packet on tracked connection", h.kind.value)
        return cur, True
    if h.version is not None and h.version not in config.accepted_versions:
        raise Refusal(Reason.BAD_VERSION, f"version 0x{h.version:08x}")

    if cur.state is CtState.NONE:
        if direction is Direction.REPLY or h.kind is PacketKind.SHORT:
            raise Refusal(Reason.NO_ENTRY, f"{h.kind.value} without a tracked connection")
        if h.kind is not PacketKind.INITIAL:
            raise Refusal(Reason.NOT_INITIAL, f"{h.kind.value} cannot open a connection")
        assert h.scid is not None
        if not h.scid:
            log.warning("zero-length client SCID: DCID checks towards the client are vacuous")
        extra = QuicConnExtra(client_scid=h.scid, mode=config.mode)
        return _Cursor(CtState.SYN_SENT, extra, True, False), False

    extra = cur.extra
    assert extra is not None
    if cur.state is CtState.SYN_SENT:
        if h.kind is not PacketKind.INITIAL:
            raise Refusal(Reason.NOT_INITIAL, f"{h.kind.value} before the server Initial")
        if direction is Direction.ORIGINAL:
            if h.scid != extra.client_scid:
                raise Refusal(Reason.DCID_MISMATCH, "client Initial with a different SCID")
            return cur, False
        if h.dcid != extra.client_scid:
            raise Refusal(Reason.DCID_MISMATCH, "server Initial not addressed to client SCID")
        assert h.scid is not None
        return _Cursor(CtState.SYN_RECV, replace(extra, server_scid=h.scid), False, False), False

    # SYN_RECV or ESTABLISHED: connection IDs are matched on every packet
    if (
        h.kind is PacketKind.SHORT
        and cur.state is CtState.ESTABLISHED
        and extra.mode is Mode.TUPLE_FALLBACK
    ):
        return cur, False
    expected = extra.expected_dcid(direction)
    if h.ambiguous or h.dcid != expected:
        raise Refusal(Reason.DCID_MISMATCH, f"{h.kind.value} DCID {h.dcid.hex() or '-'}")
    if (
        cur.state is CtState.SYN_RECV
        and direction is Direction.ORIGINAL
        and h.kind in (PacketKind.INITIAL, PacketKind.HANDSHAKE)
    ):
        return _Cursor(CtState.ESTABLISHED, extra, False, True), False
    return cur, False


def plan_quic(
    table: ConnTable,
    tuple_: FiveTuple,
    headers: Sequence[QuicHeader],
    now: int,
    direction: Direction | None = None,
    config: QuicConfig | None = None,
) -> Transition:
    """Plan the effect of one datagram's headers; raises Refusal.

    Coalesced headers are applied in order. If any of them is refused the
    whole datagram is, with the strictest reason among the refusals.
    """
    if tuple_.proto is not Proto.UDP:
        raise ValueError("QUIC runs over UDP")
    config = config or QuicConfig()
    hit = table.lookup(tuple_)
    if hit is None:
        key, found = tuple_, direction or Direction.ORIGINAL
        cur = _Cursor(CtState.NONE, None, True, False)
    else:
        entry, found = hit
        if direction is not None and direction is not found:
            raise ValueError(f"direction {direction.value} contradicts table ({found.value})")
        key = entry.tuple
        cur = _Cursor(entry.state, entry.extra, entry.unreplied, entry.assured)

    if not headers:
        raise Refusal(Reason.MALFORMED_QUIC, "no QUIC packets in datagram")
    refusals: list[Refusal] = []
    all_neutral = True
    for h in headers:
        try:
            cur, neutral = _step_header(cur, h, found, config)
        except Refusal as r:
            refusals.append(r)
            continue
        all_neutral = all_neutral and neutral
    if refusals:
        raise min(refusals, key=lambda r: _SEVERITY.index(r.reason))

    return Transition(
        key=key,
        direction=found,
        state=cur.state,
        unreplied=cur.unreplied,
        assured=cur.assured,
        ttl=config.ttl,
        classification=CtClass.NEW if hit is None else CtClass.ESTABLISHED,
        extra=cur.extra,
        neutral=all_neutral,
    )


def parse_context(table: ConnTable, config: QuicConfig | None = None) -> ParseContext:
    """Short-header DCID lengths for every tracked flow, keyed by (tuple, direction)."""
    config = config or QuicConfig()
    lengths: dict[tuple[FiveTuple, Direction], int] = {}
    for entry in table.entries():
        extra = entry.extra
        if not isinstance(extra, QuicConnExtra):
            continue
        lengths[(entry.tuple, Direction.REPLY)] = extra.dcid_len_to_client
        if extra.server_scid is not None:
            lengths[(entry.tuple, Direction.ORIGINAL)] = extra.dcid_len_to_server
    return ParseContext(config.accepted_versions, lengths)


def parse_for_flow(
    table: ConnTable, tuple_: FiveTuple, payload: bytes, config: QuicConfig | None = None
) -> list[QuicHeader]:
    """Parse ``payload`` as seen on ``tuple_``, mapping wire errors to refusals."""
    config = config or QuicConfig()
    hit = table.lookup(tuple_)
    flow = (hit[0].tuple, hit[1]) if hit else None
    try:
        return parse_datagram(payload, parse_context(table, config), flow)
    except UnsupportedVersion as e:
        raise Refusal(Reason.BAD_VERSION, str(e)) from e
    except WireError as e:
        raise Refusal(Reason.MALFORMED_QUIC, f"{type(e).__name__}: {e}") from e


def plan_quic_datagram(
    table: ConnTable,
    tuple_: FiveTuple,
    payload: bytes,
    now: int,
    direction: Direction | None = None,
    config: QuicConfig | None = None,
) -> tuple[list[QuicHeader], Transition]:
    headers = parse_for_flow(table, tuple_, payload, config)
    return headers, plan_quic(table, tuple_, headers, now, direction, config)


def quic_step(
    table: ConnTable,
    tuple_: FiveTuple,
    headers: Sequence[QuicHeader],
    now: int,
    direction: Direction | None = None,
    config: QuicConfig | None = None,
) -> tuple[CtState, Event | None]:
    """Sweep, plan and commit one datagram. The event is None for neutral packets."""
    table.sweep(now)
    t = plan_quic(table, tuple_, headers, now, direction, config)
    events = table.commit(t, now)
    return t.state, events[0] if events else None
