"""Conntrack's TCP state machine, driven by header flags only.

Sequence numbers and windows are not modelled. The teardown side that sent
the first FIN is remembered so the following ACK/FIN can be attributed to
the right peer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

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
    TtlPolicy,
)

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

_FLAG_NAMES = {"S": SYN, "A": ACK, "F": FIN, "R": RST, "P": PSH}
_LONG_NAMES = {"SYN": SYN, "ACK": ACK, "FIN": FIN, "RST": RST, "PSH": PSH}


@dataclass(frozen=True)
class TcpFlags:
    syn: bool = False
    ack: bool = False
    fin: bool = False
    rst: bool = False

    @classmethod
    def from_bits(cls, bits: int) -> TcpFlags:
        return cls(bool(bits & SYN), bool(bits & ACK), bool(bits & FIN), bool(bits & RST))

    @property
    def bits(self) -> int:
        return (SYN if self.syn else 0) | (ACK if self.ack else 0) | (
            FIN if self.fin else 0
        ) | (RST if self.rst else 0)

    @classmethod
    def parse(cls, text: str) -> TcpFlags:
        """Accept ``SYN,ACK``, ``SYN-ACK``, ``syn+ack`` or compact ``SA``."""
        text = text.strip().upper()
        if text == "NONE":
            return cls()
        bits = 0
        tokens = [t for t in text.replace("-", ",").replace("+", ",").split(",") if t]
        if tokens and all(t in _LONG_NAMES for t in tokens):
            for t in tokens:
                bits |= _LONG_NAMES[t]
        elif text and all(c in _FLAG_NAMES for c in text):
            for c in text:
                bits |= _FLAG_NAMES[c]
        else:
            raise ValueError(f"cannot parse TCP flags {text!r}")
        return cls.from_bits(bits)

    def __str__(self) -> str:
        names = [n for n, on in (("SYN", self.syn), ("FIN", self.fin), ("RST", self.rst), ("ACK", self.ack)) if on]
        return "-".join(names) or "NONE"


class FlagClass(enum.Enum):
    SYN = "SYN"
    SYN_ACK = "SYN-ACK"
    ACK = "ACK"
    FIN = "FIN"
    FIN_ACK = "FIN-ACK"
    RST = "RST"
    OTHER = "OTHER"


def classify_flags(flags: TcpFlags) -> FlagClass:
    if flags.rst:
        return FlagClass.RST
    if flags.syn and flags.fin:
        return FlagClass.OTHER
    if flags.syn:
        return FlagClass.SYN_ACK if flags.ack else FlagClass.SYN
    if flags.fin:
        return FlagClass.FIN_ACK if flags.ack else FlagClass.FIN
    if flags.ack:
        return FlagClass.ACK
    return FlagClass.OTHER


@dataclass(frozen=True)
class TcpExtra:
    closer: Direction | None = None


_LIVE_STATES = {
    CtState.SYN_SENT,
    CtState.SYN_RECV,
    CtState.ESTABLISHED,
    CtState.FIN_WAIT,
    CtState.CLOSE_WAIT,
    CtState.LAST_ACK,
    CtState.TIME_WAIT,
}


def _next_state(
    state: CtState, closer: Direction | None, direction: Direction, fc: FlagClass
) -> tuple[CtState, Direction | None] | None:
    """Transition function for an existing entry; None means refuse."""
    fin = fc in (FlagClass.FIN, FlagClass.FIN_ACK)
    if state is CtState.SYN_SENT:
        if direction is Direction.REPLY and fc is FlagClass.SYN_ACK:
            return CtState.SYN_RECV, None
    elif state is CtState.SYN_RECV:
        if direction is Direction.ORIGINAL and fc is FlagClass.ACK:
            return CtState.ESTABLISHED, None
    elif state is CtState.ESTABLISHED:
        if fc is FlagClass.ACK:
            return state, None
        if fin:
            return CtState.FIN_WAIT, direction
    elif state is CtState.FIN_WAIT:
        if direction is closer:
            if fc is FlagClass.ACK:
                return state, closer
        elif fc is FlagClass.ACK:
            return CtState.CLOSE_WAIT, closer
        elif fin:
            # FIN piggybacking the ACK skips CLOSE_WAIT
            return CtState.LAST_ACK, closer
    elif state is CtState.CLOSE_WAIT:
        if direction is not closer:
            if fc is FlagClass.ACK:
                return state, closer
            if fin:
                return CtState.LAST_ACK, closer
    elif state is CtState.LAST_ACK:
        if direction is closer and fc is FlagClass.ACK:
            return CtState.TIME_WAIT, closer
    return None


def plan_tcp(
    table: ConnTable,
    tuple_: FiveTuple,
    flags: TcpFlags,
    now: int,
    direction: Direction | None = None,
    policy: TtlPolicy | None = None,
) -> Transition:
    """Work out what ``flags`` does to the table without mutating it.

    ``tuple_`` is the packet's tuple as seen on the wire. When an entry
    matches, the direction comes from the lookup; otherwise ``direction``
    (default ORIGINAL) says which way the caller believes the packet flows.
    Raises :class:`Refusal` when no legal transition applies.
    """
    if tuple_.proto is not Proto.TCP:
        raise ValueError("plan_tcp needs a TCP tuple")
    policy = policy or TtlPolicy()
    fc = classify_flags(flags)
    hit = table.lookup(tuple_)

    if hit is None:
        if (direction or Direction.ORIGINAL) is Direction.REPLY:
            raise Refusal(Reason.NO_ENTRY, "reply-direction packet without an entry")
        if fc is not FlagClass.SYN:
            raise Refusal(Reason.NO_ENTRY, f"{fc.value} without an entry")
        return Transition(
            key=tuple_,
            direction=Direction.ORIGINAL,
            state=CtState.SYN_SENT,
            unreplied=True,
            assured=False,
            ttl=policy.seconds(Proto.TCP, CtState.SYN_SENT),
            classification=CtClass.NEW,
            extra=TcpExtra(),
        )

    entry, found = hit
    if direction is not None and direction is not found:
        raise ValueError(f"direction {direction.value} contradicts table ({found.value})")
    closer = entry.extra.closer if isinstance(entry.extra, TcpExtra) else None

    if fc is FlagClass.RST and entry.state in _LIVE_STATES:
        return Transition(
            key=entry.tuple,
            direction=found,
            state=CtState.CLOSE,
            unreplied=entry.unreplied,
            assured=entry.assured,
            ttl=policy.seconds(Proto.TCP, CtState.CLOSE),
            classification=CtClass.ESTABLISHED,
            extra=entry.extra,
            destroy=True,
        )
    if entry.state is CtState.TIME_WAIT and fc is FlagClass.SYN:
        raise Refusal(Reason.TIME_WAIT_SYN, "5-tuple is in TIME_WAIT")

    nxt = _next_state(entry.state, closer, found, fc)
    if nxt is None:
        raise Refusal(
            Reason.BAD_TRANSITION, f"{fc.value} ({found.value}) in {entry.state.value}"
        )
    state, closer = nxt
    unreplied = entry.unreplied and found is Direction.ORIGINAL
    assured = entry.assured or state is CtState.ESTABLISHED
    return Transition(
        key=entry.tuple,
        direction=found,
        state=state,
        unreplied=unreplied,
        assured=assured,
        ttl=policy.seconds(Proto.TCP, state),
        classification=CtClass.ESTABLISHED,
        extra=TcpExtra(closer),
    )


def tcp_step(
    table: ConnTable,
    tuple_: FiveTuple,
    flags: TcpFlags,
    now: int,
    direction: Direction | None = None,
    policy: TtlPolicy | None = None,
) -> tuple[CtState, Event]:
    """Sweep, plan and commit one TCP packet.

    Returns the resulting state and the NEW/UPDATE event. On an RST the state
    is CLOSE and the entry's DESTROY follows in ``table.events``.
    """
    table.sweep(now)
    t = plan_tcp(table, tuple_, flags, now, direction, policy)
    events = table.commit(t, now)
    return t.state, events[0]
