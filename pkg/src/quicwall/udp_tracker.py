"""Naive UDP pseudo-connection tracking.

Every matching datagram refreshes the entry. Nothing in a datagram can tear
the entry down, so whoever keeps sending on the tuple keeps it alive.
"""

from __future__ import annotations

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


def plan_udp(
    table: ConnTable,
    tuple_: FiveTuple,
    now: int,
    direction: Direction | None = None,
    policy: TtlPolicy | None = None,
) -> Transition:
    if tuple_.proto is not Proto.UDP:
        raise ValueError("plan_udp needs a UDP tuple")
    ttl = (policy or TtlPolicy()).udp
    hit = table.lookup(tuple_)
    if hit is None:
        if (direction or Direction.ORIGINAL) is Direction.REPLY:
            raise Refusal(Reason.NO_ENTRY, "reply-direction datagram without an entry")
        return Transition(
            tuple_, Direction.ORIGINAL, CtState.UDP_NEW, True, False, ttl, CtClass.NEW
        )

    entry, found = hit
    if direction is not None and direction is not found:
        raise ValueError(f"direction {direction.value} contradicts table ({found.value})")
    if found is Direction.REPLY:
        state = CtState.UDP_ASSURED if entry.assured else CtState.UDP_REPLIED
        return Transition(
            entry.tuple, found, state, False, entry.assured, ttl, CtClass.ESTABLISHED
        )
    if entry.unreplied:
        state, assured = CtState.UDP_NEW, False
    else:
        state, assured = CtState.UDP_ASSURED, True
    return Transition(
        entry.tuple, found, state, entry.unreplied, assured, ttl, CtClass.ESTABLISHED
    )


def udp_step(
    table: ConnTable,
    tuple_: FiveTuple,
    now: int,
    direction: Direction | None = None,
    policy: TtlPolicy | None = None,
) -> tuple[CtState, Event]:
    table.sweep(now)
    t = plan_udp(table, tuple_, now, direction, policy)
    return t.state, table.commit(t, now)[0]
