import time

import pytest
from drivers import UDP_UP, udp_exhaustive
from hypothesis import given
from hypothesis import strategies as st

from quicwall.conntable import ConnTable, CtState, Direction, EventKind, Reason, Refusal, TtlPolicy
from quicwall.udp_tracker import udp_step

UP, DOWN = UDP_UP, UDP_UP.reversed()


def test_new_replied_assured():
    table = ConnTable()
    s1, e1 = udp_step(table, UP, 0)
    s2, e2 = udp_step(table, DOWN, 1)
    s3, e3 = udp_step(table, UP, 2)
    assert [s1, s2, s3] == [CtState.UDP_NEW, CtState.UDP_REPLIED, CtState.UDP_ASSURED]
    assert [e.kind for e in (e1, e2, e3)] == [EventKind.NEW, EventKind.UPDATE, EventKind.UPDATE]
    assert e1.snapshot.unreplied and not e2.snapshot.unreplied and e3.snapshot.assured


def test_refresh_arithmetic():
    table = ConnTable()
    udp_step(table, UP, 0)
    udp_step(table, UP, 25_000)
    assert table.lookup(UP)[0].expiry == 55_000


def test_reply_without_entry_refused():
    with pytest.raises(Refusal) as exc:
        udp_step(ConnTable(), DOWN, 0, Direction.REPLY)
    assert exc.value.reason is Reason.NO_ENTRY


def test_configurable_ttl():
    table = ConnTable()
    udp_step(table, UP, 0, policy=TtlPolicy(udp=5))
    assert table.lookup(UP)[0].expiry == 5_000


def test_exhaustive_oracle_equivalence():
    start = time.perf_counter()
    covered, mismatches = udp_exhaustive(5)
    assert mismatches == []
    assert covered == sum(8**k for k in range(1, 6))
    assert time.perf_counter() - start < 10


@given(
    gaps=st.lists(st.integers(1_000, 29_999), min_size=1, max_size=50),
)
def test_server_side_keepalive_holds_entry_open(gaps):
    table = ConnTable()
    udp_step(table, UP, 0)
    udp_step(table, DOWN, 1)
    now = 1
    while now < 600_000:
        for gap in gaps:
            now += gap
            udp_step(table, DOWN, now)
    assert now >= 600_000
    assert sum(e.kind is EventKind.NEW for e in table.events) == 1
    assert not any(e.kind is EventKind.DESTROY for e in table.events)


@given(st.integers(30_000, 100_000))
def test_gap_of_ttl_or_more_loses_entry(gap):
    table = ConnTable()
    udp_step(table, UP, 0)
    with pytest.raises(Refusal):
        udp_step(table, DOWN, gap, Direction.REPLY)
