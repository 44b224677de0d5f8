import pytest
from hypothesis import given
from hypothesis import strategies as st

from quicwall.conntable import (
    ClockWentBackwards,
    ConnTable,
    CtState,
    Direction,
    EventKind,
    FiveTuple,
    Proto,
    TtlPolicy,
)

UP = FiveTuple(Proto.UDP, "192.168.79.132", "192.168.79.128", 50000, 443)


def _apply(table, tuple_=UP, *, now, ttl=30, state=CtState.UDP_NEW, unreplied=True):
    return table.apply(tuple_, state, unreplied=unreplied, assured=False, ttl=ttl, now=now)


def test_lookup_both_orientations():
    table = ConnTable()
    assert table.lookup(UP) is None
    _apply(table, now=0)
    entry, d = table.lookup(UP)
    assert d is Direction.ORIGINAL
    entry2, d2 = table.lookup(UP.reversed())
    assert entry2 is entry and d2 is Direction.REPLY


def test_reversal_is_involution():
    assert UP.reversed().reversed() == UP
    assert UP.reversed() != UP


def test_apply_emits_new_then_update():
    table = ConnTable()
    first = _apply(table, now=0)
    assert first.kind is EventKind.NEW and first.snapshot.unreplied
    assert first.format() == "[NEW] udp UDP_NEW src=192.168.79.132:50000 dst=192.168.79.128:443 UNREPLIED t=0"
    second = _apply(table, now=5, state=CtState.UDP_REPLIED, unreplied=False)
    assert second.kind is EventKind.UPDATE
    assert first.snapshot.state is CtState.UDP_NEW  # snapshots are copies


def test_apply_rejects_nonpositive_ttl():
    with pytest.raises(ValueError):
        _apply(ConnTable(), now=0, ttl=0)


def test_assured_never_with_unreplied():
    table = ConnTable()
    ev = table.apply(UP, CtState.UDP_NEW, unreplied=True, assured=True, ttl=30, now=0)
    assert not ev.snapshot.assured


def test_sweep_boundary():
    table = ConnTable()
    _apply(table, now=0, ttl=0.030)  # expiry = 30 ms
    assert table.sweep(29) == []
    assert len(table) == 1
    [ev] = table.sweep(30)
    assert ev.kind is EventKind.DESTROY
    assert table.lookup(UP) is None


def test_refresh_moves_expiry():
    table = ConnTable()
    _apply(table, now=0)
    _apply(table, now=25_000)
    assert table.lookup(UP)[0].expiry == 55_000
    assert table.sweep(54_999) == []
    assert [e.kind for e in table.sweep(55_000)] == [EventKind.DESTROY]


def test_apply_after_destroy_is_new():
    table = ConnTable()
    _apply(table, now=0)
    table.sweep(30_000)
    assert _apply(table, now=30_000).kind is EventKind.NEW


def test_sweep_empty_and_clock():
    table = ConnTable()
    assert table.sweep(10) == []
    with pytest.raises(ClockWentBackwards):
        table.sweep(9)


def test_ttl_policy_defaults():
    p = TtlPolicy()
    assert p.seconds(Proto.UDP, CtState.UDP_ASSURED) == 30
    assert p.seconds(Proto.TCP, CtState.ESTABLISHED) == 7440
    assert p.seconds(Proto.TCP, CtState.TIME_WAIT) == 120
    assert p.seconds(Proto.TCP, CtState.SYN_SENT) == 60
    assert TtlPolicy(overrides={(Proto.UDP, CtState.UDP_NEW): 5}).seconds(Proto.UDP, CtState.UDP_NEW) == 5


def test_dump_format():
    table = ConnTable()
    _apply(table, now=0)
    assert table.dump() == [
        "udp src=192.168.79.132:50000 dst=192.168.79.128:443 UDP_NEW UNREPLIED expires=30000"
    ]


TUPLES = [FiveTuple(Proto.UDP, "10.0.0.1", "10.0.0.2", 1000 + i, 443) for i in range(3)]

ops = st.lists(
    st.one_of(
        st.tuples(st.just("apply"), st.integers(0, 2), st.integers(0, 5_000), st.integers(1, 10)),
        st.tuples(st.just("sweep"), st.integers(0, 5_000)),
    ),
    max_size=60,
)


@given(ops)
def test_event_log_invariants(script):
    table = ConnTable()
    now = 0
    for op in script:
        if op[0] == "apply":
            _, i, gap, ttl = op
            now += gap
            table.sweep(now)
            _apply(table, TUPLES[i], now=now, ttl=ttl)
        else:
            now += op[1]
            table.sweep(now)
        news = sum(e.kind is EventKind.NEW for e in table.events)
        gone = sum(e.kind is EventKind.DESTROY for e in table.events)
        assert len(table) == news - gone
        for e in table.entries():
            assert e.expiry > now

    live: dict = {}
    for ev in table.events:
        t = ev.snapshot.tuple
        if ev.kind is EventKind.NEW:
            assert not live.get(t)
            live[t] = True
        else:
            assert live.get(t), "UPDATE/DESTROY without a live NEW"
            if ev.kind is EventKind.DESTROY:
                live[t] = False
    for t, alive in live.items():
        assert (table.lookup(t) is not None) == alive
