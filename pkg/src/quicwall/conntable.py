"""Connection state table shared by the TCP, UDP and QUIC trackers.

Time is a logical clock in integer milliseconds supplied by the caller. The
table never reads the wall clock.
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field, replace
from typing import Any


class Proto(enum.Enum):
    TCP = "tcp"
    UDP = "udp"

    @property
    def number(self) -> int:
        return 6 if self is Proto.TCP else 17


class Direction(enum.Enum):
    ORIGINAL = "original"
    REPLY = "reply"

    def flip(self) -> Direction:
        return Direction.REPLY if self is Direction.ORIGINAL else Direction.ORIGINAL


class CtState(enum.Enum):
    NONE = "NONE"
    SYN_SENT = "SYN_SENT"
    SYN_RECV = "SYN_RECV"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT = "FIN_WAIT"
    CLOSE_WAIT = "CLOSE_WAIT"
    LAST_ACK = "LAST_ACK"
    TIME_WAIT = "TIME_WAIT"
    CLOSE = "CLOSE"
    UDP_NEW = "UDP_NEW"
    UDP_REPLIED = "UDP_REPLIED"
    UDP_ASSURED = "UDP_ASSURED"


class CtClass(enum.Enum):
    """ctstate classification a firewall rule matches against."""

    NEW = "NEW"
    ESTABLISHED = "ESTABLISHED"
    RELATED = "RELATED"
    INVALID = "INVALID"


class Reason(str, enum.Enum):
    """Closed vocabulary of tracker refusal reasons."""

    NO_ENTRY = "NoEntry"
    DCID_MISMATCH = "DcidMismatch"
    NOT_INITIAL = "NotInitial"
    BAD_VERSION = "BadVersion"
    MALFORMED_QUIC = "MalformedQuic"
    TIME_WAIT_SYN = "TimeWaitSyn"
    BAD_TRANSITION = "BadTransition"

    def __str__(self) -> str:
        return self.value


REASON_HELP = {
    Reason.NO_ENTRY: "packet needs an existing entry but none matches its 5-tuple",
    Reason.DCID_MISMATCH: "QUIC DCID differs from the connection ID stored for that direction",
    Reason.NOT_INITIAL: "QUIC packet cannot open or advance a connection in this state",
    Reason.BAD_VERSION: "QUIC long header with a version outside the accepted set",
    Reason.MALFORMED_QUIC: "UDP payload is not a well-formed QUIC datagram",
    Reason.TIME_WAIT_SYN: "TCP SYN on a 5-tuple quarantined in TIME_WAIT",
    Reason.BAD_TRANSITION: "TCP flags do not advance any legal transition",
}


class Refusal(Exception):
    """A tracker declined a packet; callers translate this to DROP."""

    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class ClockWentBackwards(Exception):
    pass


@dataclass(frozen=True)
class FiveTuple:
    proto: Proto
    src_ip: ipaddress.IPv4Address
    dst_ip: ipaddress.IPv4Address
    src_port: int
    dst_port: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "proto", Proto(self.proto))
        object.__setattr__(self, "src_ip", ipaddress.IPv4Address(self.src_ip))
        object.__setattr__(self, "dst_ip", ipaddress.IPv4Address(self.dst_ip))
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port {port} out of range")

    def reversed(self) -> FiveTuple:
        return FiveTuple(self.proto, self.dst_ip, self.src_ip, self.dst_port, self.src_port)

    def __str__(self) -> str:
        return (
            f"{self.proto.value} src={self.src_ip}:{self.src_port} "
            f"dst={self.dst_ip}:{self.dst_port}"
        )


@dataclass
class ConnEntry:
    tuple: FiveTuple
    state: CtState
    unreplied: bool = True
    assured: bool = False
    expiry: int = 0
    extra: Any = None


class EventKind(enum.Enum):
    NEW = "NEW"
    UPDATE = "UPDATE"
    DESTROY = "DESTROY"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    at: int
    snapshot: ConnEntry

    def format(self) -> str:
        e = self.snapshot
        parts = [f"[{self.kind.value}]", e.tuple.proto.value, e.state.value]
        parts.append(f"src={e.tuple.src_ip}:{e.tuple.src_port}")
        parts.append(f"dst={e.tuple.dst_ip}:{e.tuple.dst_port}")
        if e.unreplied:
            parts.append("UNREPLIED")
        if e.assured:
            parts.append("ASSURED")
        parts.append(f"t={self.at}")
        return " ".join(parts)


@dataclass
class TtlPolicy:
    """Entry lifetimes in seconds, keyed by ``(proto, state)``."""

    udp: float = 30
    tcp_established: float = 7440
    tcp_time_wait: float = 120
    tcp_close: float = 10
    tcp_transient: float = 60
    overrides: dict[tuple[Proto, CtState], float] = field(default_factory=dict)

    def seconds(self, proto: Proto, state: CtState) -> float:
        if (proto, state) in self.overrides:
            return self.overrides[(proto, state)]
        if proto is Proto.UDP:
            return self.udp
        if state is CtState.ESTABLISHED:
            return self.tcp_established
        if state is CtState.TIME_WAIT:
            return self.tcp_time_wait
        if state is CtState.CLOSE:
            return self.tcp_close
        return self.tcp_transient


@dataclass(frozen=True)
class Transition:
    """A planned table mutation, produced by a tracker without side effects.

    ``key`` is the entry's original-direction tuple. ``destroy`` marks an
    RST-style close: the entry moves to CLOSE and is removed in the same step.
    ``neutral`` transitions are accepted but touch nothing.
    """

    key: FiveTuple
    direction: Direction
    state: CtState
    unreplied: bool
    assured: bool
    ttl: float
    classification: CtClass
    extra: Any = None
    destroy: bool = False
    neutral: bool = False


class ConnTable:
    def __init__(self) -> None:
        self._entries: dict[FiveTuple, ConnEntry] = {}
        self.events: list[Event] = []
        self._last_sweep: int | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[ConnEntry]:
        return list(self._entries.values())

    def lookup(self, tuple_: FiveTuple) -> tuple[ConnEntry, Direction] | None:
        entry = self._entries.get(tuple_)
        if entry is not None:
            return entry, Direction.ORIGINAL
        entry = self._entries.get(tuple_.reversed())
        if entry is not None:
            return entry, Direction.REPLY
        return None

    def _emit(self, kind: EventKind, at: int, entry: ConnEntry) -> Event:
        event = Event(kind, at, replace(entry))
        self.events.append(event)
        return event

    def apply(
        self,
        tuple_: FiveTuple,
        state: CtState,
        *,
        unreplied: bool,
        assured: bool,
        ttl: float,
        now: int,
        extra: Any = None,
    ) -> Event:
        """Insert (NEW) or mutate (UPDATE) the entry keyed by ``tuple_``."""
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        expiry = now + int(round(ttl * 1000))
        entry = self._entries.get(tuple_)
        if entry is None:
            entry = ConnEntry(tuple_, state, unreplied, assured and not unreplied, expiry, extra)
            self._entries[tuple_] = entry
            return self._emit(EventKind.NEW, now, entry)
        entry.state = state
        entry.unreplied = unreplied
        entry.assured = assured and not unreplied
        entry.expiry = expiry
        if extra is not None:
            entry.extra = extra
        return self._emit(EventKind.UPDATE, now, entry)

    def remove(self, tuple_: FiveTuple, now: int) -> Event:
        entry = self._entries.pop(tuple_)
        return self._emit(EventKind.DESTROY, now, entry)

    def commit(self, t: Transition, now: int) -> list[Event]:
        if t.neutral:
            return []
        events = [
            self.apply(
                t.key,
                t.state,
                unreplied=t.unreplied,
                assured=t.assured,
                ttl=t.ttl,
                now=now,
                extra=t.extra,
            )
        ]
        if t.destroy:
            events.append(self.remove(t.key, now))
        return events

    def sweep(self, now: int) -> list[Event]:
        """Destroy every entry with ``expiry <= now``."""
        if self._last_sweep is not None and now < self._last_sweep:
            raise ClockWentBackwards(f"sweep({now}) after sweep({self._last_sweep})")
        self._last_sweep = now
        expired = sorted(
            (e for e in self._entries.values() if e.expiry <= now),
            key=lambda e: (e.expiry, str(e.tuple)),
        )
        return [self.remove(e.tuple, now) for e in expired]

    def next_expiry(self) -> int | None:
        return min((e.expiry for e in self._entries.values()), default=None)

    def dump(self) -> list[str]:
        lines = []
        for e in sorted(self._entries.values(), key=lambda e: str(e.tuple)):
            flags = (" UNREPLIED" if e.unreplied else "") + (" ASSURED" if e.assured else "")
            lines.append(f"{e.tuple} {e.state.value}{flags} expires={e.expiry}")
        return lines
