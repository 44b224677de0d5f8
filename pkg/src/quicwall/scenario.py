"""Deterministic client/server/attacker simulation through firewall + tracker.

Each packet is handled the way netfilter handles it: the table is swept at
the packet's timestamp, the tracker plans a transition, the ruleset rules
on the resulting ctstate, and the transition is committed only if the packet
is accepted. A dropped packet never creates or refreshes an entry.
"""

from __future__ import annotations

import enum
import ipaddress
import random
import re
from collections.abc import Callable
from dataclasses import dataclass, field

from quicwall.capture import Capture, CapturedPacket
from quicwall.conntable import (
    ConnTable,
    CtClass,
    CtState,
    Event,
    FiveTuple,
    Proto,
    Reason,
    Refusal,
    TtlPolicy,
)
from quicwall.firewall import Action, Chain, Ruleset, Verdict, default_ruleset, evaluate
from quicwall.quic_tracker import QuicConfig, parse_for_flow, plan_quic
from quicwall.tcp_tracker import TcpFlags, plan_tcp
from quicwall.udp_tracker import plan_udp
from quicwall.wire import (
    DRAFT_29,
    RESET_MIN_LEN,
    PacketKind,
    build_long_header,
    build_short_header,
    parse_hex,
)

CLIENT_IP = ipaddress.IPv4Address("192.168.79.132")
SERVER_IP = ipaddress.IPv4Address("192.168.79.128")
CLIENT_PORT = 50000
SERVER_PORT = 443

class ScenarioError(Exception):
    pass


class TrackerKind(enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    QUIC = "quic"


class DcidStrategy(enum.Enum):
    RANDOM = "random"
    FIXED = "fixed"
    COPY = "copy"


Packet = TcpFlags | bytes


@dataclass(frozen=True)
class Step:
    time_ms: int
    actor: str
    tuple: FiveTuple
    packet: Packet


@dataclass
class Scenario:
    name: str
    steps: list[Step]
    tracker: TrackerKind = TrackerKind.UDP
    actors: dict[str, ipaddress.IPv4Address] = field(
        default_factory=lambda: {"client": CLIENT_IP, "server": SERVER_IP, "attacker": SERVER_IP}
    )
    ruleset: Ruleset = field(default_factory=default_ruleset)

    def validate(self) -> None:
        last = None
        for i, step in enumerate(self.steps, start=1):
            if last is not None and step.time_ms < last:
                raise ScenarioError(f"step {i}: time {step.time_ms} before {last}")
            last = step.time_ms
            if step.actor not in self.actors:
                raise ScenarioError(f"step {i}: unknown actor {step.actor!r}")
            if step.tuple.src_ip != self.actors[step.actor]:
                raise ScenarioError(
                    f"step {i}: {step.actor} is {self.actors[step.actor]}, "
                    f"packet claims src {step.tuple.src_ip}"
                )
            is_tcp = isinstance(step.packet, TcpFlags)
            if is_tcp != (step.tuple.proto is Proto.TCP):
                raise ScenarioError(f"step {i}: packet kind does not match {step.tuple.proto.value}")


@dataclass(frozen=True)
class EngineConfig:
    tracker: TrackerKind = TrackerKind.UDP
    quic: QuicConfig = field(default_factory=QuicConfig)
    ttl: TtlPolicy = field(default_factory=TtlPolicy)


@dataclass(frozen=True)
class TraceRecord:
    time_ms: int
    actor: str
    chain: Chain
    tuple: FiveTuple
    kind: str
    ct: CtClass
    verdict: Verdict
    state: CtState
    refusal: Reason | None = None

    def format(self) -> str:
        return (
            f"t={self.time_ms} actor={self.actor} chain={self.chain.value} {self.tuple} "
            f"kind={self.kind} ct={self.ct.value} verdict={self.verdict.action.value} "
            f"reason={self.verdict.reason.replace(' ', '#')} state={self.state.value} "
            f"refusal={self.refusal.value if self.refusal else '-'}"
        )

    def key(self) -> tuple:
        """Fields that must agree between a simulation and its pcap replay."""
        return (
            self.time_ms,
            self.chain,
            self.tuple,
            self.kind,
            self.ct,
            self.verdict,
            self.state,
            self.refusal,
        )


@dataclass(frozen=True)
class Metrics:
    attacker_accepted: int = 0
    attacker_dropped: int = 0
    hole_open_duration: float = 0.0
    state_timeline: tuple[tuple[int, str], ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {
            "attacker_accepted": self.attacker_accepted,
            "attacker_dropped": self.attacker_dropped,
            "hole_open_duration": self.hole_open_duration,
        }


@dataclass
class Trace:
    name: str
    tracker: TrackerKind
    records: list[TraceRecord]
    events: list[Event]
    final_table: list[str] = field(default_factory=list)

    @property
    def metrics(self) -> Metrics:
        return metrics(self)

    def format_records(self) -> list[str]:
        return [r.format() for r in self.records]

    def format_table(self) -> list[str]:
        header = ("TIME", "ACTOR", "CHAIN", "FLOW", "KIND", "CT", "VERDICT", "REASON", "STATE")
        rows = [header]
        for r in self.records:
            flow = f"{r.tuple.src_ip}:{r.tuple.src_port}>{r.tuple.dst_ip}:{r.tuple.dst_port}"
            rows.append(
                (
                    str(r.time_ms),
                    r.actor,
                    r.chain.value,
                    f"{r.tuple.proto.value} {flow}",
                    r.kind,
                    r.ct.value,
                    r.verdict.action.value,
                    r.verdict.reason,
                    r.state.value,
                )
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        return ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]


def metrics(trace: Trace) -> Metrics:
    """Attacker counts, how long the hole stayed usable, and state changes."""
    accepted = dropped = 0
    idle_start: int | None = None
    last_regular = 0
    last_accept: int | None = None
    timeline: list[tuple[int, str]] = []
    for r in trace.records:
        if not timeline or timeline[-1][1] != r.state.value:
            timeline.append((r.time_ms, r.state.value))
        if r.actor != "attacker":
            last_regular = r.time_ms
            continue
        if idle_start is None:
            idle_start = last_regular
        if r.verdict.action is Action.ACCEPT:
            accepted += 1
            last_accept = r.time_ms
        else:
            dropped += 1
    duration = 0.0
    if last_accept is not None and idle_start is not None:
        duration = (last_accept - idle_start) / 1000
    return Metrics(accepted, dropped, duration, tuple(timeline))


class Engine:
    """Firewall host: one connection table, one ruleset, one local address."""

    def __init__(
        self,
        ruleset: Ruleset | None = None,
        config: EngineConfig | None = None,
        local_ip: ipaddress.IPv4Address | str = SERVER_IP,
    ):
        self.ruleset = ruleset if ruleset is not None else default_ruleset()
        self.config = config or EngineConfig()
        self.local_ip = ipaddress.IPv4Address(local_ip)
        self.table = ConnTable()

    def chain_for(self, tuple_: FiveTuple) -> Chain:
        if tuple_.dst_ip == self.local_ip:
            return Chain.INPUT
        if tuple_.src_ip == self.local_ip:
            return Chain.OUTPUT
        return Chain.FORWARD

    def _label(self, tuple_: FiveTuple, packet: Packet) -> str:
        if isinstance(packet, TcpFlags):
            return str(packet)
        try:
            headers = parse_for_flow(self.table, tuple_, packet, self.config.quic)
        except Refusal:
            return f"udp/{len(packet)}B"
        return "+".join(h.kind.value for h in headers)

    def process(self, now: int, tuple_: FiveTuple, packet: Packet, actor: str = "-") -> TraceRecord:
        self.table.sweep(now)
        chain = self.chain_for(tuple_)
        kind = self._label(tuple_, packet)
        refusal = None
        try:
            if tuple_.proto is Proto.TCP:
                assert isinstance(packet, TcpFlags)
                plan = plan_tcp(self.table, tuple_, packet, now, policy=self.config.ttl)
            elif self.config.tracker is TrackerKind.QUIC:
                headers = parse_for_flow(self.table, tuple_, packet, self.config.quic)
                plan = plan_quic(self.table, tuple_, headers, now, config=self.config.quic)
            else:
                plan = plan_udp(self.table, tuple_, now, policy=self.config.ttl)
            ct = plan.classification
        except Refusal as r:
            refusal, ct = r.reason, CtClass.INVALID

        verdict = evaluate(self.ruleset, chain, tuple_, ct)
        if refusal is not None:
            verdict = Verdict(Action.DROP, refusal.value, None)
        destroyed = False
        if verdict.action is Action.ACCEPT:
            self.table.commit(plan, now)
            destroyed = plan.destroy
        hit = self.table.lookup(tuple_)
        if hit is not None:
            state = hit[0].state
        else:
            state = CtState.CLOSE if destroyed else CtState.NONE
        return TraceRecord(now, actor, chain, tuple_, kind, ct, verdict, state, refusal)

    def drain(self) -> list[Event]:
        """Advance the clock until every entry has expired."""
        out: list[Event] = []
        while (t := self.table.next_expiry()) is not None:
            out += self.table.sweep(t)
        return out


def run(scenario: Scenario, config: EngineConfig | None = None, *, drain: bool = False) -> Trace:
    scenario.validate()
    config = config or EngineConfig(tracker=scenario.tracker)
    engine = Engine(scenario.ruleset, config, scenario.actors["server"])
    records = [engine.process(s.time_ms, s.tuple, s.packet, s.actor) for s in scenario.steps]
    if drain:
        engine.drain()
    return Trace(scenario.name, config.tracker, records, list(engine.table.events), engine.table.dump())


# -- builtin scenarios --------------------------------------------------------


def _flows(proto: Proto) -> tuple[FiveTuple, FiveTuple]:
    up = FiveTuple(proto, CLIENT_IP, SERVER_IP, CLIENT_PORT, SERVER_PORT)
    return up, up.reversed()


@dataclass
class _Handshake:
    odcid: bytes
    client_scid: bytes
    server_scid: bytes


def _http3_steps(rng: random.Random) -> tuple[list[Step], _Handshake]:
    """Initial/Handshake bursts, then protected payload both ways."""
    up, down = _flows(Proto.UDP)
    hs = _Handshake(rng.randbytes(8), rng.randbytes(8), rng.randbytes(8))
    c, s = hs.client_scid, hs.server_scid

    def initial(dcid: bytes, scid: bytes, n: int) -> bytes:
        return build_long_header(PacketKind.INITIAL, DRAFT_29, dcid, scid, rng.randbytes(n))

    def handshake(dcid: bytes, scid: bytes, n: int) -> bytes:
        return build_long_header(PacketKind.HANDSHAKE, DRAFT_29, dcid, scid, rng.randbytes(n))

    def short(dcid: bytes, n: int) -> bytes:
        return build_short_header(dcid, rng.randbytes(n))

    steps = [
        Step(0, "client", up, initial(hs.odcid, c, 1162)),
        Step(5, "server", down, initial(c, s, 120)),
        Step(6, "server", down, handshake(c, s, 1000)),
        Step(7, "server", down, handshake(c, s, 300)),
        Step(8, "server", down, short(c, 60)),
        Step(12, "client", up, initial(s, c, 30) + handshake(s, c, 60)),
        Step(13, "client", up, short(s, 90)),
        Step(18, "server", down, short(c, 30)),
        Step(19, "server", down, short(c, 700)),
        Step(22, "client", up, short(s, 30)),
    ]
    return steps, hs


def http3_handshake(seed: int = 0, **_: object) -> Scenario:
    steps, _hs = _http3_steps(random.Random(seed))
    return Scenario("http3_handshake", steps, TrackerKind.QUIC)


def _attacker_dcid(
    strategy: DcidStrategy, rng: random.Random, hs: _Handshake, fixed: bytes
) -> bytes:
    if strategy is DcidStrategy.COPY:
        return hs.client_scid
    if strategy is DcidStrategy.FIXED:
        return fixed
    return rng.randbytes(8)


KEEPALIVE_INTERVAL_MS = 10_000
KEEPALIVE_SPAN_MS = 600_000
EXFIL_COUNT = 50
EXFIL_INTERVAL_MS = 100


def udp_hole_punch(
    seed: int = 0, dcid_strategy: DcidStrategy | str = DcidStrategy.RANDOM, **_: object
) -> Scenario:
    """Client finishes an HTTP/3 exchange and goes quiet; the compromised
    server side keeps the tuple alive, then pushes data out through it."""
    strategy = DcidStrategy(dcid_strategy)
    rng = random.Random(seed)
    steps, hs = _http3_steps(rng)
    _, down = _flows(Proto.UDP)
    fixed = rng.randbytes(8)
    idle = steps[-1].time_ms
    for t in range(KEEPALIVE_INTERVAL_MS, KEEPALIVE_SPAN_MS + 1, KEEPALIVE_INTERVAL_MS):
        dcid = _attacker_dcid(strategy, rng, hs, fixed)
        steps.append(Step(idle + t, "attacker", down, build_short_header(dcid, rng.randbytes(16))))
    start = idle + KEEPALIVE_SPAN_MS
    for i in range(1, EXFIL_COUNT + 1):
        dcid = _attacker_dcid(strategy, rng, hs, fixed)
        packet = build_short_header(dcid, rng.randbytes(200))
        steps.append(Step(start + i * EXFIL_INTERVAL_MS, "attacker", down, packet))
    return Scenario("udp_hole_punch", steps, TrackerKind.UDP)


def tcp_timewait_probe(**_: object) -> Scenario:
    up, down = _flows(Proto.TCP)
    f = TcpFlags.parse
    steps = [
        Step(0, "client", up, f("SYN")),
        Step(1, "server", down, f("SYN,ACK")),
        Step(2, "client", up, f("ACK")),
        Step(3, "client", up, f("ACK")),
        Step(4, "server", down, f("ACK")),
        Step(10, "server", down, f("FIN,ACK")),
        Step(11, "client", up, f("FIN,ACK")),
        Step(12, "server", down, f("ACK")),
        # server-side SYN while the tuple is quarantined
        Step(5_000, "attacker", down, f("SYN")),
        # TIME_WAIT (120 s from t=12) is over; server side still cannot open
        Step(121_000, "attacker", down, f("SYN")),
        Step(121_500, "client", up, f("SYN")),
        Step(121_501, "server", down, f("SYN,ACK")),
        Step(121_502, "client", up, f("ACK")),
        Step(121_600, "client", up, f("RST")),
    ]
    return Scenario("tcp_timewait_probe", steps, TrackerKind.TCP)


RESET_FORGERY_COUNT = 5


def reset_forgery_packet(rng: random.Random, length: int = RESET_MIN_LEN) -> bytes:
    """``01`` fixed bits, unpredictable bits, then a guessed 16-byte token."""
    if length < RESET_MIN_LEN:
        raise ValueError(f"a stateless reset needs at least {RESET_MIN_LEN} bytes")
    first = 0x40 | rng.getrandbits(6)
    return bytes([first]) + rng.randbytes(length - 17) + rng.randbytes(16)


def stateless_reset_forgery(seed: int = 0, **_: object) -> Scenario:
    rng = random.Random(seed)
    steps, hs = _http3_steps(rng)
    up, down = _flows(Proto.UDP)
    t = steps[-1].time_ms
    for _i in range(RESET_FORGERY_COUNT):
        t += 1_000
        steps.append(Step(t, "attacker", down, reset_forgery_packet(rng)))
        steps.append(Step(t + 10, "client", up, build_short_header(hs.server_scid, rng.randbytes(40))))
        steps.append(Step(t + 20, "server", down, build_short_header(hs.client_scid, rng.randbytes(40))))
    return Scenario("stateless_reset_forgery", steps, TrackerKind.QUIC)


BUILTINS: dict[str, Callable[..., Scenario]] = {
    "http3_handshake": http3_handshake,
    "udp_hole_punch": udp_hole_punch,
    "tcp_timewait_probe": tcp_timewait_probe,
    "stateless_reset_forgery": stateless_reset_forgery,
}


def builtin(name: str, **options: object) -> Scenario:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ScenarioError(f"no builtin scenario {name!r}") from None
    return factory(**options)


# -- scenario files -----------------------------------------------------------

_AT_RE = re.compile(
    r"^at\s+(?P<t>\d+)\s+(?P<actor>\S+)\s+(?P<proto>tcp|udp)\s+"
    r"(?P<src>[\d.]+):(?P<sport>\d+)\s*->\s*(?P<dst>[\d.]+):(?P<dport>\d+)\s+"
    r"(?P<kind>\S+)(?:\s+(?P<args>.*))?$"
)


def _cid(text: str) -> bytes:
    return b"" if text == "-" else parse_hex(text)


def _packet(kind: str, args: list[str], rng: random.Random) -> Packet:
    def size(i: int, default: int) -> int:
        return int(args[i]) if len(args) > i else default

    if kind == "tcp":
        return TcpFlags.parse(args[0])
    if kind == "udp-raw":
        return parse_hex("".join(args))
    if kind in ("quic-initial", "quic-handshake"):
        pk = PacketKind.INITIAL if kind == "quic-initial" else PacketKind.HANDSHAKE
        n = size(2, 1162 if pk is PacketKind.INITIAL else 100)
        return build_long_header(pk, DRAFT_29, _cid(args[0]), _cid(args[1]), rng.randbytes(n))
    if kind == "quic-short":
        return build_short_header(_cid(args[0]), rng.randbytes(size(1, 32)))
    if kind == "reset-forgery":
        return reset_forgery_packet(rng, size(0, RESET_MIN_LEN))
    raise ScenarioError(f"unknown packet kind {kind!r}")


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Read the line-oriented scenario format.

    Besides ``at`` lines the format accepts ``name``, ``tracker``, ``seed``
    and ``actor <name> <ip>`` directives, and ``#`` comments. Opaque payload
    bytes for generated QUIC packets come from the seeded RNG.
    """
    tracker = TrackerKind.UDP
    actors = {"client": CLIENT_IP, "server": SERVER_IP, "attacker": SERVER_IP}
    rng = random.Random(0)
    steps: list[Step] = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        try:
            if word == "name":
                name = rest[0]
            elif word == "tracker":
                tracker = TrackerKind(rest[0])
            elif word == "seed":
                rng = random.Random(int(rest[0]))
            elif word == "actor":
                actors[rest[0]] = ipaddress.IPv4Address(rest[1])
            elif word == "at":
                m = _AT_RE.match(line)
                if m is None:
                    raise ScenarioError("malformed step")
                tuple_ = FiveTuple(
                    Proto(m["proto"]), m["src"], m["dst"], int(m["sport"]), int(m["dport"])
                )
                args = (m["args"] or "").split()
                steps.append(Step(int(m["t"]), m["actor"], tuple_, _packet(m["kind"], args, rng)))
            else:
                raise ScenarioError(f"unknown directive {word!r}")
        except ScenarioError as e:
            raise ScenarioError(f"line {n}: {e}") from None
        except (ValueError, IndexError) as e:
            raise ScenarioError(f"line {n}: {e}") from None
    scenario = Scenario(name, steps, tracker, actors)
    scenario.validate()
    return scenario


def format_scenario(scenario: Scenario) -> str:
    """Serialise with raw payloads so that parsing it back is exact."""
    lines = [f"name {scenario.name}", f"tracker {scenario.tracker.value}"]
    lines += [f"actor {a} {ip}" for a, ip in scenario.actors.items()]
    for s in scenario.steps:
        t = s.tuple
        head = (
            f"at {s.time_ms} {s.actor} {t.proto.value} "
            f"{t.src_ip}:{t.src_port} -> {t.dst_ip}:{t.dst_port}"
        )
        if isinstance(s.packet, TcpFlags):
            lines.append(f"{head} tcp {str(s.packet).replace('-', ',')}")
        else:
            lines.append(f"{head} udp-raw {s.packet.hex()}")
    return "\n".join(lines) + "\n"


def scenario_packets(scenario: Scenario) -> list[CapturedPacket]:
    return [
        CapturedPacket(s.time_ms, s.tuple, flags=s.packet)
        if isinstance(s.packet, TcpFlags)
        else CapturedPacket(s.time_ms, s.tuple, payload=s.packet)
        for s in scenario.steps
    ]


def replay(
    capture: Capture,
    config: EngineConfig | None = None,
    ruleset: Ruleset | None = None,
    local_ip: ipaddress.IPv4Address | str | None = None,
    *,
    name: str = "capture",
    drain: bool = False,
) -> Trace:
    """Run captured packets through the engine.

    Without ``local_ip`` the firewall host is taken to be the destination of
    the first packet. Packets sent by it are attributed to ``server``.
    """
    config = config or EngineConfig()
    if local_ip is None:
        local_ip = capture.packets[0].tuple.dst_ip if capture.packets else SERVER_IP
    engine = Engine(ruleset, config, local_ip)
    records = []
    for p in capture.packets:
        actor = "server" if p.tuple.src_ip == engine.local_ip else "client"
        packet = p.flags if p.flags is not None else p.payload
        records.append(engine.process(p.time_ms, p.tuple, packet, actor))
    if drain:
        engine.drain()
    return Trace(name, config.tracker, records, list(engine.table.events), engine.table.dump())
