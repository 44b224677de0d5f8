"""Userspace stateful-firewall lab for QUIC, UDP and TCP connection tracking."""

from quicwall.conntable import ConnTable, CtState, Direction, FiveTuple, Proto, Refusal
from quicwall.firewall import evaluate, load_rules
from quicwall.scenario import builtin, run
from quicwall.wire import build_long_header, build_short_header, parse_datagram

__all__ = [
    "ConnTable",
    "CtState",
    "Direction",
    "FiveTuple",
    "Proto",
    "Refusal",
    "build_long_header",
    "build_short_header",
    "builtin",
    "evaluate",
    "load_rules",
    "parse_datagram",
    "run",
]
