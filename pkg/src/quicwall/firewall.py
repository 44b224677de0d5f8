"""A small iptables-save subset and a first-match verdict engine.

Supported: the ``filter`` table, chain policies, and ``-A`` rules built from
``-p``, ``-m tcp|udp|conntrack``, ``--dport``/``--sport``, ``--ctstate`` and
``-j ACCEPT``. Anything else is rejected rather than half-understood.
"""

from __future__ import annotations

import enum
import shlex
from dataclasses import dataclass, field

from quicwall.conntable import CtClass, FiveTuple, Proto

DEFAULT_RULES = """\
# Generated by iptables-save v1.8.4
*filter
:INPUT DROP [581:48486]
:FORWARD DROP [0:0]
:OUTPUT DROP [27:3466]
-A INPUT -p tcp -m tcp --dport 443 -m conntrack --ctstate NEW,RELATED,ESTABLISHED -j ACCEPT
-A INPUT -p udp -m udp --dport 443 -m conntrack --ctstate NEW,RELATED,ESTABLISHED -j ACCEPT
-A OUTPUT -p tcp -m tcp --sport 443 -m conntrack --ctstate RELATED,ESTABLISHED -j ACCEPT
-A OUTPUT -p udp -m udp --sport 443 -m conntrack --ctstate RELATED,ESTABLISHED -j ACCEPT
COMMIT
"""


class Chain(enum.Enum):
    INPUT = "INPUT"
    FORWARD = "FORWARD"
    OUTPUT = "OUTPUT"


class Action(enum.Enum):
    ACCEPT = "ACCEPT"
    DROP = "DROP"


class RuleError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UnsupportedDirective(RuleError):
    pass


class RuleSyntaxError(RuleError):
    pass


_MATCHABLE = frozenset({CtClass.NEW, CtClass.ESTABLISHED, CtClass.RELATED})


@dataclass(frozen=True)
class Rule:
    chain: Chain
    proto: Proto
    ctstates: frozenset[CtClass]
    dport: int | None = None
    sport: int | None = None
    target: Action = Action.ACCEPT

    def matches(self, chain: Chain, tuple_: FiveTuple, ct: CtClass) -> bool:
        return (
            chain is self.chain
            and tuple_.proto is self.proto
            and (self.dport is None or tuple_.dst_port == self.dport)
            and (self.sport is None or tuple_.src_port == self.sport)
            and ct in self.ctstates
        )

    def render(self) -> str:
        parts = [f"-A {self.chain.value} -p {self.proto.value} -m {self.proto.value}"]
        if self.dport is not None:
            parts.append(f"--dport {self.dport}")
        if self.sport is not None:
            parts.append(f"--sport {self.sport}")
        order = [CtClass.NEW, CtClass.RELATED, CtClass.ESTABLISHED]
        states = ",".join(s.value for s in order if s in self.ctstates)
        parts.append(f"-m conntrack --ctstate {states} -j {self.target.value}")
        return " ".join(parts)


@dataclass(frozen=True)
class Ruleset:
    rules: tuple[Rule, ...] = ()
    policies: dict[Chain, Action] = field(
        default_factory=lambda: {c: Action.DROP for c in Chain}
    )

    def __len__(self) -> int:
        return len(self.rules)


@dataclass(frozen=True)
class Verdict:
    action: Action
    reason: str
    rule_index: int | None = None


def _port(value: str, line: int) -> int:
    try:
        port = int(value)
    except ValueError:
        raise RuleSyntaxError(f"bad port {value!r}", line) from None
    if not 0 < port <= 0xFFFF:
        raise RuleSyntaxError(f"port {port} out of range", line)
    return port


def _parse_rule(tokens: list[str], line: int) -> Rule:
    try:
        chain = Chain(tokens[1])
    except (IndexError, ValueError):
        raise RuleSyntaxError("-A needs a chain name", line) from None
    proto = None
    dport = sport = None
    ctstates = None
    target = None
    i = 2
    while i < len(tokens):
        opt = tokens[i]
        if i + 1 >= len(tokens):
            raise RuleSyntaxError(f"{opt} needs an argument", line)
        arg = tokens[i + 1]
        if opt == "-p":
            try:
                proto = Proto(arg)
            except ValueError:
                raise UnsupportedDirective(f"protocol {arg!r}", line) from None
        elif opt == "-m":
            if arg not in ("tcp", "udp", "conntrack"):
                raise UnsupportedDirective(f"match module {arg!r}", line)
            if arg != "conntrack" and (proto is None or proto.value != arg):
                raise RuleSyntaxError(f"-m {arg} without -p {arg}", line)
        elif opt == "--dport":
            dport = _port(arg, line)
        elif opt == "--sport":
            sport = _port(arg, line)
        elif opt == "--ctstate":
            states = set()
            for s in arg.split(","):
                try:
                    states.add(CtClass(s))
                except ValueError:
                    raise UnsupportedDirective(f"ctstate {s!r}", line) from None
            ctstates = frozenset(states)
        elif opt == "-j":
            if arg != "ACCEPT":
                raise UnsupportedDirective(f"target {arg!r}", line)
            target = Action.ACCEPT
        else:
            raise UnsupportedDirective(f"option {opt!r}", line)
        i += 2
    if proto is None:
        raise RuleSyntaxError("rule without -p", line)
    if not ctstates:
        raise RuleSyntaxError("rule without --ctstate", line)
    if target is None:
        raise RuleSyntaxError("rule without -j ACCEPT", line)
    return Rule(chain, proto, ctstates, dport, sport, target)


def load_rules(text: str) -> Ruleset:
    """Parse iptables-save output restricted to the supported subset.

    Packet/byte counters on chain lines are accepted and ignored.
    """
    policies = {c: Action.DROP for c in Chain}
    rules: list[Rule] = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line == "COMMIT":
            continue
        if line.startswith("*"):
            if line != "*filter":
                raise UnsupportedDirective(f"table {line[1:]!r}", n)
            continue
        if line.startswith(":"):
            parts = line[1:].split()
            if len(parts) not in (2, 3):
                raise RuleSyntaxError("chain line needs name and policy", n)
            try:
                chain = Chain(parts[0])
            except ValueError:
                raise UnsupportedDirective(f"chain {parts[0]!r}", n) from None
            if parts[1] != "DROP":
                raise UnsupportedDirective(f"policy {parts[1]!r} (only DROP)", n)
            policies[chain] = Action.DROP
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as e:
            raise RuleSyntaxError(str(e), n) from None
        if tokens[0] != "-A":
            raise UnsupportedDirective(f"directive {tokens[0]!r}", n)
        rules.append(_parse_rule(tokens, n))
    return Ruleset(tuple(rules), policies)


def evaluate(ruleset: Ruleset, chain: Chain, tuple_: FiveTuple, ct: CtClass) -> Verdict:
    """First matching rule wins; INVALID never matches; otherwise the chain policy."""
    if ct in _MATCHABLE:
        for i, rule in enumerate(ruleset.rules):
            if rule.matches(chain, tuple_, ct):
                return Verdict(rule.target, f"rule {i + 1}", i)
    policy = ruleset.policies.get(chain, Action.DROP)
    reason = "invalid" if ct is CtClass.INVALID else "policy"
    return Verdict(policy, reason, None)


def default_ruleset() -> Ruleset:
    return load_rules(DEFAULT_RULES)
