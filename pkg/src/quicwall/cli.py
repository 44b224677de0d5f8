"""Command line entry point: ``quicwall parse|simulate|track|rules check``."""

from __future__ import annotations

import argparse
import json
import operator
import re
import sys
from pathlib import Path

from quicwall.capture import CaptureError, read_pcap, write_pcap
from quicwall.conntable import REASON_HELP, TtlPolicy
from quicwall.firewall import RuleError, Ruleset, default_ruleset, load_rules
from quicwall.quic_tracker import Mode, QuicConfig
from quicwall.scenario import (
    BUILTINS,
    EngineConfig,
    ScenarioError,
    Trace,
    TrackerKind,
    builtin,
    parse_scenario,
    replay,
    run,
    scenario_packets,
)
from quicwall.wire import (
    DRAFT_29,
    ParseContext,
    WireError,
    parse_datagram,
    parse_hex,
    stateless_reset_shape,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_OPS = {
    ">=": operator.ge,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
    "=": operator.eq,
    ">": operator.gt,
    "<": operator.lt,
}
_EXPECT_RE = re.compile(r"^(\w+)(>=|<=|==|!=|=|>|<)(-?[\d.]+)$")


def _reasons_epilog() -> str:
    lines = ["tracker refusal reasons (shown as reason=/refusal= in traces):"]
    lines += [f"  {r.value:<14} {text}" for r, text in REASON_HELP.items()]
    return "\n".join(lines)


def _print(lines) -> None:
    for line in lines:
        print(line)


# -- parse --------------------------------------------------------------------


def cmd_parse(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.file:
        text = Path(args.file).read_text()
    elif args.hex:
        text = " ".join(args.hex)
    else:
        text = sys.stdin.read()
    try:
        data = parse_hex(text)
    except ValueError:
        parser.error("input is not a hex dump (two hex digits per byte)")
    versions = frozenset(int(v, 16) for v in args.accept_version) or frozenset({DRAFT_29})
    ctx = ParseContext(versions, default_dcid_length=args.dcid_len)
    try:
        headers = parse_datagram(data, ctx)
    except WireError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL
    for i, h in enumerate(headers, start=1):
        print(f"packet {i}: {h.kind.value}")
        if h.version is not None:
            print(f"  version: 0x{h.version:08x}")
        if h.ambiguous:
            print("  dcid: ? (length not on the wire; pass --dcid-len)")
        else:
            print(f"  dcid: {h.dcid.hex() or '-'} (len {len(h.dcid)})")
        if h.scid is not None:
            print(f"  scid: {h.scid.hex() or '-'} (len {len(h.scid)})")
        if h.token:
            print(f"  token: {len(h.token)} bytes")
        print(f"  payload: offset {h.payload_offset} length {h.payload_length}")
    shape = stateless_reset_shape(data)
    if shape.looks_like_reset:
        print("shape: plausible stateless reset / short packet")
        print(f"  token window: {shape.token_window.hex()}")
    else:
        why = []
        if not shape.plausible_short_header:
            why.append("first bits are not 01")
        if not shape.meets_min_length:
            why.append(f"{len(data)} < 21 bytes")
        print(f"shape: not a stateless reset ({', '.join(why)})")
    return EXIT_OK


# -- shared engine options ----------------------------------------------------


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def _setting(args: argparse.Namespace, config: dict, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(name, default)


def _ruleset(path: str | None) -> Ruleset:
    return load_rules(Path(path).read_text()) if path else default_ruleset()


def _engine_config(args, config: dict, default_tracker: TrackerKind) -> EngineConfig:
    tracker = TrackerKind(_setting(args, config, "tracker", default_tracker.value))
    mode = Mode(_setting(args, config, "mode", Mode.STRICT_DCID.value))
    ttl_udp = float(_setting(args, config, "ttl_udp", 30))
    if ttl_udp <= 0:
        raise ValueError("--ttl-udp must be positive")
    return EngineConfig(tracker, QuicConfig(mode=mode, ttl=ttl_udp), TtlPolicy(udp=ttl_udp))


def _emit_trace(trace: Trace, fmt: str, *, events: bool, table: bool) -> None:
    if fmt == "records":
        _print(trace.format_records())
        m = trace.metrics
        print(
            f"metrics attacker_accepted={m.attacker_accepted} "
            f"attacker_dropped={m.attacker_dropped} "
            f"hole_open_duration={m.hole_open_duration:g}"
        )
    else:
        _print(trace.format_table())
        m = trace.metrics
        print()
        print(f"attacker accepted:   {m.attacker_accepted}")
        print(f"attacker dropped:    {m.attacker_dropped}")
        print(f"hole open duration:  {m.hole_open_duration:g} s")
    if events:
        _print(e.format() for e in trace.events)
    if table:
        print(f"table: {len(trace.final_table)} entries")
        _print(trace.final_table)


def _add_engine_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tracker", choices=[t.value for t in TrackerKind])
    p.add_argument("--mode", choices=[m.value for m in Mode], help="QUIC DCID matching mode")
    p.add_argument("--ttl-udp", type=float, dest="ttl_udp", metavar="S")
    p.add_argument("--rules", metavar="FILE", help="iptables-save ruleset (default: built-in)")
    p.add_argument("--format", choices=["table", "records"])
    p.add_argument("--config", metavar="FILE", help="JSON file with option defaults")
    p.add_argument("--events", action="store_true", help="also print the conntrack event log")


# -- simulate -----------------------------------------------------------------


def _check_expectations(trace: Trace, expects: list[str], parser) -> int:
    values = trace.metrics.as_dict()
    status = EXIT_OK
    for raw in expects:
        m = _EXPECT_RE.match(raw.replace(" ", ""))
        if m is None or m[1] not in values:
            parser.error(f"bad --expect {raw!r}; metrics: {', '.join(values)}")
        name, op, want = m[1], m[2], float(m[3])
        if not _OPS[op](values[name], want):
            print(f"expectation failed: {name}={values[name]:g}, wanted {op}{m[3]}", file=sys.stderr)
            status = EXIT_FAIL
    return status


def cmd_simulate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    config = _load_config(args.config)
    options = {
        "seed": int(_setting(args, config, "seed", 0)),
        "dcid_strategy": _setting(args, config, "attacker_dcid", "random"),
    }
    if args.scenario in BUILTINS:
        scenario = builtin(args.scenario, **options)
    elif Path(args.scenario).is_file():
        scenario = parse_scenario(Path(args.scenario).read_text(), Path(args.scenario).stem)
    else:
        raise ScenarioError(f"{args.scenario!r} is neither a builtin nor a file")
    scenario.ruleset = _ruleset(_setting(args, config, "rules", None))
    engine_config = _engine_config(args, config, scenario.tracker)
    trace = run(scenario, engine_config, drain=args.advance_to_end)
    _emit_trace(
        trace, _setting(args, config, "format", "table"), events=args.events, table=args.advance_to_end
    )
    export = _setting(args, config, "export_pcap", None)
    if export:
        write_pcap(export, scenario_packets(scenario))
    return _check_expectations(trace, args.expect, parser)


# -- track --------------------------------------------------------------------


def cmd_track(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    config = _load_config(args.config)
    capture = read_pcap(args.pcap)
    engine_config = _engine_config(args, config, TrackerKind.UDP)
    trace = replay(
        capture,
        engine_config,
        _ruleset(_setting(args, config, "rules", None)),
        _setting(args, config, "local_ip", None),
        name=Path(args.pcap).name,
        drain=args.advance_to_end,
    )
    _emit_trace(trace, _setting(args, config, "format", "table"), events=args.events, table=True)
    if capture.skipped:
        print(f"skipped {capture.skipped} non-IPv4/TCP/UDP frames", file=sys.stderr)
    return EXIT_OK


# -- rules --------------------------------------------------------------------


def cmd_rules_check(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    text = Path(args.file).read_text() if args.file else sys.stdin.read()
    ruleset = load_rules(text)
    for chain, action in ruleset.policies.items():
        print(f":{chain.value} {action.value}")
    for rule in ruleset.rules:
        print(rule.render())
    print(f"ok: {len(ruleset)} rules")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quicwall",
        description="Stateful firewall lab: conntrack-style and QUIC connection tracking.",
        epilog=_reasons_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="dissect a QUIC datagram given as hex")
    p.add_argument("hex", nargs="*", help="hex bytes (whitespace ignored); stdin if omitted")
    p.add_argument("--file", help="read the hex dump from a file")
    p.add_argument("--dcid-len", type=int, choices=range(21), metavar="N", help="short-header DCID length")
    p.add_argument("--accept-version", action="append", default=[], metavar="HEX")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser(
        "simulate",
        help="run a builtin or file scenario",
        epilog=_reasons_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("scenario", help=f"builtin ({', '.join(BUILTINS)}) or scenario file")
    _add_engine_options(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--attacker-dcid", dest="attacker_dcid", choices=["random", "fixed", "copy"])
    p.add_argument("--export-pcap", dest="export_pcap", metavar="FILE")
    p.add_argument("--expect", action="append", default=[], metavar="METRIC<OP>VALUE")
    p.add_argument("--advance-to-end", action="store_true", help="let every entry expire at the end")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "track",
        help="replay a pcap through the firewall",
        epilog=_reasons_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("pcap")
    _add_engine_options(p)
    p.add_argument("--local-ip", dest="local_ip", help="firewall host (default: first packet's dst)")
    p.add_argument("--advance-to-end", action="store_true", help="let every entry expire at the end")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("rules", help="ruleset tools")
    rules_sub = p.add_subparsers(dest="rules_command", required=True)
    c = rules_sub.add_parser("check", help="validate an iptables-save file")
    c.add_argument("file", nargs="?")
    c.set_defaults(func=cmd_rules_check)

    p = sub.add_parser("scenarios", help="list builtin scenarios")
    p.set_defaults(func=lambda a, _p: (_print(BUILTINS), EXIT_OK)[1])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (ScenarioError, RuleError, CaptureError, WireError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
