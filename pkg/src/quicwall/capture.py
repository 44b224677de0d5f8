"""Classic pcap reading and writing (no pcapng).

Only IPv4 TCP/UDP is extracted. Everything else, including IP fragments,
is skipped and counted.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

from quicwall.conntable import FiveTuple, Proto
from quicwall.tcp_tracker import TcpFlags

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

ETH_P_IP = 0x0800
ETH_P_8021Q = 0x8100

_GLOBAL_HDR = "IHHiIII"
_RECORD_HDR = "IIII"


class CaptureError(Exception):
    pass


class BadMagic(CaptureError):
    pass


class TruncatedFile(CaptureError):
    pass


class UnsupportedLinkType(CaptureError):
    pass


@dataclass(frozen=True)
class CapturedPacket:
    """One extracted packet; exactly one of ``flags``/``payload`` is set."""

    time_ms: int
    tuple: FiveTuple
    flags: TcpFlags | None = None
    payload: bytes | None = None


@dataclass
class Capture:
    packets: list[CapturedPacket]
    skipped: int = 0
    linktype: int = LINKTYPE_ETHERNET


def _extract_ipv4(ip: bytes) -> tuple[FiveTuple, TcpFlags | None, bytes | None] | None:
    if len(ip) < 20 or ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    total = struct.unpack("!H", ip[2:4])[0]
    frag = struct.unpack("!H", ip[6:8])[0]
    if ihl < 20 or len(ip) < ihl or frag & 0x3FFF:
        # more-fragments flag or a nonzero offset: not reassembled
        return None
    ip = ip[: min(len(ip), total)] if total >= ihl else ip
    proto_num = ip[9]
    src, dst = ip[12:16], ip[16:20]
    seg = ip[ihl:]
    if proto_num == 6:
        if len(seg) < 20:
            return None
        sport, dport = struct.unpack("!HH", seg[:4])
        t = FiveTuple(Proto.TCP, src, dst, sport, dport)
        return t, TcpFlags.from_bits(seg[13]), None
    if proto_num == 17:
        if len(seg) < 8:
            return None
        sport, dport, ulen = struct.unpack("!HHH", seg[:6])
        end = ulen if 8 <= ulen <= len(seg) else len(seg)
        t = FiveTuple(Proto.UDP, src, dst, sport, dport)
        return t, None, bytes(seg[8:end])
    return None


def _l3(frame: bytes, linktype: int) -> bytes | None:
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return frame
    if len(frame) < 14:
        return None
    ethertype = struct.unpack("!H", frame[12:14])[0]
    offset = 14
    if ethertype == ETH_P_8021Q:
        if len(frame) < 18:
            return None
        ethertype = struct.unpack("!H", frame[16:18])[0]
        offset = 18
    if ethertype != ETH_P_IP:
        return None
    return frame[offset:]


def read_pcap_stream(f: BinaryIO) -> Capture:
    head = f.read(24)
    if len(head) < 4:
        raise BadMagic("file too short for a pcap header")
    for endian in "<>":
        magic = struct.unpack(endian + "I", head[:4])[0]
        if magic in (MAGIC_USEC, MAGIC_NSEC):
            break
    else:
        raise BadMagic(f"unknown magic {head[:4].hex()}")
    if len(head) < 24:
        raise TruncatedFile("global header truncated")
    nanos = magic == MAGIC_NSEC
    linktype = struct.unpack(endian + _GLOBAL_HDR, head)[6] & 0x0FFFFFFF
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_IPV4):
        raise UnsupportedLinkType(f"link type {linktype}")

    packets: list[CapturedPacket] = []
    skipped = 0
    base: int | None = None
    while True:
        rec = f.read(16)
        if not rec:
            break
        if len(rec) < 16:
            raise TruncatedFile("record header truncated")
        sec, frac, incl, _orig = struct.unpack(endian + _RECORD_HDR, rec)
        frame = f.read(incl)
        if len(frame) < incl:
            raise TruncatedFile("record data truncated")
        ms = sec * 1000 + (frac // 1_000_000 if nanos else frac // 1000)
        if base is None:
            base = ms
        l3 = _l3(frame, linktype)
        got = _extract_ipv4(l3) if l3 is not None else None
        if got is None:
            skipped += 1
            continue
        tuple_, flags, payload = got
        packets.append(CapturedPacket(ms - base, tuple_, flags, payload))
    return Capture(packets, skipped, linktype)


def read_pcap(path: str | Path) -> Capture:
    with open(path, "rb") as f:
        return read_pcap_stream(f)


# -- writer -------------------------------------------------------------------


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _transport(pkt: CapturedPacket, pseudo: bytes) -> bytes:
    t = pkt.tuple
    if t.proto is Proto.TCP:
        flags = pkt.flags.bits if pkt.flags else 0
        hdr = struct.pack("!HHIIBBHHH", t.src_port, t.dst_port, 0, 0, 5 << 4, flags, 65535, 0, 0)
        csum = _checksum(pseudo + struct.pack("!H", len(hdr)) + hdr)
        return hdr[:16] + struct.pack("!H", csum) + hdr[18:]
    body = pkt.payload or b""
    length = 8 + len(body)
    hdr = struct.pack("!HHHH", t.src_port, t.dst_port, length, 0)
    csum = _checksum(pseudo + struct.pack("!H", length) + hdr + body) or 0xFFFF
    return hdr[:6] + struct.pack("!H", csum) + body


def build_frame(pkt: CapturedPacket, ident: int = 0) -> bytes:
    """Ethernet + IPv4 + TCP/UDP frame for ``pkt`` with valid checksums."""
    t = pkt.tuple
    src, dst = t.src_ip.packed, t.dst_ip.packed
    pseudo = src + dst + bytes([0, t.proto.number])
    seg = _transport(pkt, pseudo)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + len(seg), ident & 0xFFFF, 0x4000, 64, t.proto.number, 0, src, dst
    )
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = bytes.fromhex("02000000000202000000000108 00".replace(" ", ""))
    return eth + ip + seg


def write_pcap_stream(
    f: BinaryIO, packets: Iterable[CapturedPacket], epoch_ms: int = 1_600_000_000_000
) -> int:
    f.write(struct.pack("<" + _GLOBAL_HDR, MAGIC_USEC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    n = 0
    for n, pkt in enumerate(packets, start=1):
        frame = build_frame(pkt, n)
        ms = epoch_ms + pkt.time_ms
        f.write(struct.pack("<" + _RECORD_HDR, ms // 1000, (ms % 1000) * 1000, len(frame), len(frame)))
        f.write(frame)
    return n


def write_pcap(path: str | Path, packets: Iterable[CapturedPacket]) -> int:
    with open(path, "wb") as f:
        return write_pcap_stream(f, packets)
