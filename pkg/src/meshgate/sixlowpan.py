"""Adaptation between IPv6 datagrams and 121-byte link payloads.

Payload kinds, selected by the first (dispatch) byte:

    0x41              uncompressed IPv6: dispatch + full 40-byte header + payload
    0x42              prefix-compressed IPv6: dispatch, flags byte (bit0 = src
                      elided, bit1 = dst elided), the 8 fixed header bytes, then
                      each address as a 16-bit suffix (elided) or 16 bytes
                      (inline), then payload
    0xC0|size>>8      FRAG1: u16 datagram size (11 bits used), u16 tag, body
    0xE0|size>>8      FRAGN: as FRAG1 plus u8 offset in 8-byte units, body

Fragmentation always operates on the uncompressed encoding; every non-final
fragment body is a multiple of 8 bytes so offsets fit the 8-byte-unit field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .netmodel import (
    IPV6_MTU,
    Ipv6Packet,
    decode_ipv6,
    encode_ipv6,
)

DISPATCH_UNCOMPRESSED = 0x41
DISPATCH_COMPRESSED = 0x42
DISPATCH_FRAG1 = 0xC0
DISPATCH_FRAGN = 0xE0
FRAG_DISPATCH_MASK = 0xF8

FLAG_SRC_ELIDED = 0x01
FLAG_DST_ELIDED = 0x02

FRAG1_HEADER_SIZE = 4
FRAGN_HEADER_SIZE = 5

LINK_PAYLOAD_BUDGET = 121

MESH_PREFIX_LEN = 14  # 112 bits

REASSEMBLY_DEADLINE_US = 10_000_000


class SixlowpanError(Exception):
    pass


class DatagramTooLarge(SixlowpanError):
    pass


class MalformedDispatch(SixlowpanError):
    pass


class StaleFragment(SixlowpanError):
    """Fragment for an entry that already completed or expired."""


class TagAllocator:
    """Hands out 16-bit datagram tags, wrapping at 2^16."""

    def __init__(self, start: int = 0):
        self._next = start & 0xFFFF

    def next(self) -> int:
        tag = self._next
        self._next = (self._next + 1) & 0xFFFF
        return tag


def compress(p: Ipv6Packet, mesh_prefix: bytes) -> bytes:
    """Encode p for the link, eliding addresses under mesh_prefix to 16 bits."""
    if len(mesh_prefix) != MESH_PREFIX_LEN:
        raise ValueError(f"mesh prefix must be {MESH_PREFIX_LEN} bytes")
    encoded = encode_ipv6(p)
    src_on = p.src[:MESH_PREFIX_LEN] == mesh_prefix
    dst_on = p.dst[:MESH_PREFIX_LEN] == mesh_prefix
    if not src_on and not dst_on:
        return bytes([DISPATCH_UNCOMPRESSED]) + encoded
    flags = (FLAG_SRC_ELIDED if src_on else 0) | (FLAG_DST_ELIDED if dst_on else 0)
    src_part = p.src[MESH_PREFIX_LEN:] if src_on else p.src
    dst_part = p.dst[MESH_PREFIX_LEN:] if dst_on else p.dst
    return (
        bytes([DISPATCH_COMPRESSED, flags])
        + encoded[:8]
        + src_part
        + dst_part
        + p.payload
    )


def decompress(b: bytes, mesh_prefix: bytes) -> Ipv6Packet:
    """Inverse of compress for both the 0x41 and 0x42 payload forms."""
    if not b:
        raise MalformedDispatch("empty 6LoWPAN payload")
    if b[0] == DISPATCH_UNCOMPRESSED:
        return decode_ipv6(b[1:])
    if b[0] != DISPATCH_COMPRESSED:
        raise MalformedDispatch(f"dispatch 0x{b[0]:02x} is not an IPv6 payload")
    if len(b) < 10:
        raise MalformedDispatch("compressed header truncated")
    flags = b[1]
    plen, nh, hop = struct.unpack("!HBB", b[6:10])
    pos = 10
    src, pos = _read_address(b, pos, flags & FLAG_SRC_ELIDED, mesh_prefix)
    dst, pos = _read_address(b, pos, flags & FLAG_DST_ELIDED, mesh_prefix)
    payload = b[pos:]
    if len(payload) != plen:
        raise MalformedDispatch(
            f"compressed payload length {len(payload)} disagrees with header {plen}"
        )
    return Ipv6Packet(src, dst, nh, hop, bytes(payload))


def _read_address(b: bytes, pos: int, elided: int, prefix: bytes) -> tuple[bytes, int]:
    size = 2 if elided else 16
    if len(b) < pos + size:
        raise MalformedDispatch("compressed address truncated")
    raw = bytes(b[pos : pos + size])
    return (prefix + raw if elided else raw), pos + size


def fragment(
    p: Ipv6Packet, link_payload_budget: int = LINK_PAYLOAD_BUDGET, *, tag: int = 0
) -> list[bytes]:
    """Split p into link payloads; a fitting datagram comes back whole.

    All fragments of one call share the caller-supplied tag.
    """
    encoded = encode_ipv6(p)
    if len(encoded) > IPV6_MTU:
        raise DatagramTooLarge(f"datagram of {len(encoded)} bytes exceeds {IPV6_MTU}")
    if 1 + len(encoded) <= link_payload_budget:
        return [bytes([DISPATCH_UNCOMPRESSED]) + encoded]

    size = len(encoded)
    first_body = (link_payload_budget - FRAG1_HEADER_SIZE) & ~7
    later_body = (link_payload_budget - FRAGN_HEADER_SIZE) & ~7
    if first_body <= 0 or later_body <= 0:
        raise SixlowpanError(f"budget {link_payload_budget} too small to fragment")

    size_word = struct.pack("!H", size & 0x07FF)
    out = [
        bytes([DISPATCH_FRAG1 | (size >> 8) & 0x07])
        + size_word[1:]
        + struct.pack("!H", tag)
        + encoded[:first_body]
    ]
    offset = first_body
    while offset < size:
        body = encoded[offset : offset + later_body]
        out.append(
            bytes([DISPATCH_FRAGN | (size >> 8) & 0x07])
            + size_word[1:]
            + struct.pack("!HB", tag, offset // 8)
            + body
        )
        offset += len(body)
    return out


def encode_for_link(
    p: Ipv6Packet,
    mesh_prefix: bytes,
    tags: TagAllocator,
    link_payload_budget: int = LINK_PAYLOAD_BUDGET,
) -> list[bytes]:
    """Outbound pipeline: compress when the result fits, else fragment."""
    compressed = compress(p, mesh_prefix)
    if len(compressed) <= link_payload_budget:
        return [compressed]
    return fragment(p, link_payload_budget, tag=tags.next())


_ACTIVE, _COMPLETED, _EXPIRED = 0, 1, 2


@dataclass
class _Entry:
    size: int
    deadline_us: int
    buf: bytearray
    ranges: list[tuple[int, int]] = field(default_factory=list)
    state: int = _ACTIVE


class ReassemblyBuffer:
    """Per-source fragment reassembly with deadline eviction.

    Entries are keyed by (link source, datagram tag). Completed and expired
    entries leave a marker until their deadline passes so that stragglers
    surface as StaleFragment instead of seeding a bogus new datagram.
    """

    def __init__(self, mesh_prefix: bytes, deadline_us: int = REASSEMBLY_DEADLINE_US):
        self.mesh_prefix = mesh_prefix
        self.deadline_us = deadline_us
        self._entries: dict[tuple[int, int], _Entry] = {}
        self.evicted_incomplete = 0

    def purge_expired(self, now_us: int) -> None:
        dead = [k for k, e in self._entries.items() if now_us >= e.deadline_us]
        for key in dead:
            entry = self._entries[key]
            if entry.state == _ACTIVE:
                entry.state = _EXPIRED
                entry.buf = bytearray()
                entry.deadline_us = now_us + self.deadline_us
                self.evicted_incomplete += 1
            else:
                del self._entries[key]

    def pending(self) -> int:
        return sum(1 for e in self._entries.values() if e.state == _ACTIVE)

    def reassemble(self, src: int, payload: bytes, now_us: int) -> Ipv6Packet | None:
        """Feed one link payload; returns the datagram exactly once, on completion."""
        self.purge_expired(now_us)
        if not payload:
            raise MalformedDispatch("empty 6LoWPAN payload")
        dispatch = payload[0]
        if dispatch in (DISPATCH_UNCOMPRESSED, DISPATCH_COMPRESSED):
            return decompress(payload, self.mesh_prefix)
        kind = dispatch & FRAG_DISPATCH_MASK
        if kind not in (DISPATCH_FRAG1, DISPATCH_FRAGN):
            raise MalformedDispatch(f"dispatch 0x{dispatch:02x} unknown")

        header_size = FRAG1_HEADER_SIZE if kind == DISPATCH_FRAG1 else FRAGN_HEADER_SIZE
        if len(payload) < header_size + 1:
            raise MalformedDispatch("fragment header truncated")
        size = ((dispatch & 0x07) << 8) | payload[1]
        tag = struct.unpack("!H", payload[2:4])[0]
        offset = 0 if kind == DISPATCH_FRAG1 else payload[4] * 8
        body = payload[header_size:]

        key = (src, tag)
        entry = self._entries.get(key)
        if entry is not None and entry.state != _ACTIVE:
            raise StaleFragment(f"tag {tag} from {src} already settled")
        if entry is None:
            entry = _Entry(size, now_us + self.deadline_us, bytearray(size))
            self._entries[key] = entry
        elif entry.size != size:
            raise MalformedDispatch(
                f"fragment size {size} disagrees with entry size {entry.size}"
            )

        end = offset + len(body)
        if end > size:
            raise MalformedDispatch("fragment extends past datagram size")
        if end < size and len(body) % 8:
            raise MalformedDispatch("non-final fragment body not 8-byte aligned")
        for start, stop in entry.ranges:
            lo, hi = max(start, offset), min(stop, end)
            if lo < hi and entry.buf[lo:hi] != body[lo - offset : hi - offset]:
                raise MalformedDispatch("fragment conflicts with received bytes")
        entry.buf[offset:end] = body
        entry.ranges = _merge_ranges(entry.ranges + [(offset, end)])

        if entry.ranges == [(0, size)]:
            entry.state = _COMPLETED
            datagram = bytes(entry.buf)
            entry.buf = bytearray()
            entry.deadline_us = now_us + self.deadline_us
            return decode_ipv6(datagram)
        return None


def _merge_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for start, stop in sorted(ranges):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], stop))
        else:
            merged.append((start, stop))
    return merged
