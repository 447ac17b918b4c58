"""Packet and frame codecs. All layouts are normative and big-endian.

Link frame (radio, MTU 127 bytes):

    | Offset | Size | Field     |
    |--------|------|-----------|
    | 0      | 2    | dst_short |
    | 2      | 2    | src_short |
    | 4      | 1    | seq       |
    | 5      | 1    | frame_type (1=data, 2=aodv_control, 3=ack) |
    | 6      | <=121| payload   |

IPv6 packet (40-byte fixed header, no extension headers, ceiling 1280 bytes):

    version word (0x6 << 28), payload_len u16, next_header u8, hop_limit u8,
    src 16 bytes, dst 16 bytes, payload.

IPv4 packet (20-byte option-free header):

    0x45, tos=0, total_len u16, id=0, flags/frag=0, ttl u8, protocol u8,
    header_checksum u16 (ones-complement), src 4 bytes, dst 4 bytes, payload.

Serial tunnel frame: byte-stuffed delimiter framing (flag 0x7E, escape 0x7D,
xor 0x20) around payload + CRC-16 (poly 0x1021, init 0xFFFF, big-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

LINK_MTU = 127
LINK_HEADER_SIZE = 6
LINK_PAYLOAD_MAX = LINK_MTU - LINK_HEADER_SIZE  # 121

IPV6_HEADER_SIZE = 40
IPV6_MTU = 1280
IPV6_PAYLOAD_MAX = IPV6_MTU - IPV6_HEADER_SIZE  # 1240

IPV4_HEADER_SIZE = 20

LINK_BROADCAST = 0xFFFF

SERIAL_FLAG = 0x7E
SERIAL_ESC = 0x7D
SERIAL_XOR = 0x20


class CodecError(Exception):
    """Base for all encode/decode failures in this module."""


class Truncated(CodecError):
    pass


class Oversized(CodecError):
    pass


class OversizedPayload(CodecError):
    pass


class ChecksumMismatch(CodecError):
    pass


class CrcError(CodecError):
    pass


class BadFormat(CodecError):
    pass


class FrameType(IntEnum):
    DATA = 1
    AODV_CONTROL = 2
    ACK = 3


@dataclass(frozen=True)
class LinkFrame:
    dst_short: int
    src_short: int
    seq: int
    frame_type: FrameType
    payload: bytes = b""


@dataclass(frozen=True)
class Ipv6Packet:
    src: bytes  # 16 bytes
    dst: bytes  # 16 bytes
    next_header: int
    hop_limit: int
    payload: bytes = b""


@dataclass(frozen=True)
class Ipv4Packet:
    src: bytes  # 4 bytes
    dst: bytes  # 4 bytes
    protocol: int
    ttl: int
    payload: bytes = b""


def encode_link_frame(f: LinkFrame) -> bytes:
    if len(f.payload) > LINK_PAYLOAD_MAX:
        raise OversizedPayload(
            f"link payload {len(f.payload)} exceeds {LINK_PAYLOAD_MAX} bytes"
        )
    return (
        struct.pack(
            "!HHBB", f.dst_short, f.src_short, f.seq & 0xFF, int(f.frame_type)
        )
        + f.payload
    )


def decode_link_frame(b: bytes) -> LinkFrame:
    if len(b) < LINK_HEADER_SIZE:
        raise Truncated(f"link frame of {len(b)} bytes, header needs {LINK_HEADER_SIZE}")
    if len(b) > LINK_MTU:
        raise Oversized(f"link frame of {len(b)} bytes exceeds MTU {LINK_MTU}")
    dst, src, seq, ftype = struct.unpack("!HHBB", b[:LINK_HEADER_SIZE])
    try:
        frame_type = FrameType(ftype)
    except ValueError as exc:
        raise BadFormat(f"unknown frame type {ftype}") from exc
    return LinkFrame(dst, src, seq, frame_type, bytes(b[LINK_HEADER_SIZE:]))


def encode_ipv6(p: Ipv6Packet) -> bytes:
    if len(p.src) != 16 or len(p.dst) != 16:
        raise BadFormat("IPv6 addresses must be 16 bytes")
    if len(p.payload) > IPV6_PAYLOAD_MAX:
        raise OversizedPayload(
            f"IPv6 payload {len(p.payload)} exceeds {IPV6_PAYLOAD_MAX} bytes"
        )
    return (
        struct.pack(
            "!IHBB",
            0x6 << 28,
            len(p.payload),
            p.next_header & 0xFF,
            p.hop_limit & 0xFF,
        )
        + p.src
        + p.dst
        + p.payload
    )


def decode_ipv6(b: bytes) -> Ipv6Packet:
    if len(b) < IPV6_HEADER_SIZE:
        raise Truncated(f"IPv6 packet of {len(b)} bytes, header needs {IPV6_HEADER_SIZE}")
    if len(b) > IPV6_MTU:
        raise Oversized(f"IPv6 packet of {len(b)} bytes exceeds ceiling {IPV6_MTU}")
    word0, plen, nh, hop = struct.unpack("!IHBB", b[:8])
    if word0 >> 28 != 6:
        raise BadFormat(f"IPv6 version field is {word0 >> 28}")
    if plen != len(b) - IPV6_HEADER_SIZE:
        raise Truncated(
            f"IPv6 payload length {plen} disagrees with carried {len(b) - IPV6_HEADER_SIZE}"
        )
    return Ipv6Packet(bytes(b[8:24]), bytes(b[24:40]), nh, hop, bytes(b[40:]))


def ones_complement_sum(data: bytes) -> int:
    """Ones-complement sum of 16-bit big-endian words, zero-padded to even length."""
    if len(data) % 2:
        data = data + b"\x00"
    total = 0
    for (word,) in struct.iter_unpack("!H", data):
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    return total


def ipv4_header_checksum(header: bytes) -> int:
    """Checksum over a 20-byte header whose checksum field is zeroed."""
    return ~ones_complement_sum(header) & 0xFFFF


def encode_ipv4(p: Ipv4Packet) -> bytes:
    if len(p.src) != 4 or len(p.dst) != 4:
        raise BadFormat("IPv4 addresses must be 4 bytes")
    total_len = IPV4_HEADER_SIZE + len(p.payload)
    if total_len > 0xFFFF:
        raise OversizedPayload(f"IPv4 total length {total_len} exceeds 65535")
    header = bytearray(
        struct.pack(
            "!BBHHHBBH",
            0x45,
            0,
            total_len,
            0,
            0,
            p.ttl & 0xFF,
            p.protocol & 0xFF,
            0,
        )
        + p.src
        + p.dst
    )
    cksum = ipv4_header_checksum(bytes(header))
    header[10:12] = struct.pack("!H", cksum)
    return bytes(header) + p.payload


def decode_ipv4(b: bytes) -> Ipv4Packet:
    if len(b) < IPV4_HEADER_SIZE:
        raise Truncated(f"IPv4 packet of {len(b)} bytes, header needs {IPV4_HEADER_SIZE}")
    if b[0] != 0x45:
        raise BadFormat(f"unsupported version/IHL byte 0x{b[0]:02x}")
    if ones_complement_sum(b[:IPV4_HEADER_SIZE]) != 0xFFFF:
        raise ChecksumMismatch("IPv4 header checksum does not verify")
    total_len = struct.unpack("!H", b[2:4])[0]
    if total_len != len(b):
        raise Truncated(f"IPv4 total length {total_len} disagrees with carried {len(b)}")
    ttl, proto = b[8], b[9]
    return Ipv4Packet(bytes(b[12:16]), bytes(b[16:20]), proto, ttl, bytes(b[20:]))


def _crc16_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
        table.append(crc)
    return table


_CRC16 = _crc16_table()


def crc16(data: bytes, init: int = 0xFFFF) -> int:
    crc = init
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC16[((crc >> 8) ^ byte) & 0xFF]
    return crc


def _stuff(data: bytes) -> bytes:
    out = bytearray()
    for byte in data:
        if byte in (SERIAL_FLAG, SERIAL_ESC):
            out.append(SERIAL_ESC)
            out.append(byte ^ SERIAL_XOR)
        else:
            out.append(byte)
    return bytes(out)


def encode_serial_frame(payload: bytes) -> bytes:
    body = payload + struct.pack("!H", crc16(payload))
    return bytes([SERIAL_FLAG]) + _stuff(body) + bytes([SERIAL_FLAG])


def decode_serial_frame(b: bytes) -> bytes:
    """One-shot decode of a single framed payload (inverse of encode_serial_frame)."""
    if len(b) < 2 or b[0] != SERIAL_FLAG or b[-1] != SERIAL_FLAG:
        raise BadFormat("serial frame must be delimited by flag bytes")
    return _unstuff_and_check(b[1:-1])


def _unstuff_and_check(stuffed: bytes) -> bytes:
    body = bytearray()
    escape = False
    for byte in stuffed:
        if escape:
            body.append(byte ^ SERIAL_XOR)
            escape = False
        elif byte == SERIAL_ESC:
            escape = True
        elif byte == SERIAL_FLAG:
            raise BadFormat("flag byte inside serial frame body")
        else:
            body.append(byte)
    if escape:
        raise BadFormat("serial frame ends mid-escape")
    if len(body) < 2:
        raise Truncated("serial frame body shorter than its CRC")
    payload, crc = bytes(body[:-2]), struct.unpack("!H", body[-2:])[0]
    if crc16(payload) != crc:
        raise CrcError("serial frame CRC mismatch")
    return payload


class SerialDecoder:
    """Incremental decoder for a serial byte stream.

    feed() returns fully decoded payloads; CRC failures surface as CrcError
    entries in `errors` and the stream resynchronizes at the next flag.
    """

    def __init__(self):
        self._buf = bytearray()
        self._in_frame = False
        self.errors = 0

    def feed(self, data: bytes) -> list[bytes]:
        out = []
        for byte in data:
            if byte == SERIAL_FLAG:
                if self._in_frame and self._buf:
                    try:
                        out.append(_unstuff_and_check(bytes(self._buf)))
                    except CodecError:
                        self.errors += 1
                    self._buf.clear()
                    self._in_frame = False
                else:
                    self._in_frame = True
                    self._buf.clear()
            elif self._in_frame:
                self._buf.append(byte)
        return out
