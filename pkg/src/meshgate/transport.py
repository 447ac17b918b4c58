"""Mini-TCP: reliable, connection-oriented byte streams over the packet layers.

Segment layout (big-endian):

    | 0:2  | src_port |
    | 2:4  | dst_port |
    | 4:8  | seq      |
    | 8:12 | ack      |
    | 12   | flags (SYN=1, ACK=2, FIN=4, RST=8) |
    | 13:15| checksum |
    | 15:  | payload (<= 64 bytes) |

The checksum is the ones-complement sum over a pseudo-header built from the
carrying IP packet (src addr, dst addr, protocol 6, segment length) plus the
segment with a zeroed checksum field; it is recomputed by the gateway when it
rewrites addresses.

Stop-and-wait: one segment in flight, cumulative ACKs, retransmission with
exponential backoff (1 s initial, 8 s cap, simulated time).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .netmodel import ones_complement_sum

MINITCP_PROTOCOL = 6

FLAG_SYN = 0x01
FLAG_ACK = 0x02
FLAG_FIN = 0x04
FLAG_RST = 0x08

SEGMENT_HEADER_SIZE = 15
MAX_SEGMENT_PAYLOAD = 64

RTO_INITIAL_US = 1_000_000
RTO_CAP_US = 8_000_000
MAX_SYN_RETRIES = 5
MAX_DATA_RETRIES = 8

COMMAND_PORT = 7000
TELEMETRY_PORT = 7001


class TransportError(Exception):
    pass


class SegmentError(TransportError):
    pass


class State(Enum):
    CLOSED = "closed"
    SYN_SENT = "syn_sent"
    SYN_RCVD = "syn_rcvd"
    ESTABLISHED = "established"
    FIN_WAIT = "fin_wait"
    CLOSED_FINAL = "closed_final"


@dataclass(frozen=True)
class Segment:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    payload: bytes = b""

    def has(self, flag: int) -> bool:
        return bool(self.flags & flag)


def _pseudo_header(src_addr: bytes, dst_addr: bytes, seg_len: int) -> bytes:
    if len(src_addr) == 4:
        return src_addr + dst_addr + struct.pack("!BBH", 0, MINITCP_PROTOCOL, seg_len)
    return src_addr + dst_addr + struct.pack("!IBBBB", seg_len, 0, 0, 0, MINITCP_PROTOCOL)


def segment_checksum(src_addr: bytes, dst_addr: bytes, seg_bytes: bytes) -> int:
    """Checksum value for a segment whose checksum field is zeroed."""
    return ~ones_complement_sum(_pseudo_header(src_addr, dst_addr, len(seg_bytes)) + seg_bytes) & 0xFFFF


def encode_segment(seg: Segment, src_addr: bytes, dst_addr: bytes) -> bytes:
    if len(seg.payload) > MAX_SEGMENT_PAYLOAD:
        raise SegmentError(f"segment payload {len(seg.payload)} exceeds {MAX_SEGMENT_PAYLOAD}")
    raw = bytearray(
        struct.pack(
            "!HHIIBH",
            seg.src_port,
            seg.dst_port,
            seg.seq & 0xFFFFFFFF,
            seg.ack & 0xFFFFFFFF,
            seg.flags,
            0,
        )
        + seg.payload
    )
    raw[13:15] = struct.pack("!H", segment_checksum(src_addr, dst_addr, bytes(raw)))
    return bytes(raw)


def decode_segment(b: bytes) -> Segment:
    if len(b) < SEGMENT_HEADER_SIZE:
        raise SegmentError(f"segment of {len(b)} bytes, header needs {SEGMENT_HEADER_SIZE}")
    sport, dport, seq, ack, flags, _ = struct.unpack("!HHIIBH", b[:SEGMENT_HEADER_SIZE])
    return Segment(sport, dport, seq, ack, flags, bytes(b[SEGMENT_HEADER_SIZE:]))


def verify_segment(b: bytes, src_addr: bytes, dst_addr: bytes) -> bool:
    if len(b) < SEGMENT_HEADER_SIZE:
        return False
    zeroed = bytearray(b)
    zeroed[13:15] = b"\x00\x00"
    return struct.unpack("!H", b[13:15])[0] == segment_checksum(src_addr, dst_addr, bytes(zeroed))


@dataclass
class _InFlight:
    seq: int
    payload: bytes
    flags: int
    deadline_us: int
    retries: int = 0


class Connection:
    """One endpoint of a mini-TCP connection, driven by segments and timers.

    All methods that can emit traffic return the encoded segments to put on
    the wire; the owner transmits them and keeps a timer armed at
    next_deadline().
    """

    def __init__(
        self,
        local_addr: bytes,
        local_port: int,
        remote_addr: bytes,
        remote_port: int,
    ):
        self.local_addr = local_addr
        self.local_port = local_port
        self.remote_addr = remote_addr
        self.remote_port = remote_port
        self.state = State.CLOSED
        self.send_next = 0
        self.recv_next = 0
        self.rto_us = RTO_INITIAL_US
        self.reset_reason: Optional[str] = None
        self.fin_sent = False
        self.fin_received = False
        self._in_flight: Optional[_InFlight] = None
        self._send_queue: list[bytes] = []
        self._fin_pending = False
        self._recv_buffer = bytearray()
        self.dropped_segments = 0
        self.on_established: Optional[Callable[[], None]] = None
        self.on_data: Optional[Callable[[], None]] = None
        self.on_reset: Optional[Callable[[str], None]] = None

    # -- lifecycle -----------------------------------------------------------

    def open_active(self, now_us: int) -> list[bytes]:
        assert self.state == State.CLOSED
        self.state = State.SYN_SENT
        return [self._load(FLAG_SYN, b"", now_us)]

    def open_passive(self, syn: Segment, now_us: int) -> list[bytes]:
        assert self.state == State.CLOSED
        self.state = State.SYN_RCVD
        self.recv_next = syn.seq + 1
        return [self._load(FLAG_SYN | FLAG_ACK, b"", now_us)]

    def send(self, data: bytes, now_us: int) -> list[bytes]:
        if self.state not in (State.ESTABLISHED, State.SYN_SENT, State.SYN_RCVD):
            raise TransportError(f"send in state {self.state.value}")
        if self._fin_pending or self.fin_sent:
            raise TransportError("send after close")
        for i in range(0, len(data), MAX_SEGMENT_PAYLOAD):
            self._send_queue.append(bytes(data[i : i + MAX_SEGMENT_PAYLOAD]))
        return self._pump(now_us)

    def close(self, now_us: int) -> list[bytes]:
        if self.state in (State.CLOSED_FINAL, State.CLOSED):
            self.state = State.CLOSED_FINAL
            return []
        if not self._fin_pending and not self.fin_sent:
            self._fin_pending = True
        return self._pump(now_us)

    def deliver(self) -> bytes:
        out = bytes(self._recv_buffer)
        self._recv_buffer.clear()
        return out

    def all_acked(self) -> bool:
        """True when every byte handed to send() has been acknowledged."""
        return self._in_flight is None and not self._send_queue

    # -- wire events ---------------------------------------------------------

    def on_segment(self, seg: Segment, now_us: int) -> list[bytes]:
        if self.state in (State.CLOSED, State.CLOSED_FINAL):
            return []
        if seg.has(FLAG_RST):
            self._die("reset by peer")
            return []

        out: list[bytes] = []
        if self.state == State.SYN_SENT:
            if seg.has(FLAG_SYN) and seg.has(FLAG_ACK) and seg.ack == self.send_next:
                self.recv_next = seg.seq + 1
                self._acked(seg.ack, now_us)
                self.state = State.ESTABLISHED
                out.append(self._bare_ack())
                out.extend(self._pump(now_us))
                if self.on_established:
                    self.on_established()
            return out

        if self.state == State.SYN_RCVD:
            if seg.has(FLAG_SYN):
                return [self._retransmit_segment()] if self._in_flight else []
            if seg.has(FLAG_ACK) and seg.ack == self.send_next:
                self._acked(seg.ack, now_us)
                self.state = State.ESTABLISHED
                out.extend(self._pump(now_us))
                if self.on_established:
                    self.on_established()
            if not (seg.payload or seg.has(FLAG_FIN)):
                return out
            # data may ride in with the handshake ACK; fall through

        if seg.has(FLAG_SYN):
            # Retransmitted handshake segment: our ACK was lost, repeat it.
            out.append(self._bare_ack())
            return out

        if seg.has(FLAG_ACK):
            self._acked(seg.ack, now_us)
            out.extend(self._pump(now_us))

        if seg.payload:
            if seg.seq == self.recv_next:
                self._recv_buffer.extend(seg.payload)
                self.recv_next += len(seg.payload)
                out.append(self._bare_ack())
                if self.on_data:
                    self.on_data()
            else:
                out.append(self._bare_ack())  # duplicate ACK, state unchanged

        if seg.has(FLAG_FIN):
            if seg.seq + len(seg.payload) == self.recv_next:
                self.recv_next += 1
                self.fin_received = True
                if self.state == State.ESTABLISHED:
                    self.state = State.FIN_WAIT
                self._maybe_finish()
            out.append(self._bare_ack())

        return out

    def on_timer(self, now_us: int) -> list[bytes]:
        inf = self._in_flight
        if inf is None or now_us < inf.deadline_us:
            return []
        limit = MAX_SYN_RETRIES if inf.flags & FLAG_SYN else MAX_DATA_RETRIES
        if inf.retries >= limit:
            self._die("retransmission limit")
            return []
        inf.retries += 1
        self.rto_us = min(self.rto_us * 2, RTO_CAP_US)
        inf.deadline_us = now_us + self.rto_us
        return [self._retransmit_segment()]

    def next_deadline(self) -> Optional[int]:
        return self._in_flight.deadline_us if self._in_flight else None

    # -- internals -----------------------------------------------------------

    def _load(self, flags: int, payload: bytes, now_us: int) -> bytes:
        """Put one segment in flight (stop-and-wait: only when none is)."""
        assert self._in_flight is None
        seq = self.send_next
        consumed = len(payload) + (1 if flags & (FLAG_SYN | FLAG_FIN) else 0)
        self.send_next += consumed
        self._in_flight = _InFlight(seq, payload, flags, now_us + self.rto_us)
        return self._encode(Segment(self.local_port, self.remote_port, seq, self.recv_next, flags, payload))

    def _pump(self, now_us: int) -> list[bytes]:
        if self._in_flight is not None or self.state not in (State.ESTABLISHED, State.FIN_WAIT):
            return []
        if self._send_queue:
            return [self._load(FLAG_ACK, self._send_queue.pop(0), now_us)]
        if self._fin_pending:
            self._fin_pending = False
            self.fin_sent = True
            if self.state == State.ESTABLISHED:
                self.state = State.FIN_WAIT
            return [self._load(FLAG_FIN | FLAG_ACK, b"", now_us)]
        return []

    def _acked(self, ack: int, now_us: int) -> None:
        inf = self._in_flight
        if inf is None:
            return
        end = inf.seq + len(inf.payload) + (1 if inf.flags & (FLAG_SYN | FLAG_FIN) else 0)
        if ack >= end:
            self._in_flight = None
            self.rto_us = RTO_INITIAL_US
            if inf.flags & FLAG_FIN:
                self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self.fin_sent and self.fin_received and self._in_flight is None:
            self.state = State.CLOSED_FINAL

    def _bare_ack(self) -> bytes:
        return self._encode(
            Segment(self.local_port, self.remote_port, self.send_next, self.recv_next, FLAG_ACK)
        )

    def _retransmit_segment(self) -> bytes:
        inf = self._in_flight
        return self._encode(
            Segment(self.local_port, self.remote_port, inf.seq, self.recv_next, inf.flags, inf.payload)
        )

    def _encode(self, seg: Segment) -> bytes:
        return encode_segment(seg, self.local_addr, self.remote_addr)

    def _die(self, reason: str) -> None:
        self.state = State.CLOSED_FINAL
        self.reset_reason = reason
        self._in_flight = None
        self._send_queue.clear()
        if self.on_reset:
            self.on_reset(reason)


@dataclass
class _Listener:
    port: int
    on_connection: Callable[["Connection"], None]


class Endpoint:
    """An IP-agnostic mini-TCP stack for one address: listeners, connections,
    checksum validation, RST generation, and timer aggregation.

    ip_send(dst_addr, segment_bytes) is the only downward dependency.
    """

    def __init__(self, addr: bytes, ip_send: Callable[[bytes, bytes], None]):
        self.addr = addr
        self.ip_send = ip_send
        self.connections: dict[tuple[bytes, int, int], Connection] = {}
        self._listeners: dict[int, _Listener] = {}
        self._next_ephemeral = 40000
        self.bad_checksum = 0
        self.rst_sent = 0

    def listen(self, port: int, on_connection: Callable[[Connection], None]) -> None:
        self._listeners[port] = _Listener(port, on_connection)

    def connect(self, remote_addr: bytes, remote_port: int, now_us: int,
                local_port: Optional[int] = None) -> Connection:
        if local_port is None:
            local_port = self._next_ephemeral
            self._next_ephemeral += 1
        conn = Connection(self.addr, local_port, remote_addr, remote_port)
        self.connections[(remote_addr, remote_port, local_port)] = conn
        self._transmit(conn, conn.open_active(now_us))
        return conn

    def send(self, conn: Connection, data: bytes, now_us: int) -> None:
        self._transmit(conn, conn.send(data, now_us))

    def close(self, conn: Connection, now_us: int) -> None:
        self._transmit(conn, conn.close(now_us))

    def on_ip_payload(self, src_addr: bytes, payload: bytes, now_us: int) -> None:
        if not verify_segment(payload, src_addr, self.addr):
            self.bad_checksum += 1
            return
        seg = decode_segment(payload)
        key = (src_addr, seg.src_port, seg.dst_port)
        conn = self.connections.get(key)
        if conn is None:
            if seg.has(FLAG_SYN) and not seg.has(FLAG_ACK) and seg.dst_port in self._listeners:
                listener = self._listeners[seg.dst_port]
                conn = Connection(self.addr, seg.dst_port, src_addr, seg.src_port)
                self.connections[key] = conn
                established_hook = listener.on_connection

                def _notify(c=conn, hook=established_hook):
                    hook(c)

                conn.on_established = _notify
                self._transmit(conn, conn.open_passive(seg, now_us))
            elif not seg.has(FLAG_RST):
                self.rst_sent += 1
                rst = Segment(seg.dst_port, seg.src_port, seg.ack, seg.seq, FLAG_RST)
                self.ip_send(src_addr, encode_segment(rst, self.addr, src_addr))
            return
        self._transmit(conn, conn.on_segment(seg, now_us))
        self._reap(key, conn)

    def on_timer(self, now_us: int) -> None:
        for key, conn in list(self.connections.items()):
            self._transmit(conn, conn.on_timer(now_us))
            self._reap(key, conn)

    def next_deadline(self) -> Optional[int]:
        deadlines = [c.next_deadline() for c in self.connections.values()]
        deadlines = [d for d in deadlines if d is not None]
        return min(deadlines) if deadlines else None

    def _transmit(self, conn: Connection, segments: list[bytes]) -> None:
        for seg_bytes in segments:
            self.ip_send(conn.remote_addr, seg_bytes)

    def _reap(self, key: tuple[bytes, int, int], conn: Connection) -> None:
        if conn.state == State.CLOSED_FINAL and not conn._recv_buffer:
            self.connections.pop(key, None)
