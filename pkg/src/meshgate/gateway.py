"""Gateway: stateless IPv4<->IPv6 packet rewriting with transport-checksum
repair, the telemetry server motes report to, a durable store-and-forward
buffer toward the middleware, and per-packet transformation timing.

The buffer is an append-only JSONL journal plus an entry-count cursor, both
fsynced, so accepted readings survive a gateway restart; (mote_id, seq)
deduplication is rebuilt by scanning the journal. Delivery to the middleware
is an HTTP POST of one reading at a time; the middleware ingest is idempotent,
which absorbs replays after a crash between delivery and cursor advance.
"""

from __future__ import annotations

import json
import os
import statistics
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

from . import addrmap
from .addrmap import (
    AddressMapConfig,
    NotGatewayPrefix,
    NotMeshAddress,
    NotPoolAddress,
)
from .mote import READING_SIZE, SensorReading, decode_reading
from .netmodel import (
    CodecError,
    Ipv4Packet,
    Ipv6Packet,
    SerialDecoder,
    decode_ipv4,
    decode_ipv6,
    encode_ipv4,
    encode_ipv6,
    encode_serial_frame,
)
from .sim import Rearmer
from .transport import (
    SEGMENT_HEADER_SIZE,
    TELEMETRY_PORT,
    Connection,
    Endpoint,
    segment_checksum,
    verify_segment,
)

MINITCP_PROTOCOL = 6
LINK_RETRY_US = 2_000_000
HISTOGRAM_BIN_US = 10


class GatewayError(Exception):
    pass


class UnsupportedProtocol(GatewayError):
    pass


class InsufficientSamples(GatewayError):
    pass


def rewrite_segment_checksum(seg: bytes, src_addr: bytes, dst_addr: bytes) -> bytes:
    """Recompute the mini-TCP checksum for a new pseudo-header; payload bytes
    other than the checksum field are untouched."""
    if len(seg) < SEGMENT_HEADER_SIZE:
        raise UnsupportedProtocol("transport payload shorter than a segment header")
    out = bytearray(seg)
    out[13:15] = b"\x00\x00"
    cksum = segment_checksum(src_addr, dst_addr, bytes(out))
    out[13] = cksum >> 8
    out[14] = cksum & 0xFF
    return bytes(out)


def translate_4to6(p: Ipv4Packet, cfg: AddressMapConfig) -> Ipv6Packet:
    if not addrmap.is_pool_address(p.dst, cfg):
        raise NotPoolAddress(f"{addrmap.format_ipv4(p.dst)} outside the mote pool")
    if p.protocol != MINITCP_PROTOCOL:
        raise UnsupportedProtocol(f"protocol {p.protocol}")
    src6 = addrmap.host4_to_virtual6(p.src, cfg)
    dst6 = addrmap.virtual4_to_mote6(p.dst, cfg)
    return Ipv6Packet(
        src6, dst6, MINITCP_PROTOCOL, p.ttl, rewrite_segment_checksum(p.payload, src6, dst6)
    )


def translate_6to4(p: Ipv6Packet, cfg: AddressMapConfig) -> Ipv4Packet:
    if not addrmap.is_gateway_prefixed(p.dst, cfg):
        raise NotGatewayPrefix(f"{addrmap.format_ipv6(p.dst)} outside the gateway prefix")
    if not addrmap.is_mesh_address(p.src, cfg):
        raise NotMeshAddress(f"{addrmap.format_ipv6(p.src)} outside the mesh prefix")
    if p.next_header != MINITCP_PROTOCOL:
        raise UnsupportedProtocol(f"next header {p.next_header}")
    src4 = addrmap.mote6_to_virtual4(p.src, cfg)
    dst4 = addrmap.virtual6_to_host4(p.dst, cfg)
    return Ipv4Packet(
        src4, dst4, MINITCP_PROTOCOL, p.hop_limit, rewrite_segment_checksum(p.payload, src4, dst4)
    )


class ReadingBuffer:
    """Durable FIFO of reading dicts with (mote_id, seq) dedup.

    journal.log holds one JSON object per line; cursor holds the count of
    delivered entries. The journal truncates once fully delivered.
    """

    def __init__(self, dir_path: str | Path):
        self.dir = Path(dir_path)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.dir / "journal.log"
        self.cursor_path = self.dir / "cursor"
        self._seen: set[tuple[int, int]] = set()
        self._entries: list[dict] = []
        self._delivered = 0
        self._load()
        self._journal = open(self.journal_path, "a", encoding="utf-8")

    def _load(self) -> None:
        if self.journal_path.exists():
            with open(self.journal_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._entries.append(entry)
                    self._seen.add((entry["mote_id"], entry["seq"]))
        if self.cursor_path.exists():
            text = self.cursor_path.read_text().strip()
            self._delivered = int(text) if text else 0
        self._delivered = min(self._delivered, len(self._entries))

    def append(self, entry: dict) -> bool:
        key = (entry["mote_id"], entry["seq"])
        if key in self._seen:
            return False
        self._seen.add(key)
        self._entries.append(entry)
        self._journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
        self._journal.flush()
        os.fsync(self._journal.fileno())
        return True

    def pending(self) -> list[dict]:
        return self._entries[self._delivered :]

    @property
    def depth(self) -> int:
        return len(self._entries) - self._delivered

    def mark_delivered(self, count: int) -> None:
        self._delivered += count
        if self._delivered >= len(self._entries):
            self._journal.close()
            self._journal = open(self.journal_path, "w", encoding="utf-8")
            self._journal.flush()
            os.fsync(self._journal.fileno())
            self._entries.clear()
            self._delivered = 0
        self._write_cursor()

    def _write_cursor(self) -> None:
        with open(self.cursor_path, "w", encoding="utf-8") as fh:
            fh.write(str(self._delivered))
            fh.flush()
            os.fsync(fh.fileno())

    def close(self) -> None:
        self._journal.close()


class NullMiddlewareLink:
    """Accepts everything; useful for headless simulation runs."""

    def __init__(self):
        self.accepted: list[dict] = []

    def post_reading(self, entry: dict) -> bool:
        self.accepted.append(entry)
        return True


class HttpMiddlewareLink:
    """Delivers readings with HTTP POST /ingest; any failure reads as link-down.

    set_fault(True) simulates an outage without touching the server.
    """

    def __init__(self, base_url: str, timeout_s: float = 2.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()
        self._fault = False

    def set_fault(self, fault: bool) -> None:
        self._fault = fault

    def post_reading(self, entry: dict) -> bool:
        if self._fault:
            return False
        try:
            resp = self._session.post(
                f"{self.base_url}/ingest", json=entry, timeout=self.timeout_s
            )
            return resp.status_code == 200
        except Exception:
            return False


class CallableMiddlewareLink:
    """Wraps any callable(entry) -> bool; test seam for in-process middleware."""

    def __init__(self, fn: Callable[[dict], bool]):
        self._fn = fn
        self._fault = False

    def set_fault(self, fault: bool) -> None:
        self._fault = fault

    def post_reading(self, entry: dict) -> bool:
        if self._fault:
            return False
        return self._fn(entry)


class WallScheduler:
    """Duck-typed stand-in for the simulator when the gateway runs standalone."""

    def __init__(self):
        self._t0 = time.monotonic_ns()
        self._lock = threading.Lock()

    @property
    def now_us(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    def schedule_in(self, delay_us: int, fn) -> None:
        timer = threading.Timer(delay_us / 1e6, fn)
        timer.daemon = True
        timer.start()

    def schedule(self, at_us: int, fn) -> None:
        self.schedule_in(max(0, at_us - self.now_us), fn)

    def emit(self, kind: str, **fields) -> None:
        pass


@dataclass
class GatewayCounters:
    translated_4to6: int = 0
    translated_6to4: int = 0
    local_delivered: int = 0
    not_pool: int = 0
    not_gateway_prefix: int = 0
    unsupported_protocol: int = 0
    malformed: int = 0
    bad_checksum: int = 0
    hop_exhausted: int = 0
    readings_ingested: int = 0
    readings_duplicate: int = 0
    serial_crc_errors: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class GatewayCore:
    """Bidirectional pump between the external IPv4 boundary and the serial
    tunnel, plus the telemetry server and the store-and-forward buffer."""

    def __init__(
        self,
        cfg: AddressMapConfig,
        own_ipv4: bytes,
        sim,
        serial_tx: Callable[[bytes], None],
        external_tx: Callable[[bytes], None],
        buffer_dir: str | Path,
        middleware_link=None,
        on_reading: Optional[Callable[[SensorReading, int], None]] = None,
    ):
        cfg.require_gateway_ipv4(own_ipv4)
        self.cfg = cfg
        self.own_ipv4 = own_ipv4
        self.sim = sim
        self.serial_tx = serial_tx
        self.external_tx = external_tx
        self.link = middleware_link or NullMiddlewareLink()
        self.on_reading = on_reading
        self.counters = GatewayCounters()
        self.timing_log_us: list[float] = []
        self._timing_lock = threading.Lock()
        self.link_up = True
        self._retry_armed = False
        self._closed = False

        self.buffer = ReadingBuffer(buffer_dir)
        self._decoder = SerialDecoder()
        self.telemetry = Endpoint(own_ipv4, self._telemetry_ip_send)
        self.telemetry.listen(TELEMETRY_PORT, self._on_telemetry_connection)
        self._recv_buffers: dict[int, bytearray] = {}
        self._timer = Rearmer(sim, self.telemetry.next_deadline, self._on_timer)

    # -- pump: external IPv4 boundary -> mesh ---------------------------------

    def on_external_packet(self, raw: bytes) -> None:
        if self._closed:
            return
        t0 = time.perf_counter_ns()
        try:
            p4 = decode_ipv4(raw)
        except CodecError:
            self.counters.malformed += 1
            return
        if not addrmap.is_pool_address(p4.dst, self.cfg):
            self.counters.not_pool += 1
            return
        if p4.protocol != MINITCP_PROTOCOL:
            self.counters.unsupported_protocol += 1
            return
        if p4.ttl == 0:
            self.counters.hop_exhausted += 1
            return
        if not verify_segment(p4.payload, p4.src, p4.dst):
            self.counters.bad_checksum += 1
            return
        p6 = translate_4to6(p4, self.cfg)
        self.serial_tx(encode_serial_frame(encode_ipv6(p6)))
        self._record_timing(t0)
        self.counters.translated_4to6 += 1
        self.sim.emit("xlat46", len=len(raw))

    # -- pump: serial tunnel -> external/local --------------------------------

    def on_serial_bytes(self, data: bytes) -> None:
        if self._closed:
            return
        before = self._decoder.errors
        for raw in self._decoder.feed(data):
            self._on_serial_packet(raw)
        self.counters.serial_crc_errors += self._decoder.errors - before

    def _on_serial_packet(self, raw: bytes) -> None:
        t0 = time.perf_counter_ns()
        try:
            p6 = decode_ipv6(raw)
        except CodecError:
            self.counters.malformed += 1
            return
        if not addrmap.is_gateway_prefixed(p6.dst, self.cfg):
            self.counters.not_gateway_prefix += 1
            return
        if p6.next_header != MINITCP_PROTOCOL:
            self.counters.unsupported_protocol += 1
            return
        if not verify_segment(p6.payload, p6.src, p6.dst):
            self.counters.bad_checksum += 1
            return
        try:
            p4 = translate_6to4(p6, self.cfg)
        except NotMeshAddress:
            self.counters.malformed += 1
            return
        if p4.dst == self.own_ipv4:
            self.telemetry.on_ip_payload(p4.src, p4.payload, self.sim.now_us)
            self._timer.poke()
            self.counters.local_delivered += 1
        else:
            self.external_tx(encode_ipv4(p4))
        self._record_timing(t0)
        self.counters.translated_6to4 += 1
        self.sim.emit("xlat64", len=len(raw))

    def _record_timing(self, t0_ns: int) -> None:
        micros = (time.perf_counter_ns() - t0_ns) / 1000.0
        with self._timing_lock:
            self.timing_log_us.append(micros)

    # -- telemetry server ------------------------------------------------------

    def _telemetry_ip_send(self, dst4: bytes, seg_bytes: bytes) -> None:
        """Outbound gateway traffic to motes rides the same translation path."""
        p4 = Ipv4Packet(self.own_ipv4, dst4, MINITCP_PROTOCOL, 64, seg_bytes)
        try:
            p6 = translate_4to6(p4, self.cfg)
        except (NotPoolAddress, UnsupportedProtocol):
            self.counters.malformed += 1
            return
        self.serial_tx(encode_serial_frame(encode_ipv6(p6)))

    def _on_telemetry_connection(self, conn: Connection) -> None:
        self._recv_buffers[id(conn)] = bytearray()
        conn.on_data = lambda c=conn: self._on_telemetry_data(c)

    def _on_telemetry_data(self, conn: Connection) -> None:
        buf = self._recv_buffers.setdefault(id(conn), bytearray())
        buf.extend(conn.deliver())
        while len(buf) >= READING_SIZE:
            reading = decode_reading(bytes(buf[:READING_SIZE]))
            del buf[:READING_SIZE]
            self.sim.emit(
                "reading", mote=reading.mote_id, seq=reading.seq, mw=reading.watts_mw
            )
            if self.on_reading:
                self.on_reading(reading, self.sim.now_us)
            self.ingest_and_forward(reading)
        self._timer.poke()

    def _on_timer(self) -> None:
        self.telemetry.on_timer(self.sim.now_us)

    # -- store and forward -----------------------------------------------------

    def ingest_and_forward(self, reading: SensorReading) -> None:
        entry = asdict(reading)
        if not self.buffer.append(entry):
            self.counters.readings_duplicate += 1
            return
        self.counters.readings_ingested += 1
        if self.link_up:
            self.flush()
        else:
            self._arm_retry()

    def flush(self) -> None:
        """Deliver pending readings in order until the buffer drains or the
        link fails; called on ingest, on recovery probes, and by tests."""
        while self.link_up and self.buffer.depth:
            batch = self.buffer.pending()[:64]
            delivered = 0
            for entry in batch:
                if self.link.post_reading(entry):
                    delivered += 1
                else:
                    self.link_up = False
                    break
            if delivered:
                self.buffer.mark_delivered(delivered)
        if not self.link_up:
            self._arm_retry()

    def notify_link_up(self) -> None:
        self.link_up = True
        self.flush()

    def _arm_retry(self) -> None:
        if self._retry_armed or self._closed:
            return
        self._retry_armed = True
        self.sim.schedule_in(LINK_RETRY_US, self._retry_link)

    def _retry_link(self) -> None:
        self._retry_armed = False
        if self._closed or self.link_up or not self.buffer.depth:
            return
        # Optimistic probe: flush re-marks the link down on the first failure.
        self.link_up = True
        self.flush()

    # -- reporting ---------------------------------------------------------------

    def timing_report(self) -> dict:
        with self._timing_lock:
            samples = list(self.timing_log_us)
        return timing_report_from_samples(samples)

    def close(self) -> None:
        self._closed = True
        self.buffer.close()


def timing_report_from_samples(samples: list[float]) -> dict:
    if len(samples) < 2:
        raise InsufficientSamples(f"{len(samples)} timing samples, need at least 2")
    mean = statistics.fmean(samples)
    jitter = statistics.pstdev(samples)
    nbins = int(max(samples) // HISTOGRAM_BIN_US) + 1
    bins = [0] * nbins
    for s in samples:
        bins[int(s // HISTOGRAM_BIN_US)] += 1
    return {
        "count": len(samples),
        "mean_us": mean,
        "jitter_us": jitter,
        "bin_width_us": HISTOGRAM_BIN_US,
        "bins": bins,
    }
