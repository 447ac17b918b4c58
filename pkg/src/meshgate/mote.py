"""Simulated mote firmware: sensing, telemetry client, command server, relays.

Sensor reading wire format (19 bytes, big-endian, crosses the gateway
unmodified):

    u16 mote_id, u8 appliance_id, u32 seq, u64 timestamp_ms, u32 watts_mw

Command payload on the mote's command port: two bytes [appliance_id, value]
with value 0 = relay off, 1 = relay on; the mote answers with a single byte,
0x06 on success and 0x15 on a bad command.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .aodv import AodvNode
from .netmodel import (
    LINK_BROADCAST,
    CodecError,
    FrameType,
    Ipv6Packet,
    LinkFrame,
)
from .sim import Radio, Rearmer, Simulator
from .sixlowpan import (
    MESH_PREFIX_LEN,
    ReassemblyBuffer,
    SixlowpanError,
    StaleFragment,
    TagAllocator,
    encode_for_link,
)
from .transport import COMMAND_PORT, TELEMETRY_PORT, Connection, Endpoint, State

READING_FORMAT = "!HBIQI"
READING_SIZE = struct.calcsize(READING_FORMAT)  # 19

ACK_OK = 0x06
ACK_BAD = 0x15

DEFAULT_HOP_LIMIT = 64
TELEMETRY_QUEUE_MAX = 60
RECONNECT_DELAY_US = 1_000_000


@dataclass(frozen=True)
class SensorReading:
    mote_id: int
    appliance_id: int
    seq: int
    timestamp_ms: int
    watts_mw: int


def encode_reading(r: SensorReading) -> bytes:
    return struct.pack(
        READING_FORMAT, r.mote_id, r.appliance_id, r.seq, r.timestamp_ms, r.watts_mw
    )


def decode_reading(b: bytes) -> SensorReading:
    if len(b) != READING_SIZE:
        raise ValueError(f"reading must be {READING_SIZE} bytes, got {len(b)}")
    return SensorReading(*struct.unpack(READING_FORMAT, b))


@dataclass
class ApplianceConfig:
    appliance_id: int
    base_watts: float
    noise_watts: float = 0.0
    initially_on: bool = True


class ConsumptionModel:
    """base + uniform(-noise, +noise), clamped at zero; zero when the relay is off."""

    def __init__(self, base_watts: float, noise_watts: float, rng):
        self.base_watts = base_watts
        self.noise_watts = noise_watts
        self._rng = rng

    def sample_mw(self, relay_on: bool) -> int:
        if not relay_on:
            return 0
        watts = self.base_watts
        if self.noise_watts:
            watts += self._rng.uniform(-self.noise_watts, self.noise_watts)
        return max(0, round(watts * 1000))


class MeshNode:
    """Shared mesh plumbing: routing, adaptation, frame forwarding."""

    def __init__(self, node_id: int, sim: Simulator, radio: Radio, mesh_prefix: bytes):
        assert len(mesh_prefix) == MESH_PREFIX_LEN
        self.node_id = node_id
        self.sim = sim
        self.radio = radio
        self.mesh_prefix = mesh_prefix
        self.ipv6 = mesh_prefix + node_id.to_bytes(2, "big")
        self.tags = TagAllocator()
        self.reassembly = ReassemblyBuffer(mesh_prefix)
        self.aodv = AodvNode(
            node_id, sim, self._send_control, self._send_data, self._on_unreachable
        )
        self._frame_seq = 0
        self.forwarded = 0
        self.forward_drops = 0
        self.adaptation_errors = 0
        self.stale_fragments = 0
        self.unreachable_packets = 0
        radio.attach(node_id, self.on_frame, self.on_link_fail)

    def link_of(self, dst6: bytes) -> int:
        """Hierarchical addressing: on-mesh suffix, or the sink for the world beyond."""
        if dst6[:MESH_PREFIX_LEN] == self.mesh_prefix:
            return int.from_bytes(dst6[MESH_PREFIX_LEN:], "big")
        return 0

    def send_ipv6(self, packet: Ipv6Packet) -> None:
        dest_link = self.link_of(packet.dst)
        if dest_link == self.node_id:
            self.on_packet(packet)
            return
        payloads = encode_for_link(packet, self.mesh_prefix, self.tags)
        frames = [
            LinkFrame(dest_link, self.node_id, self._next_seq(), FrameType.DATA, pl)
            for pl in payloads
        ]
        self.aodv.send_via(dest_link, frames, self.sim.now_us)

    def on_frame(self, frame: LinkFrame, radio_src: int) -> None:
        now = self.sim.now_us
        if frame.frame_type == FrameType.AODV_CONTROL:
            self.aodv.on_control(frame.payload, radio_src, now)
            return
        if frame.frame_type != FrameType.DATA:
            return
        if frame.dst_short in (self.node_id, LINK_BROADCAST):
            try:
                packet = self.reassembly.reassemble(frame.src_short, frame.payload, now)
            except StaleFragment:
                self.stale_fragments += 1
                return
            except (SixlowpanError, CodecError):
                self.adaptation_errors += 1
                return
            if packet is not None:
                self.on_packet(packet)
        else:
            self._forward(frame, radio_src)

    def _forward(self, frame: LinkFrame, radio_src: int) -> None:
        next_hop = self.aodv.resolve(frame.dst_short, self.sim.now_us)
        if next_hop is None:
            self.forward_drops += 1
            self.aodv.report_no_route(frame.dst_short, radio_src)
            return
        self.forwarded += 1
        self.radio.send(self.node_id, next_hop, frame)

    def on_packet(self, packet: Ipv6Packet) -> None:
        raise NotImplementedError

    def on_link_fail(self, radio_dst: int, frame: LinkFrame) -> None:
        self.aodv.on_link_break(radio_dst, self.sim.now_us)

    def _send_control(self, payload: bytes, radio_dst: int) -> None:
        frame = LinkFrame(
            radio_dst, self.node_id, self._next_seq(), FrameType.AODV_CONTROL, payload
        )
        self.radio.send(self.node_id, radio_dst, frame)

    def _send_data(self, next_hop: int, frames: list[LinkFrame]) -> None:
        for frame in frames:
            self.radio.send(self.node_id, next_hop, frame)

    def _on_unreachable(self, dest: int, frames: list[LinkFrame]) -> None:
        self.unreachable_packets += len(frames)

    def _next_seq(self) -> int:
        self._frame_seq = (self._frame_seq + 1) & 0xFF
        return self._frame_seq


class Mote(MeshNode):
    """A sensor node: periodic consumption readings up, relay commands down."""

    def __init__(
        self,
        node_id: int,
        sim: Simulator,
        radio: Radio,
        mesh_prefix: bytes,
        gateway_ipv6: bytes,
        appliances: list[ApplianceConfig],
        sense_period_us: int = 1_000_000,
        sense_phase_us: int = 0,
        sense_dither_us: int = 0,
        on_reading_sent: Optional[Callable[[SensorReading, int], None]] = None,
    ):
        super().__init__(node_id, sim, radio, mesh_prefix)
        self.gateway_ipv6 = gateway_ipv6
        self.relays: dict[int, bool] = {}
        self.models: dict[int, ConsumptionModel] = {}
        for app in appliances:
            self.relays[app.appliance_id] = app.initially_on
            self.models[app.appliance_id] = ConsumptionModel(
                app.base_watts, app.noise_watts, sim.rng
            )
        self.sense_period_us = sense_period_us
        self.sense_phase_us = sense_phase_us
        self.sense_dither_us = sense_dither_us
        self.on_reading_sent = on_reading_sent

        self.reading_seq = 0
        self.telemetry_queue: deque[SensorReading] = deque()
        self.telemetry_overflow = 0
        self.bad_commands = 0
        self.commands_applied = 0
        # Readings handed to the live connection but possibly unacknowledged;
        # requeued on connection loss (the gateway dedups replays).
        self._unconfirmed: deque[SensorReading] = deque()

        self.endpoint = Endpoint(self.ipv6, self._transport_send)
        self._timer = Rearmer(sim, self.endpoint.next_deadline, self._on_timer)
        self._telemetry: Optional[Connection] = None
        self._command_buffers: dict[int, bytearray] = {}
        self.endpoint.listen(COMMAND_PORT, self._on_command_connection)
        self._tick_index = 0
        self._sense_origin = 0

    # -- lifecycle -----------------------------------------------------------

    def start(self, boot_delay_us: int = 0) -> None:
        self._sense_origin = self.sim.now_us
        self.sim.schedule_in(boot_delay_us, self._connect_telemetry)
        first = self.sense_phase_us + self._dither()
        self.sim.schedule_in(first, self._sense_tick)

    def _dither(self) -> int:
        if self.sense_dither_us:
            return int(self.sim.rng.uniform(0, self.sense_dither_us))
        return 0

    # -- sensing -------------------------------------------------------------

    def _sense_tick(self) -> None:
        now = self.sim.now_us
        for appliance_id in self.relays:
            self.reading_seq += 1
            reading = SensorReading(
                mote_id=self.node_id,
                appliance_id=appliance_id,
                seq=self.reading_seq,
                timestamp_ms=now // 1000,
                watts_mw=self.models[appliance_id].sample_mw(self.relays[appliance_id]),
            )
            self.sim.emit(
                "sense", mote=self.node_id, app=appliance_id, seq=reading.seq,
                mw=reading.watts_mw,
            )
            self._send_reading(reading)
        self._tick_index += 1
        next_at = (
            self._sense_origin
            + self.sense_phase_us
            + self._tick_index * self.sense_period_us
            + self._dither()
        )
        self.sim.schedule(max(next_at, now), self._sense_tick)

    def _send_reading(self, reading: SensorReading) -> None:
        conn = self._telemetry
        if conn is None or conn.state != State.ESTABLISHED:
            if len(self.telemetry_queue) >= TELEMETRY_QUEUE_MAX:
                self.telemetry_queue.popleft()
                self.telemetry_overflow += 1
            self.telemetry_queue.append(reading)
            return
        if conn.all_acked():
            self._unconfirmed.clear()
        self._unconfirmed.append(reading)
        self.endpoint.send(conn, encode_reading(reading), self.sim.now_us)
        self._timer.poke()
        if self.on_reading_sent:
            self.on_reading_sent(reading, self.sim.now_us)

    # -- telemetry connection ------------------------------------------------

    def _connect_telemetry(self) -> None:
        if self._telemetry is not None:
            return
        conn = self.endpoint.connect(self.gateway_ipv6, TELEMETRY_PORT, self.sim.now_us)
        conn.on_established = self._on_telemetry_up
        conn.on_reset = self._on_telemetry_down
        self._telemetry = conn
        self._timer.poke()

    def _on_telemetry_up(self) -> None:
        while self.telemetry_queue:
            reading = self.telemetry_queue.popleft()
            self._unconfirmed.append(reading)
            self.endpoint.send(self._telemetry, encode_reading(reading), self.sim.now_us)
            if self.on_reading_sent:
                self.on_reading_sent(reading, self.sim.now_us)
        self._timer.poke()

    def _on_telemetry_down(self, reason: str) -> None:
        self._telemetry = None
        while self._unconfirmed:
            self.telemetry_queue.appendleft(self._unconfirmed.pop())
        self.sim.schedule_in(RECONNECT_DELAY_US, self._connect_telemetry)

    # -- command server ------------------------------------------------------

    def _on_command_connection(self, conn: Connection) -> None:
        self._command_buffers[id(conn)] = bytearray()
        conn.on_data = lambda c=conn: self._on_command_data(c)

    def _on_command_data(self, conn: Connection) -> None:
        buf = self._command_buffers.setdefault(id(conn), bytearray())
        buf.extend(conn.deliver())
        while len(buf) >= 2:
            appliance_id, value = buf[0], buf[1]
            del buf[:2]
            ack = self.handle_command(appliance_id, value)
            self.endpoint.send(conn, bytes([ack]), self.sim.now_us)
        self._timer.poke()

    def handle_command(self, appliance_id: int, value: int) -> int:
        """Apply one relay command; returns the ack byte."""
        if value not in (0, 1) or appliance_id not in self.relays:
            self.bad_commands += 1
            return ACK_BAD
        self.relays[appliance_id] = bool(value)
        self.commands_applied += 1
        self.sim.emit("relay", mote=self.node_id, app=appliance_id, on=value)
        return ACK_OK

    # -- plumbing ------------------------------------------------------------

    def _transport_send(self, dst6: bytes, seg_bytes: bytes) -> None:
        self.send_ipv6(
            Ipv6Packet(self.ipv6, dst6, 6, DEFAULT_HOP_LIMIT, seg_bytes)
        )

    def on_packet(self, packet: Ipv6Packet) -> None:
        if packet.dst != self.ipv6 or packet.next_header != 6:
            self.adaptation_errors += 1
            return
        self.endpoint.on_ip_payload(packet.src, packet.payload, self.sim.now_us)
        self._timer.poke()

    def _on_timer(self) -> None:
        self.endpoint.on_timer(self.sim.now_us)
