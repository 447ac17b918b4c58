"""Assembles a scenario into a live simulated network: topology, motes, sink,
gateway, and external IPv4 hosts, plus the scripted scenario events.

Two time domains meet here. Everything mesh-side runs in simulated time; the
middleware link (HTTP) and the gateway's transformation stopwatch run on the
wall clock. The serial pipe and the external packet boundary are the explicit
crossing points, each modeled as a latency-delayed handoff scheduled on the
simulator.
"""

from __future__ import annotations

import tempfile
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from . import addrmap as amap
from .config import ScenarioConfig, ScenarioEvent
from .gateway import GatewayCore, NullMiddlewareLink
from .middleware import CommandResult, MoteInfo
from .mote import ApplianceConfig, Mote, SensorReading
from .netmodel import CodecError, Ipv4Packet, decode_ipv4, encode_ipv4
from .sim import Channel, Radio, Rearmer, Simulator, Topology, TraceWriter
from .sink import Sink
from .transport import COMMAND_PORT, Connection, Endpoint

CLIENT_TIMEOUT_DEFAULT_S = 30.0


@dataclass
class CommandRequest:
    mote_id: int
    appliance_id: int
    value: int
    started_us: int
    done: bool = False
    ack: Optional[int] = None
    rtt_us: Optional[int] = None
    error: Optional[str] = None
    on_done: Optional[Callable[["CommandRequest"], None]] = None

    def finish(self, ack: Optional[int], rtt_us: Optional[int], error: Optional[str]) -> None:
        if self.done:
            return
        self.done = True
        self.ack = ack
        self.rtt_us = rtt_us
        self.error = error
        if self.on_done:
            self.on_done(self)


class ExternalHost:
    """A simulated IPv4 host on the gateway's external boundary (the client)."""

    def __init__(self, world: "World", ipv4: bytes):
        self.world = world
        self.ipv4 = ipv4
        self.endpoint = Endpoint(ipv4, self._ip_send)
        self._timer = Rearmer(world.sim, self.endpoint.next_deadline, self._on_timer)

    def _ip_send(self, dst4: bytes, seg_bytes: bytes) -> None:
        packet = Ipv4Packet(self.ipv4, dst4, 6, 64, seg_bytes)
        self.world.external_to_gateway(encode_ipv4(packet))

    def on_ip_packet(self, raw: bytes) -> None:
        try:
            packet = decode_ipv4(raw)
        except CodecError:
            return
        self.endpoint.on_ip_payload(packet.src, packet.payload, self.world.sim.now_us)
        self._timer.poke()

    def _on_timer(self) -> None:
        self.endpoint.on_timer(self.world.sim.now_us)

    def start_command(self, mote_v4: bytes, appliance_id: int, value: int) -> CommandRequest:
        sim = self.world.sim
        req = CommandRequest(0, appliance_id, value, sim.now_us)
        conn = self.endpoint.connect(mote_v4, COMMAND_PORT, sim.now_us)

        def on_established(c: Connection = conn):
            self.endpoint.send(c, bytes([appliance_id, value]), sim.now_us)
            self._timer.poke()

        def on_data(c: Connection = conn):
            data = c.deliver()
            if data and not req.done:
                req.finish(data[0], sim.now_us - req.started_us, None)
                self.endpoint.close(c, sim.now_us)
                self._timer.poke()

        conn.on_established = on_established
        conn.on_data = on_data
        conn.on_reset = lambda reason: req.finish(None, None, reason)
        self._timer.poke()
        return req


class World:
    def __init__(
        self,
        cfg: ScenarioConfig,
        trace: Optional[TraceWriter] = None,
        buffer_dir: Optional[str] = None,
        middleware_link=None,
    ):
        self.cfg = cfg
        self.sim = Simulator(seed=cfg.seed, trace=trace)
        self.topology = build_topology(cfg, self.sim.rng)
        self.channel = Channel(self.sim, self.topology)
        self.radio = Radio(self.sim, self.topology, self.channel)

        self.send_log: dict[tuple[int, int], int] = {}
        self.recv_log: list[tuple[int, int, int]] = []

        self.sink = Sink(self.sim, self.radio, cfg.addrmap.mesh_prefix6, self._sink_to_gateway)

        gateway_v6 = amap.host4_to_virtual6(cfg.gateway_ipv4, cfg.addrmap)
        appliances = [
            ApplianceConfig(a.appliance_id, a.base_watts, a.noise_watts, a.initially_on)
            for a in cfg.appliances
        ]
        period_us = int(cfg.sense_period_s * 1_000_000)
        self.motes: dict[int, Mote] = {}
        for mote_id in range(1, cfg.motes + 1):
            phase_us = int(self.sim.rng.uniform(0, cfg.sense_phase_max_s * 1_000_000))
            mote = Mote(
                mote_id,
                self.sim,
                self.radio,
                cfg.addrmap.mesh_prefix6,
                gateway_v6,
                appliances,
                sense_period_us=period_us,
                sense_phase_us=phase_us,
                sense_dither_us=int(cfg.sense_dither_ms * 1000),
                on_reading_sent=self._on_reading_sent,
            )
            self.motes[mote_id] = mote

        self._buffer_dir = buffer_dir or tempfile.mkdtemp(prefix="meshgate-buffer-")
        self.middleware_link = middleware_link or NullMiddlewareLink()
        self.gateway = self._make_gateway()

        self.client = ExternalHost(self, cfg.client_ipv4)
        self.external_hosts: dict[bytes, ExternalHost] = {cfg.client_ipv4: self.client}
        self.external_unroutable = 0

        self.command_results: list[CommandRequest] = []
        self._pending_commands: list = []
        self._pending_lock = threading.Lock()

        for event in cfg.events:
            self.sim.schedule(
                int(event.at_s * 1_000_000), lambda e=event: self.apply_event(e)
            )
        for mote in self.motes.values():
            mote.start(boot_delay_us=10_000 + mote.node_id * 1_000)

    # -- boundaries ------------------------------------------------------------

    def _make_gateway(self) -> GatewayCore:
        return GatewayCore(
            self.cfg.addrmap,
            self.cfg.gateway_ipv4,
            self.sim,
            serial_tx=self._gateway_to_sink,
            external_tx=self._gateway_to_external,
            buffer_dir=self._buffer_dir,
            middleware_link=self.middleware_link,
            on_reading=self._on_gateway_reading,
        )

    def _sink_to_gateway(self, data: bytes) -> None:
        self.sim.schedule_in(
            self.cfg.serial_latency_us, lambda: self.gateway.on_serial_bytes(data)
        )

    def _gateway_to_sink(self, data: bytes) -> None:
        self.sim.schedule_in(
            self.cfg.serial_latency_us, lambda: self.sink.on_serial_bytes(data)
        )

    def external_to_gateway(self, raw: bytes) -> None:
        self.sim.schedule_in(
            self.cfg.external_latency_us, lambda: self.gateway.on_external_packet(raw)
        )

    def _gateway_to_external(self, raw: bytes) -> None:
        try:
            packet = decode_ipv4(raw)
        except CodecError:
            self.external_unroutable += 1
            return
        host = self.external_hosts.get(packet.dst)
        if host is None:
            self.external_unroutable += 1
            return
        self.sim.schedule_in(
            self.cfg.external_latency_us, lambda: host.on_ip_packet(raw)
        )

    def _on_reading_sent(self, reading: SensorReading, now_us: int) -> None:
        self.send_log.setdefault((reading.mote_id, reading.seq), now_us)

    def _on_gateway_reading(self, reading: SensorReading, now_us: int) -> None:
        self.recv_log.append((reading.mote_id, reading.seq, now_us))

    # -- running ---------------------------------------------------------------

    def run_for(self, seconds: float) -> None:
        self.sim.run_until(self.sim.now_us + int(seconds * 1_000_000))

    def run_until_s(self, t_s: float) -> None:
        self.sim.run_until(int(t_s * 1_000_000))

    def send_command(
        self, mote_id: int, appliance_id: int, value: int,
        timeout_s: float = CLIENT_TIMEOUT_DEFAULT_S,
    ) -> CommandResult:
        """Issue a client command and drive the simulation until it resolves."""
        if mote_id not in self.motes:
            return CommandResult("timeout")
        mote_v4 = amap.mote6_to_virtual4(self.motes[mote_id].ipv6, self.cfg.addrmap)
        req = self.client.start_command(mote_v4, appliance_id, value)
        req.mote_id = mote_id
        deadline = self.sim.now_us + int(timeout_s * 1_000_000)
        while not req.done:
            next_time = self.sim.peek_time()
            if next_time is None or next_time > deadline:
                break
            self.sim.step()
        return self._result_of(req)

    @staticmethod
    def _result_of(req: CommandRequest) -> CommandResult:
        from .mote import ACK_OK

        if not req.done or req.ack is None:
            return CommandResult("timeout")
        if req.ack != ACK_OK:
            return CommandResult("bad", ack=req.ack)
        return CommandResult("ok", ack=req.ack, rtt_ms=req.rtt_us / 1000.0)

    # -- serve-mode command queue ------------------------------------------------

    def submit_command(self, mote_id: int, appliance_id: int, value: int,
                       reply: Callable[[CommandResult], None]) -> None:
        """Thread-safe entry: queue a command for the realtime driver loop."""
        with self._pending_lock:
            self._pending_commands.append((mote_id, appliance_id, value, reply))

    def pump_pending_commands(self) -> None:
        """Called from the simulation-owning thread."""
        with self._pending_lock:
            pending, self._pending_commands = self._pending_commands, []
        for mote_id, appliance_id, value, reply in pending:
            if mote_id not in self.motes:
                reply(CommandResult("timeout"))
                continue
            mote_v4 = amap.mote6_to_virtual4(self.motes[mote_id].ipv6, self.cfg.addrmap)
            req = self.client.start_command(mote_v4, appliance_id, value)
            req.mote_id = mote_id
            req.on_done = lambda r, cb=reply: cb(self._result_of(r))

    # -- scripted events -----------------------------------------------------------

    def apply_event(self, event: ScenarioEvent) -> None:
        self.sim.emit("scenario_event", action=event.action)
        if event.action == "command":
            mote = self.motes.get(event.mote)
            if mote is None:
                return
            mote_v4 = amap.mote6_to_virtual4(mote.ipv6, self.cfg.addrmap)
            req = self.client.start_command(mote_v4, event.appliance, event.value)
            req.mote_id = event.mote
            self.command_results.append(req)
        elif event.action == "kill_link":
            self.topology.remove_link(event.a, event.b)
        elif event.action == "restore_link":
            self.topology.add_link(
                event.a, event.b, *self._link_params_for(event.a, event.b)
            )
        elif event.action == "middleware_down":
            if hasattr(self.middleware_link, "set_fault"):
                self.middleware_link.set_fault(True)
        elif event.action == "middleware_up":
            if hasattr(self.middleware_link, "set_fault"):
                self.middleware_link.set_fault(False)
            self.gateway.notify_link_up()
        elif event.action == "serial_down":
            self.sink.serial_up = False
        elif event.action == "serial_up":
            self.sink.serial_up = True

    def _link_params_for(self, a: int, b: int) -> tuple[int, float]:
        latency, loss = self.cfg.link_latency_us, self.cfg.link_loss
        for o in self.cfg.link_overrides:
            if {o.a, o.b} == {a, b}:
                if o.latency_us is not None:
                    latency = o.latency_us
                if o.loss is not None:
                    loss = o.loss
        return latency, loss

    # -- management ------------------------------------------------------------------

    def restart_gateway(self) -> None:
        """Tear the gateway process down and bring a fresh one up on the same
        durable buffer; telemetry connections die and motes reconnect."""
        self.gateway.close()
        self.gateway = self._make_gateway()
        self.sim.emit("gateway_restart")

    def gateway_status(self) -> dict:
        return {
            "link": "up" if self.gateway.link_up else "down",
            "depth": self.gateway.buffer.depth,
        }

    def roster(self) -> list[MoteInfo]:
        return [
            MoteInfo(
                mote_id=m.node_id,
                virtual_ipv4=amap.format_ipv4(
                    amap.mote6_to_virtual4(m.ipv6, self.cfg.addrmap)
                ),
                appliances=sorted(m.relays),
            )
            for m in self.motes.values()
        ]

    def summary(self) -> dict:
        gw = self.gateway.counters.as_dict()
        return {
            "scenario": self.cfg.name,
            "seed": self.cfg.seed,
            "sim_time_us": self.sim.now_us,
            "events_run": self.sim.events_run,
            "frames_delivered": self.radio.delivered,
            "frames_dropped_loss": self.radio.dropped_loss,
            "frames_dropped_nolink": self.radio.dropped_nolink,
            "mean_channel_wait_us": round(self.channel.mean_wait_us(), 3),
            "sink_to_serial": self.sink.to_serial,
            "sink_to_mesh": self.sink.to_mesh,
            "sink_drops": self.sink.serial_drops + self.sink.not_for_mesh,
            "gateway": gw,
            "readings_sent": len(self.send_log),
            "readings_received": len(self.recv_log),
        }


def build_topology(cfg: ScenarioConfig, rng) -> Topology:
    topo = Topology()
    node_ids = list(range(cfg.motes + 1))  # 0 is the sink
    for node in node_ids:
        topo.add_node(node)

    def params(a: int, b: int) -> tuple[int, float]:
        latency, loss = cfg.link_latency_us, cfg.link_loss
        for o in cfg.link_overrides:
            if {o.a, o.b} == {a, b}:
                if o.latency_us is not None:
                    latency = o.latency_us
                if o.loss is not None:
                    loss = o.loss
        return latency, loss

    pairs: list[tuple[int, int]] = []
    if cfg.topology_preset == "line":
        pairs = [(i, i + 1) for i in range(cfg.motes)]
    elif cfg.topology_preset == "star":
        pairs = [(0, i) for i in range(1, cfg.motes + 1)]
    elif cfg.topology_preset == "clique":
        pairs = [
            (a, b) for a in node_ids for b in node_ids if a < b
        ]
    elif cfg.topology_preset == "mesh":
        order = node_ids[1:]
        rng.shuffle(order)
        connected = [0]
        for node in order:
            anchor = connected[rng.randrange(len(connected))]
            pairs.append((min(node, anchor), max(node, anchor)))
            connected.append(node)
        for a in node_ids:
            for b in node_ids:
                if a < b and (a, b) not in pairs and rng.random() < cfg.topology_density:
                    pairs.append((a, b))
    elif cfg.topology_preset == "explicit":
        pairs = [(min(a, b), max(a, b)) for a, b in cfg.topology_links]

    for a, b in pairs:
        latency, loss = params(a, b)
        topo.add_link(a, b, latency, loss)
    return topo
