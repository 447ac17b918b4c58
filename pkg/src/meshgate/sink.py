"""The sink node: an ordinary mesh participant (link address 0) that bridges
reassembled IPv6 packets onto the serial tunnel toward the gateway, and
injects tunnel packets back into the mesh.

The serial stream is a reliable in-order byte pipe; each IPv6 packet rides in
one CRC-protected serial frame. The tunnel never alters network-layer bytes.
"""

from __future__ import annotations

from typing import Callable

from .mote import MeshNode
from .netmodel import (
    CodecError,
    Ipv6Packet,
    SerialDecoder,
    decode_ipv6,
    encode_ipv6,
    encode_serial_frame,
)
from .sim import Radio, Simulator
from .sixlowpan import MESH_PREFIX_LEN

SINK_NODE_ID = 0


class Sink(MeshNode):
    def __init__(
        self,
        sim: Simulator,
        radio: Radio,
        mesh_prefix: bytes,
        serial_tx: Callable[[bytes], None],
    ):
        super().__init__(SINK_NODE_ID, sim, radio, mesh_prefix)
        self.serial_tx = serial_tx
        self.serial_up = True
        self._decoder = SerialDecoder()
        self.serial_drops = 0
        self.not_for_mesh = 0
        self.hop_exhausted = 0
        self.to_serial = 0
        self.to_mesh = 0

    def on_packet(self, packet: Ipv6Packet) -> None:
        """A datagram surfaced from the mesh; off-mesh destinations go serial."""
        if packet.dst[:MESH_PREFIX_LEN] == self.mesh_prefix:
            # Addressed into the mesh but surfaced here: routing handed it to
            # the sink as final hop by mistake; count and drop.
            self.adaptation_errors += 1
            return
        if not self.serial_up:
            self.serial_drops += 1
            self.sim.emit("serial_drop", reason="down")
            return
        self.to_serial += 1
        self.sim.emit("serial_tx", len=len(packet.payload) + 40)
        self.serial_tx(encode_serial_frame(encode_ipv6(packet)))

    def on_serial_bytes(self, data: bytes) -> None:
        """Bytes arriving from the gateway over the tunnel."""
        before = self._decoder.errors
        for payload in self._decoder.feed(data):
            self._inject(payload)
        self.serial_drops += self._decoder.errors - before

    @property
    def crc_errors(self) -> int:
        return self._decoder.errors

    def _inject(self, raw: bytes) -> None:
        try:
            packet = decode_ipv6(raw)
        except CodecError:
            self.serial_drops += 1
            return
        if packet.dst[:MESH_PREFIX_LEN] != self.mesh_prefix:
            self.not_for_mesh += 1
            self.sim.emit("serial_drop", reason="not_for_mesh")
            return
        if packet.hop_limit == 0:
            self.hop_exhausted += 1
            return
        self.to_mesh += 1
        self.sim.emit("serial_rx", len=len(raw))
        self.send_ipv6(packet)
