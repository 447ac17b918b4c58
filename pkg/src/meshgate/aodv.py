"""On-demand distance-vector routing over the link layer.

Control message layouts (first byte selects the kind):

    RREQ: u8 kind=1, u8 hop_count, u8 hop_limit, u32 rreq_id, u16 originator,
          u32 originator_seq, u16 dest, u32 dest_seq_known          (19 bytes)
    RREP: u8 kind=2, u8 hop_count, u16 originator, u16 dest, u32 dest_seq,
          u32 lifetime_ms                                           (14 bytes)
    RERR: u8 kind=3, u8 count, count * (u16 dest, u32 dest_seq)

Routes only ever improve: a fresher destination sequence number wins, and at
equal freshness a smaller hop count wins. A duplicate RREQ that arrives with
a better hop count than previously seen is re-flooded (and re-answered by the
destination), so on a quiescent lossless mesh the settled routes carry true
shortest-path hop counts.

Link breaks are reported by the radio when a transmit hits a vanished link;
affected routes are invalidated and RERRs propagate to precursors. There is
no local repair: sources rediscover on their next send.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .netmodel import LINK_BROADCAST, LinkFrame

ACTIVE_ROUTE_LIFETIME_US = 30_000_000
RREQ_RECORD_LIFETIME_US = 3_000_000
RREQ_RETRIES = 3
RREQ_HOP_LIMIT = 16
RREQ_ROUND_TIMEOUT_US = 1_000_000

CTRL_RREQ = 1
CTRL_RREP = 2
CTRL_RERR = 3


class AodvError(Exception):
    pass


class DestinationUnreachable(AodvError):
    pass


@dataclass(frozen=True)
class Rreq:
    hop_count: int
    hop_limit: int
    rreq_id: int
    originator: int
    originator_seq: int
    dest: int
    dest_seq: int


@dataclass(frozen=True)
class Rrep:
    hop_count: int
    originator: int
    dest: int
    dest_seq: int
    lifetime_ms: int


@dataclass(frozen=True)
class Rerr:
    unreachable: tuple[tuple[int, int], ...]  # (dest, dest_seq)


Control = Union[Rreq, Rrep, Rerr]


def encode_control(msg: Control) -> bytes:
    if isinstance(msg, Rreq):
        return struct.pack(
            "!BBBIHIHI",
            CTRL_RREQ,
            msg.hop_count,
            msg.hop_limit,
            msg.rreq_id,
            msg.originator,
            msg.originator_seq,
            msg.dest,
            msg.dest_seq,
        )
    if isinstance(msg, Rrep):
        return struct.pack(
            "!BBHHII",
            CTRL_RREP,
            msg.hop_count,
            msg.originator,
            msg.dest,
            msg.dest_seq,
            msg.lifetime_ms,
        )
    body = struct.pack("!BB", CTRL_RERR, len(msg.unreachable))
    for dest, seq in msg.unreachable:
        body += struct.pack("!HI", dest, seq)
    return body


def decode_control(b: bytes) -> Control:
    if not b:
        raise AodvError("empty control payload")
    kind = b[0]
    if kind == CTRL_RREQ:
        hop_count, hop_limit, rreq_id, orig, orig_seq, dest, dest_seq = struct.unpack(
            "!BBIHIHI", b[1:19]
        )
        return Rreq(hop_count, hop_limit, rreq_id, orig, orig_seq, dest, dest_seq)
    if kind == CTRL_RREP:
        hop_count, orig, dest, dest_seq, lifetime = struct.unpack("!BHHII", b[1:14])
        return Rrep(hop_count, orig, dest, dest_seq, lifetime)
    if kind == CTRL_RERR:
        count = b[1]
        pairs = [struct.unpack("!HI", b[2 + 6 * i : 8 + 6 * i]) for i in range(count)]
        return Rerr(tuple((d, s) for d, s in pairs))
    raise AodvError(f"unknown control kind {kind}")


@dataclass
class RouteEntry:
    dest: int
    next_hop: int
    hop_count: int
    dest_seq: int
    expires_us: int
    valid: bool = True
    precursors: set[int] = field(default_factory=set)


@dataclass
class _Pending:
    frames: list[LinkFrame] = field(default_factory=list)
    round: int = 0


class AodvNode:
    """Per-node routing state machine, driven by the simulator loop.

    The host supplies the radio glue:
      send_control(payload, radio_dst)      emit one control frame
      send_data(next_hop, frames)           flush data frames along a route
      on_unreachable(dest, frames)          discovery gave up
    """

    def __init__(
        self,
        node_id: int,
        sim,
        send_control: Callable[[bytes, int], None],
        send_data: Callable[[int, list[LinkFrame]], None],
        on_unreachable: Optional[Callable[[int, list[LinkFrame]], None]] = None,
    ):
        self.node_id = node_id
        self.sim = sim
        self._send_control = send_control
        self._send_data = send_data
        self._on_unreachable = on_unreachable
        self.routes: dict[int, RouteEntry] = {}
        self.own_seq = 0
        self._rreq_id = 0
        self._rreq_seen: dict[tuple[int, int], tuple[int, int]] = {}  # key -> (best_hops, expires)
        self._pending: dict[int, _Pending] = {}
        self.malformed = 0
        self.unreachable_drops = 0

    # -- data path -----------------------------------------------------------

    def resolve(self, dest: int, now_us: int) -> Optional[int]:
        entry = self.routes.get(dest)
        if entry and entry.valid and entry.expires_us > now_us:
            entry.expires_us = now_us + ACTIVE_ROUTE_LIFETIME_US
            return entry.next_hop
        return None

    def send_via(self, dest: int, frames: list[LinkFrame], now_us: int) -> None:
        next_hop = self.resolve(dest, now_us)
        if next_hop is not None:
            self._send_data(next_hop, frames)
            return
        pending = self._pending.get(dest)
        if pending is not None:
            pending.frames.extend(frames)
            return
        self._pending[dest] = _Pending(list(frames))
        self._start_round(dest, now_us)

    def has_live_route(self, dest: int, now_us: int) -> bool:
        entry = self.routes.get(dest)
        return bool(entry and entry.valid and entry.expires_us > now_us)

    def _start_round(self, dest: int, now_us: int) -> None:
        pending = self._pending[dest]
        pending.round += 1
        if pending.round > RREQ_RETRIES:
            frames = pending.frames
            del self._pending[dest]
            self.unreachable_drops += len(frames)
            self.sim.emit("aodv_unreachable", node=self.node_id, dest=dest)
            if self._on_unreachable:
                self._on_unreachable(dest, frames)
            return
        self.own_seq += 1
        self._rreq_id += 1
        entry = self.routes.get(dest)
        rreq = Rreq(
            hop_count=0,
            hop_limit=RREQ_HOP_LIMIT,
            rreq_id=self._rreq_id,
            originator=self.node_id,
            originator_seq=self.own_seq,
            dest=dest,
            dest_seq=entry.dest_seq if entry else 0,
        )
        self._send_control(encode_control(rreq), LINK_BROADCAST)
        expected_round = pending.round
        self.sim.schedule_in(
            RREQ_ROUND_TIMEOUT_US, lambda: self._retry(dest, expected_round)
        )

    def _retry(self, dest: int, expected_round: int) -> None:
        pending = self._pending.get(dest)
        if pending is None or pending.round != expected_round:
            return
        self._start_round(dest, self.sim.now_us)

    # -- control path --------------------------------------------------------

    def on_control(self, payload: bytes, from_node: int, now_us: int) -> None:
        try:
            msg = decode_control(payload)
        except (AodvError, struct.error):
            self.malformed += 1
            return
        if isinstance(msg, Rreq):
            self._on_rreq(msg, from_node, now_us)
        elif isinstance(msg, Rrep):
            self._on_rrep(msg, from_node, now_us)
        else:
            self._on_rerr(msg, from_node, now_us)

    def _on_rreq(self, rreq: Rreq, from_node: int, now_us: int) -> None:
        if rreq.originator == self.node_id:
            return
        hops_here = rreq.hop_count + 1
        self._update_route(rreq.originator, from_node, hops_here, rreq.originator_seq, now_us)

        key = (rreq.originator, rreq.rreq_id)
        seen = self._rreq_seen.get(key)
        if seen is not None and seen[1] > now_us and hops_here >= seen[0]:
            return  # duplicate, not an improvement
        self._rreq_seen[key] = (hops_here, now_us + RREQ_RECORD_LIFETIME_US)

        if rreq.dest == self.node_id:
            # Reply strictly fresher than any invalidated entry the requester
            # may hold, so the repaired route is accepted at every hop.
            self.own_seq = max(self.own_seq, rreq.dest_seq + 1)
            rrep = Rrep(
                hop_count=0,
                originator=rreq.originator,
                dest=self.node_id,
                dest_seq=self.own_seq,
                lifetime_ms=ACTIVE_ROUTE_LIFETIME_US // 1000,
            )
            self._send_control(encode_control(rrep), from_node)
            return
        if rreq.hop_limit > 1:
            fwd = Rreq(
                hop_count=hops_here,
                hop_limit=rreq.hop_limit - 1,
                rreq_id=rreq.rreq_id,
                originator=rreq.originator,
                originator_seq=rreq.originator_seq,
                dest=rreq.dest,
                dest_seq=rreq.dest_seq,
            )
            self._send_control(encode_control(fwd), LINK_BROADCAST)

    def _on_rrep(self, rrep: Rrep, from_node: int, now_us: int) -> None:
        hops_here = rrep.hop_count + 1
        self._update_route(rrep.dest, from_node, hops_here, rrep.dest_seq, now_us)

        if rrep.originator == self.node_id:
            pending = self._pending.pop(rrep.dest, None)
            if pending and pending.frames:
                next_hop = self.resolve(rrep.dest, now_us)
                if next_hop is not None:
                    self._send_data(next_hop, pending.frames)
            return

        reverse = self.routes.get(rrep.originator)
        if reverse is None or not reverse.valid or reverse.expires_us <= now_us:
            self.malformed += 1
            return
        forward = self.routes.get(rrep.dest)
        if forward is not None:
            forward.precursors.add(reverse.next_hop)
        reverse.precursors.add(from_node)
        fwd = Rrep(
            hop_count=hops_here,
            originator=rrep.originator,
            dest=rrep.dest,
            dest_seq=rrep.dest_seq,
            lifetime_ms=rrep.lifetime_ms,
        )
        self._send_control(encode_control(fwd), reverse.next_hop)

    def _on_rerr(self, rerr: Rerr, from_node: int, now_us: int) -> None:
        affected: list[tuple[int, int]] = []
        precursors: set[int] = set()
        for dest, seq in rerr.unreachable:
            entry = self.routes.get(dest)
            if entry and entry.valid and entry.next_hop == from_node:
                entry.valid = False
                entry.dest_seq = max(entry.dest_seq, seq)
                affected.append((dest, entry.dest_seq))
                precursors |= entry.precursors
                self.sim.emit("route_invalidated", node=self.node_id, dest=dest)
        if affected:
            self._propagate_rerr(affected, precursors)

    def on_link_break(self, neighbor: int, now_us: int) -> None:
        """The radio failed to reach a neighbor: every route through it dies."""
        affected: list[tuple[int, int]] = []
        precursors: set[int] = set()
        for entry in self.routes.values():
            if entry.valid and entry.next_hop == neighbor:
                entry.valid = False
                entry.dest_seq += 1
                affected.append((entry.dest, entry.dest_seq))
                precursors |= entry.precursors
                self.sim.emit("route_invalidated", node=self.node_id, dest=entry.dest)
        if affected:
            self._propagate_rerr(affected, precursors)

    def report_no_route(self, dest: int, back_to: int) -> None:
        """Forwarding failed for lack of a route; warn the upstream node."""
        entry = self.routes.get(dest)
        seq = entry.dest_seq + 1 if entry else 0
        if entry:
            entry.valid = False
            entry.dest_seq = seq
        self._send_control(encode_control(Rerr(((dest, seq),))), back_to)

    def _propagate_rerr(self, affected: list[tuple[int, int]], precursors: set[int]) -> None:
        payload = encode_control(Rerr(tuple(affected)))
        for node in sorted(precursors):
            if node != self.node_id:
                self._send_control(payload, node)

    def _update_route(
        self, dest: int, next_hop: int, hop_count: int, dest_seq: int, now_us: int
    ) -> None:
        if dest == self.node_id:
            return
        entry = self.routes.get(dest)
        if entry is None:
            self.routes[dest] = RouteEntry(
                dest, next_hop, hop_count, dest_seq, now_us + ACTIVE_ROUTE_LIFETIME_US
            )
            self.sim.emit("route", node=self.node_id, dest=dest, nh=next_hop, hops=hop_count)
            self._flush_pending(dest, now_us)
            return
        stale = not entry.valid or entry.expires_us <= now_us
        better = dest_seq > entry.dest_seq or (
            dest_seq == entry.dest_seq and hop_count < entry.hop_count
        )
        if stale or better:
            entry.next_hop = next_hop
            entry.hop_count = hop_count
            entry.dest_seq = max(entry.dest_seq, dest_seq)
            entry.expires_us = now_us + ACTIVE_ROUTE_LIFETIME_US
            entry.valid = True
            self.sim.emit("route", node=self.node_id, dest=dest, nh=next_hop, hops=hop_count)
            self._flush_pending(dest, now_us)
        else:
            entry.expires_us = max(entry.expires_us, now_us + ACTIVE_ROUTE_LIFETIME_US)

    def _flush_pending(self, dest: int, now_us: int) -> None:
        pending = self._pending.get(dest)
        if pending is None:
            return
        next_hop = self.resolve(dest, now_us)
        if next_hop is not None:
            del self._pending[dest]
            if pending.frames:
                self._send_data(next_hop, pending.frames)

    def snapshot(self) -> dict[int, RouteEntry]:
        return dict(self.routes)
