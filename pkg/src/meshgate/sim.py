"""Deterministic discrete-event simulator: clock, event queue, radio channel.

Simulated time is integer microseconds. All randomness flows through the one
seeded generator owned by the simulator, and ties in the event queue break by
insertion order, so a (scenario, seed) pair always produces the same trace,
byte for byte.

The radio medium is a per-neighborhood FIFO: a transmission occupies the air
around the transmitter for len(frame) * 32 us (250 kbit/s), and any mutually
adjacent transmitter defers past it. No collisions are modeled; contention
shows up purely as queueing wait, which is what makes jitter grow with load.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .netmodel import LINK_BROADCAST, FrameType, LinkFrame, encode_link_frame

US_PER_BYTE = 32  # 8 bits / 250 kbit/s


class SimError(Exception):
    pass


class NoSuchLink(SimError):
    pass


class Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class TraceWriter:
    """Line-delimited JSON event log with stable field order."""

    def __init__(self, fh=None):
        self._fh = fh
        self.records: list[str] = [] if fh is None else None

    def write(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"))
        if self._fh is not None:
            self._fh.write(line + "\n")
        else:
            self.records.append(line)


class Simulator:
    def __init__(self, seed: int = 0, trace: Optional[TraceWriter] = None):
        self.now_us = 0
        self.rng = random.Random(seed)
        self.trace = trace
        self._heap: list[tuple[int, int, Handle, Callable[[], None]]] = []
        self._counter = 0
        self.events_run = 0

    def schedule(self, at_us: int, fn: Callable[[], None]) -> Handle:
        if at_us < self.now_us:
            raise SimError(f"cannot schedule at {at_us} before now {self.now_us}")
        handle = Handle()
        heapq.heappush(self._heap, (at_us, self._counter, handle, fn))
        self._counter += 1
        return handle

    def schedule_in(self, delay_us: int, fn: Callable[[], None]) -> Handle:
        return self.schedule(self.now_us + delay_us, fn)

    def step(self) -> bool:
        """Run the next pending event; False when the queue is empty."""
        while self._heap:
            at_us, _, handle, fn = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now_us = at_us
            self.events_run += 1
            fn()
            return True
        return False

    def run_until(self, t_us: int) -> None:
        """Fire every event with time <= t_us, then advance the clock to t_us."""
        while self._heap:
            at_us, _, handle, fn = self._heap[0]
            if at_us > t_us:
                break
            heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now_us = at_us
            self.events_run += 1
            fn()
        if t_us > self.now_us:
            self.now_us = t_us

    def run(self) -> None:
        while self.step():
            pass

    def peek_time(self) -> Optional[int]:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def emit(self, kind: str, **fields) -> None:
        if self.trace is not None:
            self.trace.write({"t": self.now_us, "ev": kind, **fields})


class Rearmer:
    """Keeps one pending wakeup armed at a movable deadline.

    poke() after every interaction with the owning component; stale wakeups
    are harmless because fire() re-reads the deadline source.
    """

    def __init__(self, sim: Simulator, deadline_fn: Callable[[], Optional[int]],
                 fire_fn: Callable[[], None]):
        self._sim = sim
        self._deadline_fn = deadline_fn
        self._fire_fn = fire_fn
        self._armed_at: Optional[int] = None

    def poke(self) -> None:
        deadline = self._deadline_fn()
        if deadline is None:
            return
        deadline = max(deadline, self._sim.now_us)
        if self._armed_at is None or deadline < self._armed_at:
            self._armed_at = deadline
            self._sim.schedule(deadline, self._fire)

    def _fire(self) -> None:
        self._armed_at = None
        self._fire_fn()
        self.poke()


class Topology:
    """Symmetric link graph with per-link latency and loss."""

    def __init__(self):
        self.nodes: set[int] = set()
        self._links: dict[tuple[int, int], tuple[int, float]] = {}
        self._neighbors: dict[int, list[int]] = {}

    @staticmethod
    def _key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def add_node(self, n: int) -> None:
        self.nodes.add(n)
        self._neighbors.setdefault(n, [])

    def add_link(self, a: int, b: int, latency_us: int, loss: float) -> None:
        if a == b:
            raise SimError("no self links")
        if latency_us <= 0:
            raise SimError("base latency must be positive")
        if not 0.0 <= loss <= 1.0:
            raise SimError("loss probability must be within [0, 1]")
        self.add_node(a)
        self.add_node(b)
        key = self._key(a, b)
        if key not in self._links:
            self._neighbors[a] = sorted(self._neighbors[a] + [b])
            self._neighbors[b] = sorted(self._neighbors[b] + [a])
        self._links[key] = (latency_us, loss)

    def remove_link(self, a: int, b: int) -> None:
        key = self._key(a, b)
        if key in self._links:
            del self._links[key]
            self._neighbors[a].remove(b)
            self._neighbors[b].remove(a)

    def has_link(self, a: int, b: int) -> bool:
        return self._key(a, b) in self._links

    def link_params(self, a: int, b: int) -> tuple[int, float]:
        try:
            return self._links[self._key(a, b)]
        except KeyError:
            raise NoSuchLink(f"no link between {a} and {b}") from None

    def neighbors(self, n: int) -> list[int]:
        return self._neighbors.get(n, [])


class Channel:
    """Shared-medium contention: per-neighborhood busy-until bookkeeping."""

    def __init__(self, sim: Simulator, topology: Topology):
        self.sim = sim
        self.topology = topology
        self.busy_until: dict[int, int] = {}
        self.tx_count = 0
        self.wait_total_us = 0

    @staticmethod
    def airtime_us(nbytes: int) -> int:
        return nbytes * US_PER_BYTE

    def reserve(self, src: int, nbytes: int, now_us: int) -> int:
        """Claim the air around src; returns the transmission start instant."""
        start = max(now_us, self.busy_until.get(src, 0))
        end = start + self.airtime_us(nbytes)
        for node in [src] + self.topology.neighbors(src):
            if self.busy_until.get(node, 0) < end:
                self.busy_until[node] = end
        self.tx_count += 1
        self.wait_total_us += start - now_us
        return start

    def mean_wait_us(self) -> float:
        return self.wait_total_us / self.tx_count if self.tx_count else 0.0


CONTROL_PRIORITY = 0
DATA_PRIORITY = 1


@dataclass
class _Egress:
    queues: tuple[list, list] = field(default_factory=lambda: ([], []))
    busy: bool = False


class Radio:
    """Per-node transmit queues over the contention channel.

    Frames queue per node (routing control ahead of data) and transmit one at
    a time; delivery happens at start + airtime + link latency, or the frame
    is dropped by the link's loss draw. Unicast to a nonexistent link invokes
    the sender's on_link_fail hook, which is how link breaks are detected.
    """

    def __init__(self, sim: Simulator, topology: Topology, channel: Channel):
        self.sim = sim
        self.topology = topology
        self.channel = channel
        self._receivers: dict[int, Callable[[LinkFrame, int], None]] = {}
        self._fail_hooks: dict[int, Callable[[int, LinkFrame], None]] = {}
        self._egress: dict[int, _Egress] = {}
        self.delivered = 0
        self.dropped_loss = 0
        self.dropped_nolink = 0

    def attach(self, node_id: int, on_frame: Callable[[LinkFrame, int], None],
               on_link_fail: Optional[Callable[[int, LinkFrame], None]] = None) -> None:
        self.topology.add_node(node_id)
        self._receivers[node_id] = on_frame
        if on_link_fail:
            self._fail_hooks[node_id] = on_link_fail
        self._egress[node_id] = _Egress()

    def send(self, src: int, radio_dst: int, frame: LinkFrame) -> None:
        """Queue a frame for transmission; radio_dst may be LINK_BROADCAST."""
        priority = CONTROL_PRIORITY if frame.frame_type == FrameType.AODV_CONTROL else DATA_PRIORITY
        egress = self._egress[src]
        egress.queues[priority].append((radio_dst, frame))
        if not egress.busy:
            self._start_next(src)

    def _start_next(self, src: int) -> None:
        egress = self._egress[src]
        while True:
            if egress.queues[CONTROL_PRIORITY]:
                radio_dst, frame = egress.queues[CONTROL_PRIORITY].pop(0)
            elif egress.queues[DATA_PRIORITY]:
                radio_dst, frame = egress.queues[DATA_PRIORITY].pop(0)
            else:
                return
            encoded = encode_link_frame(frame)
            if radio_dst != LINK_BROADCAST and not self.topology.has_link(src, radio_dst):
                self.dropped_nolink += 1
                self.sim.emit("drop", src=src, dst=radio_dst, reason="nolink",
                              ftype=int(frame.frame_type))
                hook = self._fail_hooks.get(src)
                if hook:
                    self.sim.schedule(self.sim.now_us, lambda d=radio_dst, f=frame: hook(d, f))
                continue
            break

        now = self.sim.now_us
        start = self.channel.reserve(src, len(encoded), now)
        airtime = self.channel.airtime_us(len(encoded))
        self.sim.emit("tx", src=src, dst=radio_dst, fdst=frame.dst_short,
                      ftype=int(frame.frame_type), len=len(encoded), start=start)
        targets = (
            self.topology.neighbors(src) if radio_dst == LINK_BROADCAST else [radio_dst]
        )
        for target in targets:
            latency, loss = self.topology.link_params(src, target)
            if loss > 0.0 and self.sim.rng.random() < loss:
                self.dropped_loss += 1
                self.sim.emit("drop", src=src, dst=target, reason="loss",
                              ftype=int(frame.frame_type))
                continue
            arrive = start + airtime + latency
            self.sim.schedule(arrive, lambda t=target, f=frame, s=src: self._deliver(t, f, s))
        egress.busy = True
        self.sim.schedule(start + airtime, lambda s=src: self._tx_done(s))

    def _tx_done(self, src: int) -> None:
        egress = self._egress[src]
        egress.busy = False
        self._start_next(src)

    def _deliver(self, target: int, frame: LinkFrame, radio_src: int) -> None:
        self.delivered += 1
        self.sim.emit("rx", node=target, src=radio_src, fdst=frame.dst_short,
                      ftype=int(frame.frame_type), len=len(encode_link_frame(frame)))
        receiver = self._receivers.get(target)
        if receiver:
            receiver(frame, radio_src)
