import random
from collections import deque

from meshgate import aodv as aodvmod
from meshgate.mote import MeshNode
from meshgate.netmodel import FrameType, Ipv6Packet
from meshgate.sim import Channel, Radio, Simulator, Topology

PREFIX = bytes.fromhex("fd006c70") + bytes(10)


class PlainNode(MeshNode):
    """Mesh node that just collects datagrams addressed to it."""

    def __init__(self, node_id, sim, radio):
        super().__init__(node_id, sim, radio, PREFIX)
        self.received: list[Ipv6Packet] = []

    def on_packet(self, packet):
        self.received.append(packet)


class MeshWorld:
    def __init__(self, edges, n=None, seed=0, latency_us=2000, loss=0.0):
        self.sim = Simulator(seed=seed)
        self.topology = Topology()
        nodes = sorted({a for a, _ in edges} | {b for _, b in edges})
        if n is not None:
            nodes = list(range(n))
        for node in nodes:
            self.topology.add_node(node)
        for a, b in edges:
            self.topology.add_link(a, b, latency_us, loss)
        self.channel = Channel(self.sim, self.topology)
        self.radio = Radio(self.sim, self.topology, self.channel)
        self.nodes = {node: PlainNode(node, self.sim, self.radio) for node in nodes}

    def send(self, src, dst, payload=b"ping"):
        packet = Ipv6Packet(
            self.nodes[src].ipv6, self.nodes[dst].ipv6, 59, 64, payload
        )
        self.nodes[src].send_ipv6(packet)
        return packet

    def settle(self):
        self.sim.run()


def bfs_distances(edges, source):
    """Independent shortest-path oracle."""
    adjacency: dict[int, set[int]] = {}
    for a, b in edges:
        adjacency.setdefault(a, set()).add(b)
        adjacency.setdefault(b, set()).add(a)
    dist = {source: 0}
    queue = deque([source])
    while queue:
        node = queue.popleft()
        for neighbor in adjacency.get(node, ()):
            if neighbor not in dist:
                dist[neighbor] = dist[node] + 1
                queue.append(neighbor)
    return dist


def assert_loop_free(world):
    """Following next_hop pointers for any dest never revisits a node."""
    for dest in world.nodes:
        for start in world.nodes:
            seen = set()
            node = start
            while True:
                if node == dest:
                    break
                entry = world.nodes[node].aodv.routes.get(dest)
                if entry is None or not entry.valid:
                    break
                assert node not in seen, f"loop toward {dest} at {node}"
                seen.add(node)
                node = entry.next_hop


def random_connected_graph(rng, n):
    order = list(range(1, n))
    rng.shuffle(order)
    connected = [0]
    edges = set()
    for node in order:
        anchor = connected[rng.randrange(len(connected))]
        edges.add((min(node, anchor), max(node, anchor)))
        connected.append(node)
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < 0.3:
                edges.add((a, b))
    return sorted(edges)


class TestDiscovery:
    def test_direct_neighbor_resolves_without_flood(self):
        world = MeshWorld([(0, 1)])
        world.send(0, 1)
        world.settle()
        assert len(world.nodes[1].received) == 1
        next_hop = world.nodes[0].aodv.resolve(1, world.sim.now_us)
        assert next_hop == 1
        # with a live entry there is no new discovery
        tx_before = world.channel.tx_count
        world.send(0, 1)
        world.settle()
        control_frames = 0  # all new frames must be data
        assert world.channel.tx_count == tx_before + 1 + control_frames

    def test_seven_node_line_route_has_six_hops(self):
        edges = [(i, i + 1) for i in range(7)]
        world = MeshWorld(edges)
        world.send(1, 7)
        world.settle()
        assert len(world.nodes[7].received) == 1
        entry = world.nodes[1].aodv.routes[7]
        assert entry.hop_count == 6 == bfs_distances(edges, 1)[7]

    def test_partitioned_graph_destination_unreachable(self):
        world = MeshWorld([(0, 1), (2, 3)], n=4)
        unreachable = []
        world.nodes[0].aodv._on_unreachable = lambda dest, frames: unreachable.append(dest)
        world.send(0, 3)
        world.settle()
        assert unreachable == [3]
        assert world.nodes[3].received == []
        # three full discovery rounds were attempted
        assert world.nodes[0].aodv.unreachable_drops >= 1

    def test_duplicate_rreq_not_rebroadcast(self):
        # Triangle: node 2 hears the same RREQ from 0 and from 1 but must
        # flood it only once (the second copy is not an improvement).
        world = MeshWorld([(0, 1), (0, 2), (1, 2), (2, 3)])
        world.send(0, 3)
        world.settle()
        assert len(world.nodes[3].received) == 1
        assert_loop_free(world)

    def test_buffered_packets_flush_in_order_on_rrep(self):
        world = MeshWorld([(0, 1), (1, 2)])
        for i in range(3):
            world.send(0, 2, payload=bytes([i]))
        world.settle()
        payloads = [p.payload for p in world.nodes[2].received]
        assert payloads == [bytes([0]), bytes([1]), bytes([2])]

    def test_rreq_hop_limit_bounds_flood(self):
        edges = [(i, i + 1) for i in range(20)]
        world = MeshWorld(edges)
        world.send(0, 20)  # 20 hops away, beyond the 16-hop RREQ limit
        world.settle()
        assert world.nodes[20].received == []


class TestMaintenance:
    def test_link_break_triggers_rerr_and_rediscovery(self):
        # Diamond: 0-1-3 and 0-2-3.
        edges = [(0, 1), (1, 3), (0, 2), (2, 3)]
        world = MeshWorld(edges)
        world.send(0, 3, payload=b"first")
        world.settle()
        assert [p.payload for p in world.nodes[3].received] == [b"first"]
        via = world.nodes[0].aodv.routes[3].next_hop
        assert via in (1, 2)

        world.topology.remove_link(via, 3)
        world.send(0, 3, payload=b"lost")  # relay hits the dead link
        world.settle()
        assert world.nodes[0].aodv.has_live_route(3, world.sim.now_us) is False

        world.send(0, 3, payload=b"second")  # the retransmission
        world.settle()
        assert world.nodes[3].received[-1].payload == b"second"
        other = 2 if via == 1 else 1
        assert world.nodes[0].aodv.routes[3].next_hop == other
        assert_loop_free(world)

    def test_own_sequence_number_never_decreases(self):
        world = MeshWorld([(0, 1), (1, 2), (0, 2)])
        history = []
        for dest in (1, 2, 1, 2):
            world.send(0, dest)
            world.settle()
            history.append(world.nodes[0].aodv.own_seq)
        assert history == sorted(history)

    def test_route_expiry_forces_rediscovery(self):
        world = MeshWorld([(0, 1)])
        world.send(0, 1)
        world.settle()
        assert world.nodes[0].aodv.has_live_route(1, world.sim.now_us)
        later = world.sim.now_us + aodvmod.ACTIVE_ROUTE_LIFETIME_US + 1
        assert world.nodes[0].aodv.resolve(1, later) is None


class TestOracleEquivalence:
    def test_hop_counts_match_bfs_on_random_graphs(self):
        rng = random.Random(7)
        for trial in range(20):
            n = rng.randrange(3, 11)
            edges = random_connected_graph(rng, n)
            world = MeshWorld(edges, n=n, seed=trial)
            dist = {s: bfs_distances(edges, s) for s in range(n)}
            pairs = [(rng.randrange(n), rng.randrange(n)) for _ in range(4)]
            for s, d in pairs:
                if s == d:
                    continue
                world.send(s, d)
                world.settle()
                entry = world.nodes[s].aodv.routes.get(d)
                assert entry is not None and entry.valid, (trial, s, d)
                assert entry.hop_count == dist[s][d], (trial, s, d, edges)
            assert_loop_free(world)


class TestControlCodec:
    def test_layouts_are_pinned(self):
        # Normative byte layouts (see docs/formats.md); changing them breaks
        # trace replay compatibility.
        rreq = aodvmod.Rreq(
            hop_count=2, hop_limit=14, rreq_id=0x01020304,
            originator=0x0005, originator_seq=0x0A0B0C0D,
            dest=0x0007, dest_seq=0x11223344,
        )
        assert aodvmod.encode_control(rreq) == bytes.fromhex(
            "01" "02" "0e" "01020304" "0005" "0a0b0c0d" "0007" "11223344"
        )
        rrep = aodvmod.Rrep(
            hop_count=3, originator=0x0005, dest=0x0007,
            dest_seq=0x11223345, lifetime_ms=30000,
        )
        assert aodvmod.encode_control(rrep) == bytes.fromhex(
            "02" "03" "0005" "0007" "11223345" "00007530"
        )
        rerr = aodvmod.Rerr(((0x0007, 0x11223346),))
        assert aodvmod.encode_control(rerr) == bytes.fromhex(
            "03" "01" "0007" "11223346"
        )

    def test_control_roundtrip(self):
        msgs = [
            aodvmod.Rreq(2, 14, 9, 1, 5, 7, 3),
            aodvmod.Rrep(4, 1, 7, 12, 30000),
            aodvmod.Rerr(((7, 13), (9, 2))),
        ]
        for msg in msgs:
            assert aodvmod.decode_control(aodvmod.encode_control(msg)) == msg

    def test_malformed_control_counted_not_fatal(self):
        world = MeshWorld([(0, 1)])
        node = world.nodes[0]
        node.aodv.on_control(b"\xff\x00\x01", 1, 0)
        assert node.aodv.malformed == 1

    def test_control_frames_use_control_type(self):
        world = MeshWorld([(0, 1), (1, 2)])
        seen_types = []
        original = world.radio.send

        def spy(src, dst, frame):
            seen_types.append(frame.frame_type)
            original(src, dst, frame)

        world.radio.send = spy
        world.send(0, 2)
        world.settle()
        assert FrameType.AODV_CONTROL in seen_types
