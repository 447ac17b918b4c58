import random

import pytest

from meshgate import addrmap as am


@pytest.fixture
def cfg():
    return am.AddressMapConfig.from_strings()


class TestConfig:
    def test_defaults_parse(self, cfg):
        assert cfg.mesh_prefix6 == bytes.fromhex("fd006c70") + bytes(10)
        assert cfg.pool_prefix4 == bytes([10, 77])
        assert cfg.gw_prefix6 == bytes.fromhex("fd004664") + bytes(8)

    def test_prefix_length_suffix_must_be_clear(self):
        with pytest.raises(ValueError):
            am.AddressMapConfig.from_strings(mesh_prefix6="fd00:6c70::1")
        with pytest.raises(ValueError):
            am.AddressMapConfig.from_strings(pool_prefix4="10.77.0.1")

    def test_explicit_prefix_lengths_accepted(self):
        cfg = am.AddressMapConfig.from_strings(
            "fd00:6c70::/112", "10.77.0.0/16", "fd00:4664::/96"
        )
        assert cfg.pool_prefix4 == bytes([10, 77])

    def test_wrong_prefix_length_rejected(self):
        with pytest.raises(ValueError):
            am.AddressMapConfig.from_strings(mesh_prefix6="fd00:6c70::/64")

    def test_overlapping_prefixes_rejected(self):
        with pytest.raises(ValueError):
            am.AddressMapConfig.from_strings(
                mesh_prefix6="fd00:4664::", gw_prefix6="fd00:4664::"
            )

    def test_gateway_ipv4_outside_pool(self, cfg):
        cfg.require_gateway_ipv4(am.parse_ipv4("192.0.2.10"))
        with pytest.raises(ValueError):
            cfg.require_gateway_ipv4(am.parse_ipv4("10.77.0.1"))


class TestMoteMapping:
    def test_concatenation_examples(self, cfg):
        a = cfg.mesh_prefix6 + b"\x00\x03"
        assert am.mote6_to_virtual4(a, cfg) == am.parse_ipv4("10.77.0.3")
        zero = cfg.mesh_prefix6 + b"\x00\x00"
        assert am.mote6_to_virtual4(zero, cfg) == am.parse_ipv4("10.77.0.0")
        assert am.virtual4_to_mote6(am.parse_ipv4("10.77.1.2"), cfg) == (
            cfg.mesh_prefix6 + b"\x01\x02"
        )

    def test_gateway_prefixed_input_rejected(self, cfg):
        foreign = cfg.gw_prefix6 + bytes(4)
        with pytest.raises(am.NotMeshAddress):
            am.mote6_to_virtual4(foreign, cfg)

    def test_outside_pool_rejected(self, cfg):
        with pytest.raises(am.NotPoolAddress):
            am.virtual4_to_mote6(am.parse_ipv4("192.0.2.9"), cfg)

    def test_exhaustive_roundtrip_all_pool_values(self, cfg):
        for suffix in range(65536):
            v4 = cfg.pool_prefix4 + suffix.to_bytes(2, "big")
            assert am.mote6_to_virtual4(am.virtual4_to_mote6(v4, cfg), cfg) == v4


class TestHostMapping:
    def test_hex_embedding_of_dotted_quad(self, cfg):
        v6 = am.host4_to_virtual6(am.parse_ipv4("192.0.2.1"), cfg)
        assert v6 == cfg.gw_prefix6 + bytes.fromhex("c0000201")
        assert am.virtual6_to_host4(v6, cfg) == am.parse_ipv4("192.0.2.1")

    def test_mesh_prefixed_input_rejected(self, cfg):
        with pytest.raises(am.NotGatewayPrefix):
            am.virtual6_to_host4(cfg.mesh_prefix6 + bytes(2), cfg)

    def test_roundtrip_many_random_hosts(self, cfg):
        rng = random.Random(99)
        for _ in range(100_000):
            h = rng.getrandbits(32).to_bytes(4, "big")
            assert am.virtual6_to_host4(am.host4_to_virtual6(h, cfg), cfg) == h


class TestDisjointness:
    def test_no_address_accepted_by_both_inverses(self, cfg):
        rng = random.Random(5)
        candidates = [cfg.mesh_prefix6 + bytes(2), cfg.gw_prefix6 + bytes(4)]
        candidates += [bytes(rng.randrange(256) for _ in range(16)) for _ in range(2000)]
        for addr in candidates:
            mesh_ok = gw_ok = True
            try:
                am.mote6_to_virtual4(addr, cfg)
            except am.NotMeshAddress:
                mesh_ok = False
            try:
                am.virtual6_to_host4(addr, cfg)
            except am.NotGatewayPrefix:
                gw_ok = False
            assert not (mesh_ok and gw_ok)

    def test_statelessness_pure_function(self, cfg):
        # Same output with no prior traffic, on fresh configs.
        a = cfg.mesh_prefix6 + b"\x12\x34"
        first = am.mote6_to_virtual4(a, cfg)
        again = am.mote6_to_virtual4(a, am.AddressMapConfig.from_strings())
        assert first == again
