"""Stateless bijective mapping between the mesh's IPv6 world and the IPv4 world.

Three prefixes define the whole scheme:

- mesh_prefix6 (112 bits): real mote addresses, suffix = 16-bit mote id
- pool_prefix4 (16 bits):  virtual IPv4 pool for motes, suffix = mote id
- gw_prefix6 (96 bits):    virtual IPv6 for external IPv4 hosts, suffix = the
                           full 32-bit IPv4 address

Both pairs are suffix transplants, so every mapping is computable in either
direction from the address alone: no per-flow state, no tracking.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass

MESH_PREFIX_BYTES = 14
POOL_PREFIX_BYTES = 2
GW_PREFIX_BYTES = 12

DEFAULT_MESH_PREFIX6 = "fd00:6c70::"
DEFAULT_POOL_PREFIX4 = "10.77.0.0"
DEFAULT_GW_PREFIX6 = "fd00:4664::"


class AddrMapError(Exception):
    pass


class NotMeshAddress(AddrMapError):
    pass


class NotPoolAddress(AddrMapError):
    pass


class NotGatewayPrefix(AddrMapError):
    pass


@dataclass(frozen=True)
class AddressMapConfig:
    mesh_prefix6: bytes
    pool_prefix4: bytes
    gw_prefix6: bytes

    def __post_init__(self):
        if len(self.mesh_prefix6) != MESH_PREFIX_BYTES:
            raise ValueError("mesh_prefix6 must be 112 bits")
        if len(self.pool_prefix4) != POOL_PREFIX_BYTES:
            raise ValueError("pool_prefix4 must be 16 bits")
        if len(self.gw_prefix6) != GW_PREFIX_BYTES:
            raise ValueError("gw_prefix6 must be 96 bits")
        if self.mesh_prefix6[:GW_PREFIX_BYTES] == self.gw_prefix6:
            raise ValueError("mesh_prefix6 and gw_prefix6 overlap; no address may match both")

    @classmethod
    def from_strings(
        cls,
        mesh_prefix6: str = DEFAULT_MESH_PREFIX6,
        pool_prefix4: str = DEFAULT_POOL_PREFIX4,
        gw_prefix6: str = DEFAULT_GW_PREFIX6,
    ) -> "AddressMapConfig":
        return cls(
            _parse_prefix6(mesh_prefix6, 112),
            _parse_prefix4(pool_prefix4, 16),
            _parse_prefix6(gw_prefix6, 96),
        )

    def require_gateway_ipv4(self, gw_ipv4: bytes) -> None:
        """The gateway's own address must sit outside the mote pool."""
        if gw_ipv4[:POOL_PREFIX_BYTES] == self.pool_prefix4:
            raise ValueError("pool_prefix4 must not contain the gateway's own IPv4 address")


def _parse_prefix6(text: str, bits: int) -> bytes:
    addr_text, _, plen = text.partition("/")
    if plen and int(plen) != bits:
        raise ValueError(f"prefix {text} must be /{bits}")
    packed = ipaddress.IPv6Address(addr_text).packed
    nbytes = bits // 8
    if any(packed[nbytes:]):
        raise ValueError(f"{text} has bits set past /{bits}")
    return packed[:nbytes]


def _parse_prefix4(text: str, bits: int) -> bytes:
    addr_text, _, plen = text.partition("/")
    if plen and int(plen) != bits:
        raise ValueError(f"prefix {text} must be /{bits}")
    packed = ipaddress.IPv4Address(addr_text).packed
    nbytes = bits // 8
    if any(packed[nbytes:]):
        raise ValueError(f"{text} has bits set past /{bits}")
    return packed[:nbytes]


def mote6_to_virtual4(a: bytes, cfg: AddressMapConfig) -> bytes:
    if a[:MESH_PREFIX_BYTES] != cfg.mesh_prefix6:
        raise NotMeshAddress(f"{format_ipv6(a)} is not under the mesh prefix")
    return cfg.pool_prefix4 + a[MESH_PREFIX_BYTES:]


def virtual4_to_mote6(v: bytes, cfg: AddressMapConfig) -> bytes:
    if v[:POOL_PREFIX_BYTES] != cfg.pool_prefix4:
        raise NotPoolAddress(f"{format_ipv4(v)} is not under the pool prefix")
    return cfg.mesh_prefix6 + v[POOL_PREFIX_BYTES:]


def host4_to_virtual6(h: bytes, cfg: AddressMapConfig) -> bytes:
    if len(h) != 4:
        raise AddrMapError("IPv4 addresses are 4 bytes")
    return cfg.gw_prefix6 + h


def virtual6_to_host4(a: bytes, cfg: AddressMapConfig) -> bytes:
    if a[:GW_PREFIX_BYTES] != cfg.gw_prefix6:
        raise NotGatewayPrefix(f"{format_ipv6(a)} is not under the gateway prefix")
    return a[GW_PREFIX_BYTES:]


def is_mesh_address(a: bytes, cfg: AddressMapConfig) -> bool:
    return a[:MESH_PREFIX_BYTES] == cfg.mesh_prefix6


def is_gateway_prefixed(a: bytes, cfg: AddressMapConfig) -> bool:
    return a[:GW_PREFIX_BYTES] == cfg.gw_prefix6


def is_pool_address(v: bytes, cfg: AddressMapConfig) -> bool:
    return v[:POOL_PREFIX_BYTES] == cfg.pool_prefix4


def mote_ipv6(mote_id: int, cfg: AddressMapConfig) -> bytes:
    return cfg.mesh_prefix6 + mote_id.to_bytes(2, "big")


def parse_ipv4(text: str) -> bytes:
    return ipaddress.IPv4Address(text).packed


def parse_ipv6(text: str) -> bytes:
    return ipaddress.IPv6Address(text).packed


def format_ipv4(a: bytes) -> str:
    return str(ipaddress.IPv4Address(a))


def format_ipv6(a: bytes) -> str:
    return str(ipaddress.IPv6Address(a))
