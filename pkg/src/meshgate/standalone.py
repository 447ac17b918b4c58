"""Standalone gateway process: the same GatewayCore driven by real sockets.

- serial side: a TCP client connection carrying SerialFrames (the framing is
  self-delimiting, so the byte stream needs no extra structure)
- external side: a UDP socket where each datagram is one encoded IPv4 packet;
  replies are routed back to the UDP peer that last used that IPv4 source
- middleware side: HTTP POST /ingest
"""

from __future__ import annotations

import socket
import threading
from typing import Optional

from .addrmap import AddressMapConfig
from .gateway import GatewayCore, HttpMiddlewareLink, WallScheduler
from .netmodel import CodecError, decode_ipv4


def parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class StandaloneGateway:
    def __init__(
        self,
        cfg: AddressMapConfig,
        own_ipv4: bytes,
        serial_addr: tuple[str, int],
        listen_addr: tuple[str, int],
        middleware_url: Optional[str],
        buffer_dir: str,
    ):
        self._serial_addr = serial_addr
        self._stop = threading.Event()
        self._peers: dict[bytes, tuple[str, int]] = {}
        self._peers_lock = threading.Lock()

        self._serial_sock = socket.create_connection(serial_addr, timeout=10)
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp.bind(listen_addr)
        self._udp.settimeout(0.5)

        link = HttpMiddlewareLink(middleware_url) if middleware_url else None
        self.core = GatewayCore(
            cfg,
            own_ipv4,
            WallScheduler(),
            serial_tx=self._serial_tx,
            external_tx=self._external_tx,
            buffer_dir=buffer_dir,
            middleware_link=link,
        )
        self._threads = [
            threading.Thread(target=self._serial_reader, daemon=True),
            threading.Thread(target=self._udp_reader, daemon=True),
        ]

    def start(self) -> None:
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._serial_sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._serial_sock.close()
        self._udp.close()
        self.core.close()

    def wait(self) -> None:
        for t in self._threads:
            t.join()

    def _serial_tx(self, data: bytes) -> None:
        try:
            self._serial_sock.sendall(data)
        except OSError:
            pass

    def _external_tx(self, raw: bytes) -> None:
        try:
            packet = decode_ipv4(raw)
        except CodecError:
            return
        with self._peers_lock:
            peer = self._peers.get(packet.dst)
        if peer is not None:
            try:
                self._udp.sendto(raw, peer)
            except OSError:
                pass

    def _serial_reader(self) -> None:
        while not self._stop.is_set():
            try:
                data = self._serial_sock.recv(4096)
            except OSError:
                break
            if not data:
                break
            self.core.on_serial_bytes(data)

    def _udp_reader(self) -> None:
        while not self._stop.is_set():
            try:
                raw, peer = self._udp.recvfrom(65536)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                packet = decode_ipv4(raw)
            except CodecError:
                continue
            with self._peers_lock:
                self._peers[packet.src] = peer
            self.core.on_external_packet(raw)
