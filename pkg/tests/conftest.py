import socket
import threading
import time

import pytest

from meshgate.addrmap import AddressMapConfig, parse_ipv4
from meshgate.config import ApplianceSpec, ScenarioConfig


def pytest_runtest_logreport(report):
    # One visible verdict line per acceptance criterion.
    if "test_acceptance" in report.nodeid and report.when == "call":
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {name}: {verdict}", flush=True)


def make_scenario(**overrides) -> ScenarioConfig:
    """A complete ScenarioConfig with sane test defaults, built in code so
    tests can tweak single fields without YAML round trips."""
    base = dict(
        name="test",
        seed=1,
        duration_s=30.0,
        motes=3,
        sense_period_s=1.0,
        sense_phase_max_s=0.4,
        sense_dither_ms=20.0,
        appliances=[ApplianceSpec(1, 100.0, 5.0, True)],
        topology_preset="line",
        topology_density=0.4,
        topology_links=[],
        link_latency_us=2000,
        link_loss=0.0,
        link_overrides=[],
        serial_latency_us=1000,
        external_latency_us=2000,
        addrmap=AddressMapConfig.from_strings(),
        gateway_ipv4=parse_ipv4("192.0.2.10"),
        client_ipv4=parse_ipv4("192.0.2.1"),
        max_plausible_mw=5_000_000,
        retention_s=86_400,
        rules=[],
        events=[],
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class UvicornThread:
    """A real HTTP server around an ASGI app, for streaming and link tests."""

    def __init__(self, app, port=None):
        import uvicorn

        self.port = port or free_port()
        config = uvicorn.Config(
            app, host="127.0.0.1", port=self.port, log_level="error", lifespan="off"
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.base_url = f"http://127.0.0.1:{self.port}"

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.02)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture
def middleware_server():
    from meshgate.middleware import MoteInfo, ReadingStore, create_app

    store = ReadingStore()
    app = create_app(
        store,
        [MoteInfo(1, "10.77.0.1", [1]), MoteInfo(2, "10.77.0.2", [1])],
        clock_ms=lambda: 1_000_000,
    )
    with UvicornThread(app) as server:
        yield server.base_url, store
