"""Experiment harness: traffic-vs-delay/jitter sweeps and translation timing.

Both experiments ship their raw samples next to the derived statistics, so
every reported number can be recomputed from the files alone.

Experiment 1 (traffic): for each mote count, run the full simulated stack for
the configured duration with every mote sensing at 1 Hz, and measure each
reading's delay from the mote handing it to its telemetry connection to the
gateway's telemetry server parsing it (simulated microseconds, end to end
through fragmentation, contention, routing, and the serial tunnel).

Experiment 2 (translation): pump synthetic externally-arriving packets through
the gateway's transformation path and report wall-clock microseconds per
packet with a fixed-width histogram.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import random
import statistics
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import addrmap as amap
from .config import ScenarioConfig
from .gateway import GatewayCore, timing_report_from_samples
from .netmodel import Ipv4Packet, encode_ipv4
from .sim import Simulator
from .transport import Segment, encode_segment
from .world import World

FLAG_ACK = 0x02


@dataclass(frozen=True)
class DelaySample:
    mote_id: int
    seq: int
    send_us: int
    recv_us: int

    @property
    def delay_us(self) -> int:
        return self.recv_us - self.send_us


def collect_delay_samples(world: World) -> list[DelaySample]:
    samples = []
    for mote_id, seq, recv_us in world.recv_log:
        send_us = world.send_log.get((mote_id, seq))
        if send_us is not None:
            samples.append(DelaySample(mote_id, seq, send_us, recv_us))
    return samples


def run_traffic_experiment(
    base: ScenarioConfig,
    counts: list[int],
    duration_s: float,
    seed: int,
    out_dir: str | Path | None = None,
) -> dict:
    levels = []
    for count in counts:
        cfg = dataclasses.replace(
            base, motes=count, duration_s=duration_s, seed=seed, events=[]
        )
        world = World(cfg)
        world.run_until_s(duration_s)
        samples = collect_delay_samples(world)
        delays = [s.delay_us for s in samples]
        levels.append(
            {
                "mote_count": count,
                "samples": len(delays),
                "mean_delay_us": statistics.fmean(delays) if delays else 0.0,
                "jitter_us": statistics.pstdev(delays) if len(delays) > 1 else 0.0,
                "raw": [dataclasses.asdict(s) for s in samples],
            }
        )
    report = {
        "experiment": "traffic",
        "seed": seed,
        "duration_s": duration_s,
        "scenario": base.name,
        "levels": levels,
    }
    if out_dir is not None:
        write_traffic_report(report, out_dir)
    return report


def write_traffic_report(report: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for level in report["levels"]:
        with open(out / f"delays_{level['mote_count']}motes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mote_id", "seq", "send_us", "recv_us", "delay_us"])
            for row in level["raw"]:
                writer.writerow(
                    [row["mote_id"], row["seq"], row["send_us"], row["recv_us"],
                     row["recv_us"] - row["send_us"]]
                )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mote_count", "samples", "mean_delay_us", "jitter_us"])
        for level in report["levels"]:
            writer.writerow(
                [level["mote_count"], level["samples"],
                 f"{level['mean_delay_us']:.3f}", f"{level['jitter_us']:.3f}"]
            )
    with open(out / "summary.json", "w") as fh:
        json.dump(report, fh, indent=2)


def make_translation_packet(rng: random.Random, cfg) -> bytes:
    """One valid externally-arriving IPv4 packet bound for a pooled mote."""
    src = bytes([192, 0, 2, rng.randrange(1, 255)])
    dst = cfg.pool_prefix4 + rng.randrange(1, 8).to_bytes(2, "big")
    seg = Segment(
        src_port=rng.randrange(1024, 65535),
        dst_port=7000,
        seq=rng.randrange(0, 1 << 16),
        ack=rng.randrange(0, 1 << 16),
        flags=FLAG_ACK,
        payload=bytes(rng.randrange(256) for _ in range(rng.randrange(0, 64))),
    )
    return encode_ipv4(Ipv4Packet(src, dst, 6, 64, encode_segment(seg, src, dst)))


def run_translation_experiment(
    n_packets: int = 200,
    out_dir: str | Path | None = None,
    seed: int = 0,
    addr_cfg=None,
) -> dict:
    cfg = addr_cfg or amap.AddressMapConfig.from_strings()
    rng = random.Random(seed)
    sent_to_serial: list[bytes] = []
    with tempfile.TemporaryDirectory(prefix="meshgate-xlat-") as tmp:
        gw = GatewayCore(
            cfg,
            amap.parse_ipv4("192.0.2.10"),
            Simulator(0),
            serial_tx=sent_to_serial.append,
            external_tx=lambda raw: None,
            buffer_dir=tmp,
        )
        for _ in range(n_packets):
            gw.on_external_packet(make_translation_packet(rng, cfg))
        samples = list(gw.timing_log_us)
        gw.close()
    assert len(sent_to_serial) == n_packets, "every pumped packet must be translated"
    report = timing_report_from_samples(samples)
    report.update({"experiment": "translation", "samples_us": samples})
    if out_dir is not None:
        write_translation_report(report, out_dir)
    return report


def write_translation_report(report: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["packet_index", "micros"])
        for i, micros in enumerate(report["samples_us"]):
            writer.writerow([i, f"{micros:.3f}"])
    summary = {k: v for k, v in report.items() if k != "samples_us"}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
