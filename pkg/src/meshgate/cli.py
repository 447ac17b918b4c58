"""Command-line entry point.

    meshgate sim --scenario clique7 --out outdir          headless run + trace
    meshgate serve --scenario clique7 --port 8000         live stack for the panel
    meshgate experiments traffic --counts 1..7 --duration 300 --seed 42 --out d
    meshgate experiments xlat --packets 200 --out d
    meshgate validate-config scenario.yaml [...]
    meshgate gateway --config s.yaml --serial H:P --listen H:P --middleware URL --buffer DIR
    meshgate plots --traffic DIR --xlat DIR --out DIR

MESHGATE_CONFIG can stand in for --scenario/--config. Exit codes: 0 success,
1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
import time
from pathlib import Path

from .config import ConfigError, load_scenario, resolve_scenario

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class UsageError(Exception):
    pass


def _scenario_ref(args) -> str:
    ref = getattr(args, "scenario", None) or getattr(args, "config", None)
    ref = ref or os.environ.get("MESHGATE_CONFIG")
    if not ref:
        raise UsageError("a scenario is required (--scenario, --config, or MESHGATE_CONFIG)")
    return ref


def _parse_counts(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",") if part]


def cmd_sim(args) -> int:
    from .sim import TraceWriter
    from .world import World

    cfg = resolve_scenario(_scenario_ref(args))
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.jsonl"
    with open(trace_path, "w", encoding="utf-8") as fh:
        world = World(cfg, trace=TraceWriter(fh), buffer_dir=str(out / "buffer"))
        world.run_until_s(cfg.duration_s)
        summary = world.summary()
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"scenario {cfg.name}: {summary['events_run']} events, "
          f"{summary['readings_received']} readings -> {trace_path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for ref in args.paths:
        try:
            cfg = load_scenario(ref)
        except ConfigError as exc:
            print(exc, file=sys.stderr)
            status = EXIT_CONFIG
        except FileNotFoundError:
            print(f"{ref}: no such file", file=sys.stderr)
            status = EXIT_CONFIG
        else:
            print(f"{ref}: ok ({cfg.name}, {cfg.motes} motes)")
    return status


def cmd_experiments_traffic(args) -> int:
    from .experiments import run_traffic_experiment

    base = resolve_scenario(args.scenario or os.environ.get("MESHGATE_CONFIG") or "clique7")
    counts = _parse_counts(args.counts)
    started = time.monotonic()
    report = run_traffic_experiment(base, counts, args.duration, args.seed, args.out)
    elapsed = time.monotonic() - started
    for level in report["levels"]:
        print(
            f"motes={level['mote_count']:2d} samples={level['samples']:5d} "
            f"mean={level['mean_delay_us']:10.1f}us jitter={level['jitter_us']:9.1f}us"
        )
    print(f"done in {elapsed:.1f}s wall -> {args.out}")
    return EXIT_OK


def cmd_experiments_xlat(args) -> int:
    from .experiments import run_translation_experiment

    report = run_translation_experiment(args.packets, args.out)
    print(
        f"{report['count']} packets: mean={report['mean_us']:.1f}us "
        f"jitter={report['jitter_us']:.1f}us bins={len(report['bins'])} -> {args.out}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .gateway import HttpMiddlewareLink
    from .middleware import ReadingStore, create_app
    from .world import World

    cfg = resolve_scenario(_scenario_ref(args))
    base_url = f"http://{args.host}:{args.port}"
    link = HttpMiddlewareLink(base_url)
    world = World(cfg, middleware_link=link)

    store = ReadingStore(log_path=args.store or None, retention_s=cfg.retention_s)
    clock_ms = lambda: world.sim.now_us // 1000  # noqa: E731

    def command_sender(mote_id: int, appliance_id: int, value: int):
        from .middleware import CommandResult

        done = threading.Event()
        slot: list = [CommandResult("timeout")]

        def reply(result):
            slot[0] = result
            done.set()

        world.submit_command(mote_id, appliance_id, value, reply)
        done.wait(timeout=30)
        return slot[0]

    app = create_app(
        store,
        world.roster(),
        command_sender=command_sender,
        clock_ms=clock_ms,
        gateway_status=world.gateway_status,
        max_plausible_mw=cfg.max_plausible_mw,
        rules=cfg.rules,
    )

    panel_dir = Path(args.panel)
    if panel_dir.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/panel", StaticFiles(directory=str(panel_dir), html=True), name="panel")
        print(f"control panel at {base_url}/panel/")
    else:
        print(f"no panel build at {panel_dir}; API only")

    stop = threading.Event()

    def drive():
        t0 = time.monotonic()
        while not stop.is_set():
            target_us = int((time.monotonic() - t0) * 1_000_000 * args.speed)
            world.sim.run_until(target_us)
            world.pump_pending_commands()
            engine = app.state.rule_engine
            if engine is not None:
                engine.evaluate(clock_ms())
            time.sleep(0.02)

    driver = threading.Thread(target=drive, daemon=True)
    driver.start()
    print(f"middleware API at {base_url} (scenario {cfg.name}, speed x{args.speed})")
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    finally:
        stop.set()
        driver.join(timeout=2)
    return EXIT_OK


def cmd_gateway(args) -> int:
    from .standalone import StandaloneGateway, parse_hostport

    cfg = resolve_scenario(_scenario_ref(args))
    gw = StandaloneGateway(
        cfg.addrmap,
        cfg.gateway_ipv4,
        parse_hostport(args.serial),
        parse_hostport(args.listen),
        args.middleware,
        args.buffer,
    )
    gw.start()
    print(f"gateway up: serial={args.serial} external={args.listen} buffer={args.buffer}")
    try:
        gw.wait()
    except KeyboardInterrupt:
        pass
    finally:
        gw.stop()
    return EXIT_OK


def cmd_plots(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.traffic:
        with open(Path(args.traffic) / "summary.json", encoding="utf-8") as fh:
            report = json.load(fh)
        counts = [lv["mote_count"] for lv in report["levels"]]
        means = [lv["mean_delay_us"] / 1000 for lv in report["levels"]]
        jitters = [lv["jitter_us"] / 1000 for lv in report["levels"]]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(counts, means, "o-", label="mean delay")
        ax.plot(counts, jitters, "s--", label="jitter")
        ax.set_xlabel("motes generating traffic")
        ax.set_ylabel("milliseconds")
        ax.set_title("Delay and jitter vs. traffic")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out / "delay_jitter.png"
        fig.savefig(path)
        made.append(path)
    if args.xlat:
        with open(Path(args.xlat) / "summary.json", encoding="utf-8") as fh:
            report = json.load(fh)
        width = report["bin_width_us"]
        edges = [i * width for i in range(len(report["bins"]))]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(edges, report["bins"], width=width * 0.9, align="edge")
        ax.set_xlabel("transformation time (us)")
        ax.set_ylabel("packets")
        ax.set_title(f"Transformation delay histogram (n={report['count']})")
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = out / "delay_histogram.png"
        fig.savefig(path)
        made.append(path)
    for path in made:
        print(f"wrote {path}")
    return EXIT_OK if made else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshgate", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="headless scenario run producing a trace")
    p.add_argument("--scenario", help="preset name or path")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default="meshgate-out", help="output directory")
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("validate-config", help="check scenario files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("experiments", help="run the measurement experiments")
    esub = p.add_subparsers(dest="experiment", required=True)
    pt = esub.add_parser("traffic", help="delay/jitter vs. mote count")
    pt.add_argument("--counts", default="1..7", help="e.g. 1..7 or 1,3,5")
    pt.add_argument("--duration", type=float, default=300.0, help="simulated seconds per level")
    pt.add_argument("--seed", type=int, default=42)
    pt.add_argument("--scenario", default=None, help="base scenario (default clique7)")
    pt.add_argument("--out", default="experiment-traffic")
    pt.set_defaults(fn=cmd_experiments_traffic)
    px = esub.add_parser("xlat", help="gateway transformation timing")
    px.add_argument("--packets", type=int, default=200)
    px.add_argument("--out", default="experiment-xlat")
    px.set_defaults(fn=cmd_experiments_xlat)

    p = sub.add_parser("serve", help="live stack: mesh + gateway + middleware")
    p.add_argument("--scenario", help="preset name or path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second")
    p.add_argument("--panel", default="frontend/dist", help="control panel static build")
    p.add_argument("--store", default="",
                   help="middleware persistence log; empty keeps the store in "
                        "memory (a fresh simulation restarts seq numbering, so "
                        "only persist when resuming the same run)")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("gateway", help="standalone gateway over real sockets")
    p.add_argument("--config", help="scenario file supplying the address map")
    p.add_argument("--serial", required=True, help="host:port of the serial tunnel")
    p.add_argument("--listen", required=True, help="host:port for external IPv4-over-UDP")
    p.add_argument("--middleware", default=None, help="middleware base URL")
    p.add_argument("--buffer", default="gateway-buffer", help="durable buffer directory")
    p.set_defaults(fn=cmd_gateway)

    p = sub.add_parser("plots", help="render figures from experiment output")
    p.add_argument("--traffic", default=None, help="traffic experiment output dir")
    p.add_argument("--xlat", default=None, help="translation experiment output dir")
    p.add_argument("--out", default="plots")
    p.set_defaults(fn=cmd_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures exit 1, per contract
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
