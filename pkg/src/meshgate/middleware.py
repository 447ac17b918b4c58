"""Middleware: ingests readings from the gateway, persists time series,
evaluates automation rules, and serves the query/command HTTP API.

The middleware addresses motes purely by their virtual IPv4 addresses; it has
no notion of the mesh's IPv6 world. Persistence is an append-only JSONL log
replayed into memory on start.

HTTP surface (all JSON):

    POST /ingest                                   gateway delivery, idempotent
    GET  /motes                                    roster with link status
    GET  /motes/{id}/readings?window_s=N           series + per-appliance means
    GET  /motes/{id}/latest                        most recent reading
    POST /motes/{id}/appliances/{aid}/command      body {"value": 0|1}
    GET  /buffer/status                            gateway buffer depth + link
    GET  /events                                   SSE stream of new readings
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

DEFAULT_MAX_PLAUSIBLE_MW = 5_000_000
DEFAULT_RETENTION_S = 86_400
TIMESTAMP_SLACK_MS = 3_600_000  # +- 1 h
LINK_STATUS_WINDOW_MS = 5_000

READING_FIELDS = ("mote_id", "appliance_id", "seq", "timestamp_ms", "watts_mw")


@dataclass
class MoteInfo:
    mote_id: int
    virtual_ipv4: str
    appliances: list[int]


@dataclass
class CommandResult:
    status: str  # ok | bad | timeout
    ack: Optional[int] = None
    rtt_ms: Optional[float] = None


class ReadingStore:
    """Idempotent per-(mote, appliance) series with a rolling retention window."""

    def __init__(self, log_path: Optional[str | Path] = None,
                 retention_s: int = DEFAULT_RETENTION_S):
        self.retention_ms = retention_s * 1000
        self._series: dict[tuple[int, int], list[dict]] = {}
        self._seen: set[tuple[int, int]] = set()
        self._latest: dict[int, dict] = {}
        self._lock = threading.Lock()
        self._log = None
        if log_path is not None:
            path = Path(log_path)
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            self._insert_locked(json.loads(line))
            self._log = open(path, "a", encoding="utf-8")

    def insert(self, reading: dict, now_ms: Optional[int] = None) -> str:
        with self._lock:
            status = self._insert_locked(reading)
            if status == "accepted" and self._log is not None:
                self._log.write(json.dumps(reading, separators=(",", ":")) + "\n")
                self._log.flush()
            if now_ms is not None:
                self._prune_locked(now_ms)
        return status

    def _insert_locked(self, reading: dict) -> str:
        key = (reading["mote_id"], reading["seq"])
        if key in self._seen:
            return "duplicate"
        self._seen.add(key)
        series = self._series.setdefault(
            (reading["mote_id"], reading["appliance_id"]), []
        )
        series.append(reading)
        series.sort(key=lambda r: r["seq"])
        latest = self._latest.get(reading["mote_id"])
        if latest is None or reading["seq"] > latest["seq"]:
            self._latest[reading["mote_id"]] = reading
        return "accepted"

    def _prune_locked(self, now_ms: int) -> None:
        horizon = now_ms - self.retention_ms
        for key, series in self._series.items():
            if series and series[0]["timestamp_ms"] < horizon:
                kept = [r for r in series if r["timestamp_ms"] >= horizon]
                self._series[key] = kept

    def latest(self, mote_id: int) -> Optional[dict]:
        with self._lock:
            return self._latest.get(mote_id)

    def series(self, mote_id: int, window_s: Optional[int] = None,
               now_ms: Optional[int] = None,
               appliance_id: Optional[int] = None) -> list[dict]:
        with self._lock:
            rows: list[dict] = []
            for (mid, aid), series in self._series.items():
                if mid != mote_id:
                    continue
                if appliance_id is not None and aid != appliance_id:
                    continue
                rows.extend(series)
        if window_s is not None and now_ms is not None:
            horizon = now_ms - window_s * 1000
            rows = [r for r in rows if r["timestamp_ms"] >= horizon]
        rows.sort(key=lambda r: (r["timestamp_ms"], r["seq"]))
        return rows

    def aggregates(self, mote_id: int, window_s: Optional[int] = None,
                   now_ms: Optional[int] = None) -> dict[int, float]:
        rows = self.series(mote_id, window_s, now_ms)
        sums: dict[int, list] = {}
        for r in rows:
            acc = sums.setdefault(r["appliance_id"], [0, 0])
            acc[0] += r["watts_mw"]
            acc[1] += 1
        return {aid: total / count for aid, (total, count) in sums.items()}

    def seqs(self, mote_id: int) -> list[int]:
        with self._lock:
            out = []
            for (mid, _), series in self._series.items():
                if mid == mote_id:
                    out.extend(r["seq"] for r in series)
        return sorted(out)

    def close(self) -> None:
        if self._log is not None:
            self._log.close()


@dataclass
class AutomationRule:
    mote_id: int
    appliance_id: int
    threshold_watts: float
    sustain_seconds: float
    action: str = "turn_off"


@dataclass
class _RuleState:
    armed: bool = True
    fired_count: int = 0


class RuleEngine:
    """Fires each rule at most once per sustained excursion above threshold."""

    def __init__(self, rules: list[AutomationRule], store: ReadingStore,
                 command_sender: Callable[[int, int, int], CommandResult]):
        self.rules = rules
        self.store = store
        self.send_command = command_sender
        self.states = [_RuleState() for _ in rules]
        self.failures = 0

    def evaluate(self, now_ms: int) -> list[tuple[AutomationRule, CommandResult]]:
        fired = []
        for rule, state in zip(self.rules, self.states):
            series = self.store.series(rule.mote_id, appliance_id=rule.appliance_id)
            if not series:
                continue
            threshold_mw = rule.threshold_watts * 1000
            run: list[dict] = []
            for r in series:
                if r["watts_mw"] > threshold_mw:
                    run.append(r)
                else:
                    run = []
            if not run:
                state.armed = True
                continue
            span_ms = run[-1]["timestamp_ms"] - run[0]["timestamp_ms"]
            if state.armed and span_ms >= rule.sustain_seconds * 1000:
                result = self.send_command(rule.mote_id, rule.appliance_id, 0)
                if result.status == "ok":
                    state.armed = False
                    state.fired_count += 1
                    fired.append((rule, result))
                else:
                    self.failures += 1
        return fired


class EventBroker:
    """Fan-out of new readings to server-sent-event subscribers."""

    def __init__(self):
        self._subscribers: list[queue.Queue] = []
        self._lock = threading.Lock()

    def publish(self, reading: dict) -> None:
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put_nowait(reading)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)


@dataclass
class MiddlewareConfig:
    max_plausible_mw: int = DEFAULT_MAX_PLAUSIBLE_MW
    retention_s: int = DEFAULT_RETENTION_S
    rules: list[AutomationRule] = field(default_factory=list)


def wall_clock_ms() -> int:
    return int(time.time() * 1000)


def create_app(
    store: ReadingStore,
    roster: list[MoteInfo],
    command_sender: Optional[Callable[[int, int, int], CommandResult]] = None,
    clock_ms: Callable[[], int] = wall_clock_ms,
    gateway_status: Optional[Callable[[], dict]] = None,
    max_plausible_mw: int = DEFAULT_MAX_PLAUSIBLE_MW,
    rules: Optional[list[AutomationRule]] = None,
) -> FastAPI:
    app = FastAPI(title="meshgate middleware")
    broker = EventBroker()
    roster_by_id = {m.mote_id: m for m in roster}
    engine = RuleEngine(rules or [], store, command_sender) if command_sender else None
    app.state.store = store
    app.state.broker = broker
    app.state.rule_engine = engine
    app.state.clock_ms = clock_ms

    @app.post("/ingest")
    async def ingest(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body is not JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "body must be an object"}, status_code=400)
        for fieldname in READING_FIELDS:
            value = body.get(fieldname)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                return JSONResponse(
                    {"error": f"{fieldname} must be a non-negative integer"},
                    status_code=400,
                )
        now = clock_ms()
        if body["watts_mw"] > max_plausible_mw:
            return JSONResponse(
                {"filtered": f"watts_mw {body['watts_mw']} above plausible maximum"},
                status_code=422,
            )
        if abs(body["timestamp_ms"] - now) > TIMESTAMP_SLACK_MS:
            return JSONResponse(
                {"filtered": "timestamp beyond one hour of server clock"},
                status_code=422,
            )
        reading = {f: body[f] for f in READING_FIELDS}
        status = store.insert(reading, now_ms=now)
        if status == "accepted":
            broker.publish(reading)
        return {"status": status}

    @app.get("/motes")
    def motes():
        now = clock_ms()
        out = []
        for info in roster:
            latest = store.latest(info.mote_id)
            up = latest is not None and now - latest["timestamp_ms"] <= LINK_STATUS_WINDOW_MS
            out.append(
                {
                    "mote_id": info.mote_id,
                    "virtual_ipv4": info.virtual_ipv4,
                    "appliances": info.appliances,
                    "link_status": "up" if up else "down",
                }
            )
        return out

    @app.get("/motes/{mote_id}/readings")
    def readings(mote_id: int, window_s: int = 60):
        if mote_id not in roster_by_id:
            return JSONResponse({"error": "unknown mote"}, status_code=404)
        now = clock_ms()
        rows = store.series(mote_id, window_s, now)
        means = store.aggregates(mote_id, window_s, now)
        return {
            "mote_id": mote_id,
            "window_s": window_s,
            "readings": rows,
            "mean_watts_mw": {str(aid): mean for aid, mean in means.items()},
        }

    @app.get("/motes/{mote_id}/latest")
    def latest(mote_id: int):
        if mote_id not in roster_by_id:
            return JSONResponse({"error": "unknown mote"}, status_code=404)
        reading = store.latest(mote_id)
        if reading is None:
            return JSONResponse({"error": "no readings yet"}, status_code=404)
        return reading

    @app.post("/motes/{mote_id}/appliances/{appliance_id}/command")
    def command(mote_id: int, appliance_id: int, body: dict):
        info = roster_by_id.get(mote_id)
        if info is None:
            return JSONResponse({"error": "unknown mote"}, status_code=404)
        value = body.get("value")
        if value not in (0, 1):
            return JSONResponse({"error": "value must be 0 or 1"}, status_code=400)
        if command_sender is None:
            return JSONResponse({"error": "command path not wired"}, status_code=503)
        result = command_sender(mote_id, appliance_id, value)
        if result.status == "timeout":
            return JSONResponse({"error": "mote did not answer"}, status_code=504)
        if result.status != "ok":
            return JSONResponse(
                {"error": "mote rejected the command", "ack": "0x15"}, status_code=502
            )
        return {"ack": f"0x{result.ack:02x}", "rtt_ms": result.rtt_ms}

    @app.get("/buffer/status")
    def buffer_status():
        if gateway_status is None:
            return {"link": "unknown", "depth": None}
        return gateway_status()

    @app.get("/events")
    def events():
        def stream():
            q = broker.subscribe()
            try:
                while True:
                    try:
                        reading = q.get(timeout=15)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    yield f"data: {json.dumps(reading, separators=(',', ':'))}\n\n"
            finally:
                broker.unsubscribe(q)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
