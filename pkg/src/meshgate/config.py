"""Scenario configuration: YAML schema, line-precise validation, presets.

Validation walks the composed YAML node tree so every complaint carries the
offending file:line. Unknown keys are rejected; see docs/formats.md for the
full schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .addrmap import AddressMapConfig, parse_ipv4
from .middleware import AutomationRule

TOPOLOGY_PRESETS = ("line", "star", "clique", "mesh", "explicit")
EVENT_ACTIONS = (
    "command",
    "kill_link",
    "restore_link",
    "middleware_down",
    "middleware_up",
    "serial_down",
    "serial_up",
)


class ConfigError(Exception):
    def __init__(self, filename: str, line: int, message: str):
        self.filename = filename
        self.line = line
        self.message = message
        super().__init__(f"{filename}:{line}: {message}")


@dataclass
class ApplianceSpec:
    appliance_id: int
    base_watts: float
    noise_watts: float
    initially_on: bool


@dataclass
class LinkOverride:
    a: int
    b: int
    latency_us: Optional[int] = None
    loss: Optional[float] = None


@dataclass
class ScenarioEvent:
    at_s: float
    action: str
    mote: Optional[int] = None
    appliance: Optional[int] = None
    value: Optional[int] = None
    a: Optional[int] = None
    b: Optional[int] = None


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    motes: int
    sense_period_s: float
    sense_phase_max_s: float
    sense_dither_ms: float
    appliances: list[ApplianceSpec]
    topology_preset: str
    topology_density: float
    topology_links: list[tuple[int, int]]
    link_latency_us: int
    link_loss: float
    link_overrides: list[LinkOverride]
    serial_latency_us: int
    external_latency_us: int
    addrmap: AddressMapConfig
    gateway_ipv4: bytes
    client_ipv4: bytes
    max_plausible_mw: int
    retention_s: int
    rules: list[AutomationRule] = field(default_factory=list)
    events: list[ScenarioEvent] = field(default_factory=list)


class _Cursor:
    """A YAML node plus enough context to produce file:line diagnostics."""

    def __init__(self, node, filename: str, path: str):
        self.node = node
        self.filename = filename
        self.path = path

    @property
    def line(self) -> int:
        return self.node.start_mark.line + 1

    def fail(self, message: str):
        label = f"{self.path}: " if self.path else ""
        raise ConfigError(self.filename, self.line, label + message)

    def mapping(self) -> dict[str, "_Cursor"]:
        if not isinstance(self.node, yaml.MappingNode):
            self.fail("expected a mapping")
        out = {}
        for key_node, value_node in self.node.value:
            key = key_node.value
            out[key] = _Cursor(value_node, self.filename, f"{self.path}.{key}".lstrip("."))
        return out

    def sequence(self) -> list["_Cursor"]:
        if not isinstance(self.node, yaml.SequenceNode):
            self.fail("expected a list")
        return [
            _Cursor(child, self.filename, f"{self.path}[{i}]")
            for i, child in enumerate(self.node.value)
        ]

    def _scalar(self):
        if not isinstance(self.node, yaml.ScalarNode):
            self.fail("expected a scalar")
        # Construct from the composed node so quoting survives (a re-parse of
        # the raw text would read "fd00::" as a mapping).
        loader = yaml.SafeLoader("")
        return loader.construct_object(self.node, deep=True)

    def str_value(self) -> str:
        value = self._scalar()
        if not isinstance(value, str):
            self.fail(f"expected a string, got {value!r}")
        return value

    def int_value(self, lo: Optional[int] = None, hi: Optional[int] = None) -> int:
        value = self._scalar()
        if not isinstance(value, int) or isinstance(value, bool):
            self.fail(f"expected an integer, got {value!r}")
        self._check_range(value, lo, hi)
        return value

    def float_value(self, lo: Optional[float] = None, hi: Optional[float] = None) -> float:
        value = self._scalar()
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"expected a number, got {value!r}")
        self._check_range(value, lo, hi)
        return float(value)

    def bool_value(self) -> bool:
        value = self._scalar()
        if not isinstance(value, bool):
            self.fail(f"expected true/false, got {value!r}")
        return value

    def _check_range(self, value, lo, hi):
        if lo is not None and value < lo:
            self.fail(f"value {value} below minimum {lo}")
        if hi is not None and value > hi:
            self.fail(f"value {value} above maximum {hi}")


def _take(mapping: dict[str, _Cursor], parent: _Cursor, allowed: set[str],
          required: set[str]) -> None:
    for key in mapping:
        if key not in allowed:
            mapping[key].fail(f"unknown key '{key}'")
    for key in required:
        if key not in mapping:
            parent.fail(f"missing required key '{key}'")


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_scenario(text, str(path))


def parse_scenario(text: str, filename: str = "<scenario>") -> ScenarioConfig:
    try:
        root_node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ConfigError(filename, line, f"not valid YAML: {exc}") from exc
    if root_node is None:
        raise ConfigError(filename, 0, "empty scenario file")
    root = _Cursor(root_node, filename, "")
    top = root.mapping()
    _take(
        top,
        root,
        allowed={
            "name", "seed", "duration_s", "motes", "sensing", "appliances",
            "topology", "link_defaults", "link_overrides", "serial_latency_us",
            "external_latency_us", "addrmap", "gateway_ipv4", "client_ipv4",
            "middleware", "events",
        },
        required={"name", "motes", "duration_s", "topology"},
    )

    name = top["name"].str_value()
    seed = top["seed"].int_value() if "seed" in top else 0
    duration_s = top["duration_s"].float_value(lo=0)
    motes = top["motes"].int_value(lo=1, hi=65535)

    period_s, phase_max_s, dither_ms = 1.0, 0.5, 50.0
    if "sensing" in top:
        sensing = top["sensing"].mapping()
        _take(sensing, top["sensing"], {"period_s", "phase_max_s", "dither_ms"}, set())
        if "period_s" in sensing:
            period_s = sensing["period_s"].float_value(lo=0.001)
        if "phase_max_s" in sensing:
            phase_max_s = sensing["phase_max_s"].float_value(lo=0)
        if "dither_ms" in sensing:
            dither_ms = sensing["dither_ms"].float_value(lo=0)
    if phase_max_s + dither_ms / 1000.0 >= period_s:
        node = top["sensing"] if "sensing" in top else top["name"]
        node.fail(
            "phase_max_s + dither_ms must stay below period_s to keep one reading per period"
        )

    appliances = [ApplianceSpec(1, 100.0, 5.0, True)]
    if "appliances" in top:
        appliances = []
        seen_ids = set()
        for item in top["appliances"].sequence():
            entry = item.mapping()
            _take(entry, item, {"id", "base_watts", "noise_watts", "initially_on"}, {"id", "base_watts"})
            aid = entry["id"].int_value(lo=1, hi=255)
            if aid in seen_ids:
                entry["id"].fail(f"duplicate appliance id {aid}")
            seen_ids.add(aid)
            appliances.append(
                ApplianceSpec(
                    aid,
                    entry["base_watts"].float_value(lo=0),
                    entry["noise_watts"].float_value(lo=0) if "noise_watts" in entry else 0.0,
                    entry["initially_on"].bool_value() if "initially_on" in entry else True,
                )
            )

    topo = top["topology"].mapping()
    _take(topo, top["topology"], {"preset", "density", "links"}, {"preset"})
    preset = topo["preset"].str_value()
    if preset not in TOPOLOGY_PRESETS:
        topo["preset"].fail(f"preset must be one of {', '.join(TOPOLOGY_PRESETS)}")
    density = topo["density"].float_value(lo=0.0, hi=1.0) if "density" in topo else 0.4
    links: list[tuple[int, int]] = []
    if preset == "explicit":
        if "links" not in topo:
            top["topology"].fail("explicit topology needs a links list")
        for item in topo["links"].sequence():
            pair = item.sequence()
            if len(pair) != 2:
                item.fail("each link is a [a, b] pair")
            links.append((pair[0].int_value(lo=0), pair[1].int_value(lo=0)))

    latency_us, loss = 2000, 0.0
    if "link_defaults" in top:
        defaults = top["link_defaults"].mapping()
        _take(defaults, top["link_defaults"], {"latency_us", "loss"}, set())
        if "latency_us" in defaults:
            latency_us = defaults["latency_us"].int_value(lo=1)
        if "loss" in defaults:
            loss = defaults["loss"].float_value(lo=0.0, hi=1.0)

    overrides: list[LinkOverride] = []
    if "link_overrides" in top:
        for item in top["link_overrides"].sequence():
            entry = item.mapping()
            _take(entry, item, {"a", "b", "latency_us", "loss"}, {"a", "b"})
            overrides.append(
                LinkOverride(
                    entry["a"].int_value(lo=0),
                    entry["b"].int_value(lo=0),
                    entry["latency_us"].int_value(lo=1) if "latency_us" in entry else None,
                    entry["loss"].float_value(lo=0.0, hi=1.0) if "loss" in entry else None,
                )
            )

    serial_latency_us = (
        top["serial_latency_us"].int_value(lo=0) if "serial_latency_us" in top else 1000
    )
    external_latency_us = (
        top["external_latency_us"].int_value(lo=0) if "external_latency_us" in top else 2000
    )

    mesh_prefix6, pool_prefix4, gw_prefix6 = "fd00:6c70::", "10.77.0.0", "fd00:4664::"
    if "addrmap" in top:
        amap = top["addrmap"].mapping()
        _take(amap, top["addrmap"], {"mesh_prefix6", "pool_prefix4", "gw_prefix6"}, set())
        if "mesh_prefix6" in amap:
            mesh_prefix6 = amap["mesh_prefix6"].str_value()
        if "pool_prefix4" in amap:
            pool_prefix4 = amap["pool_prefix4"].str_value()
        if "gw_prefix6" in amap:
            gw_prefix6 = amap["gw_prefix6"].str_value()
    try:
        addr_cfg = AddressMapConfig.from_strings(mesh_prefix6, pool_prefix4, gw_prefix6)
    except ValueError as exc:
        node = top.get("addrmap", top["name"])
        node.fail(str(exc))

    gateway_ipv4 = _parse_ipv4_key(top, "gateway_ipv4", "192.0.2.10")
    client_ipv4 = _parse_ipv4_key(top, "client_ipv4", "192.0.2.1")
    try:
        addr_cfg.require_gateway_ipv4(gateway_ipv4)
    except ValueError as exc:
        (top.get("gateway_ipv4") or top["name"]).fail(str(exc))

    max_plausible_mw, retention_s = 5_000_000, 86_400
    rules: list[AutomationRule] = []
    if "middleware" in top:
        mw = top["middleware"].mapping()
        _take(mw, top["middleware"], {"max_plausible_mw", "retention_s", "rules"}, set())
        if "max_plausible_mw" in mw:
            max_plausible_mw = mw["max_plausible_mw"].int_value(lo=1)
        if "retention_s" in mw:
            retention_s = mw["retention_s"].int_value(lo=1)
        if "rules" in mw:
            for item in mw["rules"].sequence():
                entry = item.mapping()
                _take(
                    entry, item,
                    {"mote", "appliance", "threshold_watts", "sustain_seconds"},
                    {"mote", "appliance", "threshold_watts", "sustain_seconds"},
                )
                rules.append(
                    AutomationRule(
                        entry["mote"].int_value(lo=1),
                        entry["appliance"].int_value(lo=1),
                        entry["threshold_watts"].float_value(lo=0),
                        entry["sustain_seconds"].float_value(lo=0),
                    )
                )

    events: list[ScenarioEvent] = []
    if "events" in top:
        for item in top["events"].sequence():
            entry = item.mapping()
            _take(
                entry, item,
                {"at_s", "action", "mote", "appliance", "value", "a", "b"},
                {"at_s", "action"},
            )
            action = entry["action"].str_value()
            if action not in EVENT_ACTIONS:
                entry["action"].fail(f"action must be one of {', '.join(EVENT_ACTIONS)}")
            event = ScenarioEvent(entry["at_s"].float_value(lo=0), action)
            if action == "command":
                for key in ("mote", "appliance", "value"):
                    if key not in entry:
                        item.fail(f"command event needs '{key}'")
                event.mote = entry["mote"].int_value(lo=1)
                event.appliance = entry["appliance"].int_value(lo=0)
                event.value = entry["value"].int_value(lo=0, hi=255)
            elif action in ("kill_link", "restore_link"):
                for key in ("a", "b"):
                    if key not in entry:
                        item.fail(f"{action} event needs '{key}'")
                event.a = entry["a"].int_value(lo=0)
                event.b = entry["b"].int_value(lo=0)
            events.append(event)
    events.sort(key=lambda e: e.at_s)

    for spec_rule in rules:
        if spec_rule.mote_id > motes:
            top["middleware"].fail(f"rule references mote {spec_rule.mote_id} beyond count {motes}")

    return ScenarioConfig(
        name=name,
        seed=seed,
        duration_s=duration_s,
        motes=motes,
        sense_period_s=period_s,
        sense_phase_max_s=phase_max_s,
        sense_dither_ms=dither_ms,
        appliances=appliances,
        topology_preset=preset,
        topology_density=density,
        topology_links=links,
        link_latency_us=latency_us,
        link_loss=loss,
        link_overrides=overrides,
        serial_latency_us=serial_latency_us,
        external_latency_us=external_latency_us,
        addrmap=addr_cfg,
        gateway_ipv4=gateway_ipv4,
        client_ipv4=client_ipv4,
        max_plausible_mw=max_plausible_mw,
        retention_s=retention_s,
        rules=rules,
        events=events,
    )


def _parse_ipv4_key(top: dict[str, _Cursor], key: str, default: str) -> bytes:
    if key not in top:
        return parse_ipv4(default)
    try:
        return parse_ipv4(top[key].str_value())
    except ValueError:
        top[key].fail("not a valid IPv4 address")


def preset_path(name: str) -> Path:
    """Resolve a shipped scenario preset by bare name (e.g. 'clique7')."""
    package_dir = resources.files("meshgate.scenarios")
    candidate = package_dir / f"{name}.yaml"
    if not candidate.is_file():
        available = sorted(p.name[:-5] for p in package_dir.iterdir() if p.name.endswith(".yaml"))
        raise FileNotFoundError(f"no preset '{name}'; shipped presets: {', '.join(available)}")
    return Path(str(candidate))


def resolve_scenario(ref: str) -> ScenarioConfig:
    """Load a scenario from a filesystem path or a shipped preset name."""
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    return load_scenario(preset_path(ref))
