"""Machine-readable experiment model: types, strict JSON parsing, validation.

The scenario document is the single source every later stage (planning,
execution, federation) is derived from, so parsing is strict: unknown keys,
missing fields and dangling references are all schema errors with a path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import bus
from .bus import ChannelModel

KINDS = ("DiscreteEvent", "Continuous")
DIRECTIONS = ("In", "Out")
SGAM_LAYERS = ("Component", "Communication", "Information", "Function", "Business")


class ScenarioSyntaxError(Exception):
    """Document is not well-formed JSON; message carries line/column."""


class SchemaError(Exception):
    """Document is JSON but violates the scenario schema at `path`."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Violation:
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} {self.path} {self.message}"


@dataclass
class PortDecl:
    name: str
    direction: str  # "In" | "Out"
    quantity: str
    unit: str


@dataclass
class ComponentDecl:
    id: str
    lab: str
    kind: str  # "DiscreteEvent" | "Continuous"
    model: str
    params: dict = field(default_factory=dict)
    ports: list[PortDecl] = field(default_factory=list)
    step_us: Optional[int] = None  # required iff kind == "Continuous"
    protocol: str = "smb-json"
    sgam_layer: str = "Component"

    def port(self, name: str) -> Optional[PortDecl]:
        for p in self.ports:
            if p.name == name:
                return p
        return None


@dataclass
class LabDecl:
    id: str
    endpoint: str  # host:port used by the federation transport
    description: str = ""


@dataclass
class LinkDecl:
    from_: tuple[str, str]  # (component id, out-port)
    to: tuple[str, str]  # (component id, in-port)
    channel: ChannelModel = field(default_factory=ChannelModel)


@dataclass
class RunConfig:
    duration_us: int
    experiment_id: str
    seed: int = 0
    rt_factor: Optional[float] = None  # None = as fast as possible


@dataclass
class ScenarioModel:
    id: str
    labs: list[LabDecl]
    components: list[ComponentDecl]
    links: list[LinkDecl]
    run: RunConfig

    def lab_ids(self) -> list[str]:
        return [lab.id for lab in self.labs]

    def component(self, comp_id: str) -> Optional[ComponentDecl]:
        for c in self.components:
            if c.id == comp_id:
                return c
        return None


# ---------------------------------------------------------------------------
# Strict parsing


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing required field")
    return obj[key]


def _check_keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(path, f"expected object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}" if path else key, "unknown field")


def _str(value, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {type(value).__name__}")
    return value


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {type(value).__name__}")
    return value


def _num(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected number, got {type(value).__name__}")
    return float(value)


def _list(value, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, f"expected array, got {type(value).__name__}")
    return value


def _enum(value, choices, path: str) -> str:
    value = _str(value, path)
    if value not in choices:
        raise SchemaError(path, f"expected one of {list(choices)}, got {value!r}")
    return value


def _endpoint_ref(value, path: str) -> tuple[str, str]:
    pair = _list(value, path)
    if len(pair) != 2:
        raise SchemaError(path, "expected [component, port]")
    return _str(pair[0], f"{path}[0]"), _str(pair[1], f"{path}[1]")


def _parse_channel(obj, path: str) -> ChannelModel:
    _check_keys(
        obj,
        {"latency_us", "jitter_us", "loss_prob", "bandwidth_Bps", "reorder_allowed", "seed"},
        path,
    )
    ch = ChannelModel()
    if "latency_us" in obj:
        ch.latency_us = _int(obj["latency_us"], f"{path}.latency_us")
    if "jitter_us" in obj:
        ch.jitter_us = _int(obj["jitter_us"], f"{path}.jitter_us")
    if "loss_prob" in obj:
        ch.loss_prob = _num(obj["loss_prob"], f"{path}.loss_prob")
    if "bandwidth_Bps" in obj:
        ch.bandwidth_Bps = _int(obj["bandwidth_Bps"], f"{path}.bandwidth_Bps")
    if "reorder_allowed" in obj:
        if not isinstance(obj["reorder_allowed"], bool):
            raise SchemaError(f"{path}.reorder_allowed", "expected boolean")
        ch.reorder_allowed = obj["reorder_allowed"]
    if "seed" in obj:
        ch.seed = _int(obj["seed"], f"{path}.seed")
    return ch


def _parse_port(obj, path: str) -> PortDecl:
    _check_keys(obj, {"name", "direction", "quantity", "unit"}, path)
    return PortDecl(
        name=_str(_require(obj, "name", path), f"{path}.name"),
        direction=_enum(_require(obj, "direction", path), DIRECTIONS, f"{path}.direction"),
        quantity=_str(_require(obj, "quantity", path), f"{path}.quantity"),
        unit=_str(_require(obj, "unit", path), f"{path}.unit"),
    )


def _parse_component(obj, path: str) -> ComponentDecl:
    _check_keys(
        obj,
        {"id", "lab", "kind", "step_us", "model", "ports", "protocol", "sgam_layer"},
        path,
    )
    kind = _enum(_require(obj, "kind", path), KINDS, f"{path}.kind")
    step_us = None
    if kind == "Continuous":
        step_us = _int(_require(obj, "step_us", path), f"{path}.step_us")
    elif "step_us" in obj:
        raise SchemaError(f"{path}.step_us", "only allowed for Continuous components")

    model_obj = _require(obj, "model", path)
    _check_keys(model_obj, {"name", "params"}, f"{path}.model")
    model = _str(_require(model_obj, "name", f"{path}.model"), f"{path}.model.name")
    params = model_obj.get("params", {})
    if not isinstance(params, dict):
        raise SchemaError(f"{path}.model.params", "expected object")

    ports = [
        _parse_port(p, f"{path}.ports[{i}]")
        for i, p in enumerate(_list(_require(obj, "ports", path), f"{path}.ports"))
    ]
    decl = ComponentDecl(
        id=_str(_require(obj, "id", path), f"{path}.id"),
        lab=_str(_require(obj, "lab", path), f"{path}.lab"),
        kind=kind,
        step_us=step_us,
        model=model,
        params=params,
        ports=ports,
    )
    if "protocol" in obj:
        decl.protocol = _str(obj["protocol"], f"{path}.protocol")
    if "sgam_layer" in obj:
        decl.sgam_layer = _enum(obj["sgam_layer"], SGAM_LAYERS, f"{path}.sgam_layer")
    return decl


def parse_scenario(text: str) -> ScenarioModel:
    """Parse and schema-check a scenario document (strict mode).

    Dangling references (component -> lab, link -> port) are schema errors;
    semantic rules such as uniqueness and loop freedom are left to validate()
    so they surface as Violations rather than exceptions.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioSyntaxError(
            f"line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc

    _check_keys(doc, {"id", "labs", "components", "links", "run"}, "")

    labs = []
    for i, obj in enumerate(_list(_require(doc, "labs", ""), "labs")):
        path = f"labs[{i}]"
        _check_keys(obj, {"id", "endpoint", "description"}, path)
        labs.append(
            LabDecl(
                id=_str(_require(obj, "id", path), f"{path}.id"),
                endpoint=_str(_require(obj, "endpoint", path), f"{path}.endpoint"),
                description=_str(obj.get("description", ""), f"{path}.description"),
            )
        )

    components = [
        _parse_component(obj, f"components[{i}]")
        for i, obj in enumerate(_list(_require(doc, "components", ""), "components"))
    ]

    links = []
    for i, obj in enumerate(_list(_require(doc, "links", ""), "links")):
        path = f"links[{i}]"
        _check_keys(obj, {"from", "to", "channel"}, path)
        channel = ChannelModel()
        if "channel" in obj:
            channel = _parse_channel(obj["channel"], f"{path}.channel")
        links.append(
            LinkDecl(
                from_=_endpoint_ref(_require(obj, "from", path), f"{path}.from"),
                to=_endpoint_ref(_require(obj, "to", path), f"{path}.to"),
                channel=channel,
            )
        )

    run_obj = _require(doc, "run", "")
    _check_keys(run_obj, {"duration_us", "seed", "rt_factor", "experiment_id"}, "run")
    run = RunConfig(
        duration_us=_int(_require(run_obj, "duration_us", "run"), "run.duration_us"),
        experiment_id=_str(_require(run_obj, "experiment_id", "run"), "run.experiment_id"),
        seed=_int(run_obj.get("seed", 0), "run.seed"),
        rt_factor=(
            _num(run_obj["rt_factor"], "run.rt_factor") if "rt_factor" in run_obj else None
        ),
    )

    model = ScenarioModel(
        id=_str(_require(doc, "id", ""), "id"),
        labs=labs,
        components=components,
        links=links,
        run=run,
    )
    _check_references(model)
    return model


def _check_references(model: ScenarioModel) -> None:
    lab_ids = set(model.lab_ids())
    for i, comp in enumerate(model.components):
        if comp.lab not in lab_ids:
            raise SchemaError(f"components[{i}].lab", f"unknown lab {comp.lab!r}")
    for i, link in enumerate(model.links):
        for key, (comp_id, port) in (("from", link.from_), ("to", link.to)):
            comp = model.component(comp_id)
            if comp is None:
                raise SchemaError(f"links[{i}].{key}", f"unknown component {comp_id!r}")
            if comp.port(port) is None:
                raise SchemaError(
                    f"links[{i}].{key}", f"component {comp_id!r} has no port {port!r}"
                )


# ---------------------------------------------------------------------------
# Serialization (parse . serialize . parse is the identity)


def scenario_to_dict(model: ScenarioModel) -> dict:
    doc: dict = {
        "id": model.id,
        "labs": [
            {"id": lab.id, "endpoint": lab.endpoint, "description": lab.description}
            for lab in model.labs
        ],
        "components": [],
        "links": [],
        "run": {
            "duration_us": model.run.duration_us,
            "seed": model.run.seed,
            "experiment_id": model.run.experiment_id,
        },
    }
    if model.run.rt_factor is not None:
        doc["run"]["rt_factor"] = model.run.rt_factor
    for comp in model.components:
        obj: dict = {
            "id": comp.id,
            "lab": comp.lab,
            "kind": comp.kind,
            "model": {"name": comp.model, "params": comp.params},
            "ports": [
                {
                    "name": p.name,
                    "direction": p.direction,
                    "quantity": p.quantity,
                    "unit": p.unit,
                }
                for p in comp.ports
            ],
            "protocol": comp.protocol,
            "sgam_layer": comp.sgam_layer,
        }
        if comp.step_us is not None:
            obj["step_us"] = comp.step_us
        doc["components"].append(obj)
    for link in model.links:
        ch = link.channel
        doc["links"].append(
            {
                "from": list(link.from_),
                "to": list(link.to),
                "channel": {
                    "latency_us": ch.latency_us,
                    "jitter_us": ch.jitter_us,
                    "loss_prob": ch.loss_prob,
                    "bandwidth_Bps": ch.bandwidth_Bps,
                    "reorder_allowed": ch.reorder_allowed,
                    "seed": ch.seed,
                },
            }
        )
    return doc


def serialize_scenario(model: ScenarioModel) -> str:
    return json.dumps(scenario_to_dict(model), indent=2, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Validation


def _parse_host_port(endpoint: str) -> Optional[tuple[str, int]]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        return None
    try:
        port_num = int(port)
    except ValueError:
        return None
    if not 1 <= port_num <= 65535:
        return None
    return host, port_num


def validate(model: ScenarioModel) -> list[Violation]:
    """Check every scenario invariant; an empty list means the model is valid."""
    violations: list[Violation] = []
    out = violations.append

    seen_labs: set[str] = set()
    for i, lab in enumerate(model.labs):
        if lab.id in seen_labs:
            out(Violation("DuplicateId", f"labs[{i}]", f"lab id {lab.id!r} reused"))
        seen_labs.add(lab.id)
        if _parse_host_port(lab.endpoint) is None:
            out(
                Violation(
                    "BadEndpoint",
                    f"labs[{i}].endpoint",
                    f"{lab.endpoint!r} is not host:port with port in [1, 65535]",
                )
            )

    seen_comps: set[str] = set()
    for i, comp in enumerate(model.components):
        path = f"components[{i}]"
        if comp.id in seen_comps:
            out(Violation("DuplicateId", path, f"component id {comp.id!r} reused"))
        seen_comps.add(comp.id)
        if comp.lab not in seen_labs:
            out(Violation("UnknownLab", f"{path}.lab", f"lab {comp.lab!r} not declared"))
        if comp.kind == "Continuous":
            if comp.step_us is None or comp.step_us < 1:
                out(Violation("BadStep", f"{path}.step_us", "Continuous requires step_us >= 1"))
        elif comp.step_us is not None:
            out(Violation("BadStep", f"{path}.step_us", "step_us only valid for Continuous"))
        seen_ports: set[str] = set()
        for j, port in enumerate(comp.ports):
            ppath = f"{path}.ports[{j}]"
            if port.name in seen_ports:
                out(Violation("DuplicateId", ppath, f"port name {port.name!r} reused"))
            seen_ports.add(port.name)
            if not port.quantity or not port.unit:
                out(Violation("BadPort", ppath, "quantity and unit must be nonempty"))

    for i, link in enumerate(model.links):
        path = f"links[{i}]"
        from_comp = model.component(link.from_[0])
        to_comp = model.component(link.to[0])
        from_port = from_comp.port(link.from_[1]) if from_comp else None
        to_port = to_comp.port(link.to[1]) if to_comp else None
        if from_comp is None or from_port is None:
            out(Violation("UnknownPort", f"{path}.from", f"{link.from_} not declared"))
        if to_comp is None or to_port is None:
            out(Violation("UnknownPort", f"{path}.to", f"{link.to} not declared"))
        if from_port and to_port:
            if from_port.direction != "Out" or to_port.direction != "In":
                out(
                    Violation(
                        "DirectionMismatch",
                        path,
                        f"link must go Out->In, got {from_port.direction}->{to_port.direction}",
                    )
                )
            if from_port.quantity != to_port.quantity:
                out(
                    Violation(
                        "QuantityMismatch",
                        path,
                        f"{from_port.quantity!r} vs {to_port.quantity!r}",
                    )
                )
            if not bus.units_convertible(from_port.unit, to_port.unit):
                out(
                    Violation(
                        "UnitMismatch",
                        path,
                        f"no conversion from {from_port.unit!r} to {to_port.unit!r}",
                    )
                )
        ch = link.channel
        cpath = f"{path}.channel"
        if ch.latency_us < 0 or ch.jitter_us < 0:
            out(Violation("BadChannel", cpath, "latency_us and jitter_us must be >= 0"))
        elif ch.jitter_us > ch.latency_us:
            out(Violation("BadChannel", cpath, "jitter_us must not exceed latency_us"))
        if not 0.0 <= ch.loss_prob <= 1.0:
            out(Violation("BadChannel", cpath, "loss_prob must lie in [0, 1]"))
        if ch.bandwidth_Bps < 0:
            out(Violation("BadChannel", cpath, "bandwidth_Bps must be >= 0"))

    if model.run.duration_us < 1:
        out(Violation("BadRun", "run.duration_us", "duration must be >= 1 us"))
    if model.run.rt_factor is not None and model.run.rt_factor <= 0:
        out(Violation("BadRun", "run.rt_factor", "rt_factor must be > 0"))

    cycle = _zero_delay_cycle(model)
    if cycle is not None:
        out(
            Violation(
                "AlgebraicLoop",
                "links",
                "zero-delay cycle through " + " -> ".join(cycle),
            )
        )
    return violations


def _zero_delay_cycle(model: ScenarioModel) -> Optional[list[str]]:
    """Find a cycle that has no positive-delay link and no Continuous member.

    Equivalent to the invariant: restrict the graph to DiscreteEvent
    components and zero-minimum-delay links, then look for any cycle there.
    """
    kind = {c.id: c.kind for c in model.components}
    adj: dict[str, list[str]] = {}
    for link in model.links:
        a, b = link.from_[0], link.to[0]
        if kind.get(a) != "DiscreteEvent" or kind.get(b) != "DiscreteEvent":
            continue
        if link.channel.min_delay_positive():
            continue
        adj.setdefault(a, []).append(b)

    WHITE, GRAY, BLACK = 0, 1, 2
    color = {node: WHITE for node in adj}
    stack_path: list[str] = []

    def dfs(node: str) -> Optional[list[str]]:
        color[node] = GRAY
        stack_path.append(node)
        for nxt in adj.get(node, ()):
            if color.get(nxt, WHITE) == GRAY:
                idx = stack_path.index(nxt)
                return stack_path[idx:] + [nxt]
            if color.get(nxt, WHITE) == WHITE and nxt in color:
                found = dfs(nxt)
                if found:
                    return found
        stack_path.pop()
        color[node] = BLACK
        return None

    for node in list(adj):
        if color[node] == WHITE:
            found = dfs(node)
            if found:
                return found
    return None


def layer_view(model: ScenarioModel, layer: str) -> ScenarioModel:
    """Sub-model with only the components tagged `layer` and surviving links."""
    if layer not in SGAM_LAYERS:
        raise ValueError(f"unknown SGAM layer {layer!r}")
    keep = {c.id for c in model.components if c.sgam_layer == layer}
    return ScenarioModel(
        id=model.id,
        labs=list(model.labs),
        components=[c for c in model.components if c.id in keep],
        links=[l for l in model.links if l.from_[0] in keep and l.to[0] in keep],
        run=model.run,
    )
