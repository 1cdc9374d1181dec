"""Compile a validated scenario into per-lab execution plans.

Route identity is the link declaration order, the master is the smallest
lab id in byte order, and adapters are inserted wherever the two endpoints
disagree on protocol tag or unit. Everything here is a pure transformation,
so equal models always compile to structurally equal plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import bus
from .bus import ChannelModel
from .scenario import ScenarioModel


class NoAdapter(Exception):
    """No adapter bridges the given protocol/unit pair."""


class CompileError(Exception):
    pass


@dataclass
class AdapterSpec:
    kind: str  # "Identity" | "UnitScale" | "KeyRename"
    factor: Optional[float] = None  # UnitScale
    rename: Optional[dict] = None  # KeyRename: quantity name map
    from_unit: Optional[str] = None  # UnitScale source unit
    to_unit: Optional[str] = None  # UnitScale destination unit


@dataclass
class Route:
    route_id: int
    from_: tuple[str, str]
    to: tuple[str, str]
    channel: ChannelModel
    adapter: Optional[AdapterSpec] = None


@dataclass
class Launch:
    component: str
    model: str
    params: dict
    kind: str
    step_us: Optional[int]


@dataclass
class ExecutionPlan:
    lab: str
    launches: list[Launch] = field(default_factory=list)
    local_routes: list[Route] = field(default_factory=list)
    egress_routes: list[Route] = field(default_factory=list)
    ingress_routes: list[Route] = field(default_factory=list)
    master: bool = False


@dataclass
class FederationTopology:
    master: str
    members: list[tuple[str, str]]  # (lab id, endpoint) in declaration order
    experiment_id: str

    def endpoint(self, lab: str) -> str:
        for lab_id, ep in self.members:
            if lab_id == lab:
                return ep
        raise KeyError(lab)


# KeyRename mappings are configuration: (from_tag, to_tag) -> quantity map.
_RENAME_REGISTRY: dict[tuple[str, str], dict] = {}


def register_rename(from_protocol: str, to_protocol: str, mapping: dict) -> None:
    _RENAME_REGISTRY[(from_protocol, to_protocol)] = dict(mapping)


def clear_rename_registry() -> None:
    _RENAME_REGISTRY.clear()


def select_adapter(
    from_protocol: str, from_unit: str, to_protocol: str, to_unit: str
) -> AdapterSpec:
    """Pick the adapter bridging two endpoints, or raise NoAdapter.

    Unit mismatches take precedence: they are bridgeable only through the
    closed conversion table, regardless of protocol tags.
    """
    if from_unit != to_unit:
        factor = bus.UNIT_SCALE.get((from_unit, to_unit))
        if factor is None:
            raise NoAdapter(f"no unit conversion {from_unit!r} -> {to_unit!r}")
        return AdapterSpec(
            kind="UnitScale", factor=factor, from_unit=from_unit, to_unit=to_unit
        )
    if from_protocol != to_protocol:
        mapping = _RENAME_REGISTRY.get((from_protocol, to_protocol))
        if mapping is None:
            raise NoAdapter(
                f"no rename mapping registered for {from_protocol!r} -> {to_protocol!r}"
            )
        return AdapterSpec(kind="KeyRename", rename=dict(mapping))
    return AdapterSpec(kind="Identity")


def assign_master(model: ScenarioModel) -> str:
    """Deterministic master election: smallest lab id in UTF-8 byte order."""
    if not model.labs:
        raise CompileError("scenario declares no labs")
    return min(model.lab_ids(), key=lambda lab_id: lab_id.encode("utf-8"))


def compile_plans(model: ScenarioModel) -> tuple[dict[str, ExecutionPlan], FederationTopology]:
    """Compile a valid model into one ExecutionPlan per lab plus the topology.

    Local links become one Route in the owning lab; cross-lab links appear
    twice under the same route_id, as egress at the source and ingress at
    the destination.
    """
    master = assign_master(model)
    plans = {
        lab.id: ExecutionPlan(lab=lab.id, master=(lab.id == master)) for lab in model.labs
    }

    for comp in model.components:
        plans[comp.lab].launches.append(
            Launch(
                component=comp.id,
                model=comp.model,
                params=comp.params,
                kind=comp.kind,
                step_us=comp.step_us,
            )
        )

    for route_id, link in enumerate(model.links):
        from_comp = model.component(link.from_[0])
        to_comp = model.component(link.to[0])
        from_port = from_comp.port(link.from_[1])
        to_port = to_comp.port(link.to[1])
        try:
            spec = select_adapter(
                from_comp.protocol, from_port.unit, to_comp.protocol, to_port.unit
            )
        except NoAdapter as exc:
            raise CompileError(f"links[{route_id}]: NoAdapter: {exc}") from exc
        adapter = None if spec.kind == "Identity" else spec
        route = Route(
            route_id=route_id,
            from_=link.from_,
            to=link.to,
            channel=link.channel,
            adapter=adapter,
        )
        if from_comp.lab == to_comp.lab:
            plans[from_comp.lab].local_routes.append(route)
        else:
            plans[from_comp.lab].egress_routes.append(route)
            plans[to_comp.lab].ingress_routes.append(route)

    topology = FederationTopology(
        master=master,
        members=[(lab.id, lab.endpoint) for lab in model.labs],
        experiment_id=model.run.experiment_id,
    )
    return plans, topology


# ---------------------------------------------------------------------------
# Plan JSON (cmd_plan output and PLAN federation frames)


def _channel_to_dict(ch: ChannelModel) -> dict:
    return {
        "latency_us": ch.latency_us,
        "jitter_us": ch.jitter_us,
        "loss_prob": ch.loss_prob,
        "bandwidth_Bps": ch.bandwidth_Bps,
        "reorder_allowed": ch.reorder_allowed,
        "seed": ch.seed,
    }


def _adapter_to_dict(spec: Optional[AdapterSpec]):
    if spec is None:
        return None
    obj: dict = {"kind": spec.kind}
    if spec.kind == "UnitScale":
        obj["factor"] = spec.factor
        obj["from_unit"] = spec.from_unit
        obj["to_unit"] = spec.to_unit
    elif spec.kind == "KeyRename":
        obj["rename"] = spec.rename
    return obj


def _route_to_dict(route: Route) -> dict:
    return {
        "route_id": route.route_id,
        "from": list(route.from_),
        "to": list(route.to),
        "channel": _channel_to_dict(route.channel),
        "adapter": _adapter_to_dict(route.adapter),
    }


def plan_to_dict(p: ExecutionPlan) -> dict:
    return {
        "lab": p.lab,
        "launches": [
            {
                "component": l.component,
                "model": l.model,
                "params": l.params,
                "kind": l.kind,
                "step_us": l.step_us,
            }
            for l in p.launches
        ],
        "local_routes": [_route_to_dict(r) for r in p.local_routes],
        "egress_routes": [_route_to_dict(r) for r in p.egress_routes],
        "ingress_routes": [_route_to_dict(r) for r in p.ingress_routes],
        "master": p.master,
    }


def _route_from_dict(obj: dict) -> Route:
    ch = obj["channel"]
    adapter = None
    if obj.get("adapter") is not None:
        a = obj["adapter"]
        adapter = AdapterSpec(
            kind=a["kind"],
            factor=a.get("factor"),
            rename=a.get("rename"),
            from_unit=a.get("from_unit"),
            to_unit=a.get("to_unit"),
        )
    return Route(
        route_id=int(obj["route_id"]),
        from_=(obj["from"][0], obj["from"][1]),
        to=(obj["to"][0], obj["to"][1]),
        channel=ChannelModel(
            latency_us=ch["latency_us"],
            jitter_us=ch["jitter_us"],
            loss_prob=ch["loss_prob"],
            bandwidth_Bps=ch["bandwidth_Bps"],
            reorder_allowed=ch["reorder_allowed"],
            seed=ch["seed"],
        ),
        adapter=adapter,
    )


def plan_from_dict(obj: dict) -> ExecutionPlan:
    return ExecutionPlan(
        lab=obj["lab"],
        launches=[
            Launch(
                component=l["component"],
                model=l["model"],
                params=l["params"],
                kind=l["kind"],
                step_us=l["step_us"],
            )
            for l in obj["launches"]
        ],
        local_routes=[_route_from_dict(r) for r in obj["local_routes"]],
        egress_routes=[_route_from_dict(r) for r in obj["egress_routes"]],
        ingress_routes=[_route_from_dict(r) for r in obj["ingress_routes"]],
        master=obj["master"],
    )


def plans_to_json(plans: dict[str, ExecutionPlan]) -> str:
    ordered = [plan_to_dict(plans[lab]) for lab in sorted(plans)]
    return json.dumps(ordered, indent=2, ensure_ascii=False)
