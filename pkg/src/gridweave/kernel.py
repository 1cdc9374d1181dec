"""Coordinated execution: global clock, stepping contract, causal delivery.

The kernel core is strictly single-threaded. Components step only at times
they scheduled themselves; routed envelopes wait in per-destination queues
and are consumed, latest value per in-port winning, at the destination's
next step. Equal-time steps are ordered by (lab id, component id), which is
what makes zero-delay pipelines and federated splits reproducible.
"""

from __future__ import annotations

import json
import time as _time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Callable, Optional

from . import bus
from .bus import ChannelState, Envelope
from .plan import ExecutionPlan, Route
from .scenario import PortDecl, RunConfig, ScenarioModel

STOP_REASONS = ("completed", "component_failure", "operator_abort", "peer_disconnect")


class UnknownModel(Exception):
    """A launch names a model with no registered implementation."""


class InitFailure(Exception):
    """A component rejected its parameters during start."""


class StepFailure(Exception):
    """A component raised, or broke the stepping contract, during a step."""


class CausalityViolation(Exception):
    """Kernel self-check: a computed delivery time precedes the clock."""


class FederateContract(ABC):
    """Behavioral interface every simulated component implements.

    init returns the first step time (or None when the component never
    steps); step returns (outputs, next step time or None). The next step
    time must be strictly greater than the time just stepped, and a
    Continuous component must always return t_us + step_us.
    """

    @abstractmethod
    def init(self, t0_us: int, params: dict) -> Optional[int]: ...

    @abstractmethod
    def step(
        self, t_us: int, inputs: list[tuple[str, float]]
    ) -> tuple[list[tuple[str, float]], Optional[int]]: ...

    def stop(self, reason: str) -> None:  # noqa: B027 - optional hook
        pass


# factory(params, step_us) -> component instance
ModelFactory = Callable[[dict, Optional[int]], FederateContract]


@dataclass
class TraceRecord:
    t_us: int
    kind: str  # "step" | "deliver" | "stop"
    component: str
    port: Optional[str] = None
    value: Optional[float] = None
    route_id: Optional[int] = None
    seq: Optional[int] = None
    reason: Optional[str] = None
    # bookkeeping for invariant checks; never serialized
    t_send_us: Optional[int] = None

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "t_us": self.t_us,
                "kind": self.kind,
                "component": self.component,
                "port": self.port,
                "value": self.value,
                "route_id": self.route_id,
                "seq": self.seq,
                "reason": self.reason,
            },
            separators=(", ", ": "),
            ensure_ascii=False,
        )


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    stop_reason: Optional[str] = None
    final_t_us: int = 0
    error: Optional[str] = None

    @property
    def completed(self) -> bool:
        return self.stop_reason == "completed"

    def to_jsonl(self) -> str:
        return "".join(rec.to_json_line() + "\n" for rec in self.records)


def lbts(
    local_minima: "list[Optional[int]]",
    pending_inter_lab_min: Optional[int],
    duration_us: int,
) -> int:
    """Lower bound on time stamp: the largest safe grant for every lab.

    None stands for infinity; when everything is exhausted the grant is the
    run duration, which ends the run.
    """
    bounds = [m for m in local_minima if m is not None]
    if pending_inter_lab_min is not None:
        bounds.append(pending_inter_lab_min)
    if not bounds:
        return duration_us
    return min(bounds)


class Kernel:
    """Executes the launches and routes of one or more plans.

    Single-process runs pass every lab's plan; a federated coordinator
    passes only its own lab's plan and wires `egress_handler` to the
    transport. All state mutation happens on the caller's thread.
    """

    def __init__(
        self,
        scenario: ScenarioModel,
        plans: list[ExecutionPlan],
        registry: dict[str, ModelFactory],
        run: RunConfig,
        egress_handler: Optional[Callable[[Envelope], None]] = None,
    ):
        self.scenario = scenario
        self.run = run
        self.experiment_id = run.experiment_id
        self.registry = registry
        self.egress_handler = egress_handler

        self.t_global_us = 0
        self.next_step: dict[str, Optional[int]] = {}
        self.pending: dict[str, list] = {}  # component -> heap of queue entries
        self.trace = Trace()

        self._launches = [(p.lab, launch) for p in plans for launch in p.launches]
        self._lab_of = {launch.component: lab for lab, launch in self._launches}
        self._models: dict[str, FederateContract] = {}
        self._stopped: set[str] = set()

        self._ports: dict[tuple[str, str], PortDecl] = {}
        for comp in scenario.components:
            for port in comp.ports:
                self._ports[(comp.id, port.name)] = port

        local_comps = set(self._lab_of)
        self._outgoing: dict[str, list[Route]] = {c: [] for c in local_comps}
        self._route_by_id: dict[int, Route] = {}
        self._seq: dict[int, int] = {}
        self._chan_state: dict[int, ChannelState] = {}
        send_routes: list[Route] = []
        recv_routes: list[Route] = []
        for p in plans:
            send_routes.extend(p.local_routes)
            send_routes.extend(p.egress_routes)
            recv_routes.extend(p.local_routes)
            recv_routes.extend(p.ingress_routes)
        for route in send_routes:
            self._outgoing[route.from_[0]].append(route)
            self._seq[route.route_id] = 0
            self._chan_state[route.route_id] = ChannelState.for_route(
                route.channel, route.route_id
            )
        for routes in self._outgoing.values():
            routes.sort(key=lambda r: r.route_id)
        for route in recv_routes:
            self._route_by_id[route.route_id] = route
        self._local_dest = {r.route_id for r in recv_routes}

        if run.rt_factor is not None:
            self._pace_denominator = run.rt_factor * 1e6
        else:
            self._pace_denominator = None
        self._wall_start: Optional[float] = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        """Initialize every launched component at t0 = 0."""
        for lab, launch in sorted(self._launches, key=lambda e: (e[0], e[1].component)):
            factory = self.registry.get(launch.model)
            if factory is None:
                raise UnknownModel(
                    f"component {launch.component!r} wants model {launch.model!r}"
                )
            try:
                model = factory(launch.params, launch.step_us)
                first = model.init(0, launch.params)
            except Exception as exc:
                raise InitFailure(f"{launch.component}: {exc}") from exc
            if first is not None and first < 0:
                raise InitFailure(f"{launch.component}: negative first step {first}")
            self._models[launch.component] = model
            self.next_step[launch.component] = first
            self.pending[launch.component] = []
        self._wall_start = _time.monotonic()

    def local_min(self) -> Optional[int]:
        times = [t for t in self.next_step.values() if t is not None]
        return min(times) if times else None

    def next_component(self) -> Optional[str]:
        """Component owning the earliest step; (time, lab, id) breaks ties."""
        best = None
        best_key = None
        for comp, t in self.next_step.items():
            if t is None:
                continue
            key = (t, self._lab_of[comp], comp)
            if best_key is None or key < best_key:
                best, best_key = comp, key
        return best

    # -- stepping -----------------------------------------------------------

    def advance(self, comp: str) -> None:
        t = self.next_step[comp]
        if t is None:
            raise StepFailure(f"{comp} is Done")
        if t < self.t_global_us:
            raise CausalityViolation(
                f"step for {comp} at {t} behind clock {self.t_global_us}"
            )
        self.t_global_us = t

        inputs: dict[str, float] = {}
        queue = self.pending[comp]
        while queue and queue[0][0] <= t:
            t_deliver, route_id, seq, env = heappop(queue)
            route = self._route_by_id[route_id]
            in_port = route.to[1]
            inputs[in_port] = env.value
            self.trace.records.append(
                TraceRecord(
                    t_us=t_deliver,
                    kind="deliver",
                    component=comp,
                    port=in_port,
                    value=env.value,
                    route_id=route_id,
                    seq=seq,
                    t_send_us=env.t_send_us,
                )
            )

        model = self._models[comp]
        try:
            outputs, nxt = model.step(t, sorted(inputs.items()))
        except Exception as exc:
            raise StepFailure(f"{comp} at t={t}: {exc}") from exc
        if nxt is not None and nxt <= t:
            raise StepFailure(f"{comp} scheduled non-increasing next step {nxt} at {t}")
        self.trace.records.append(TraceRecord(t_us=t, kind="step", component=comp))
        self.trace.final_t_us = t

        out_values = {port: float(value) for port, value in outputs}
        for route in self._outgoing[comp]:
            port = route.from_[1]
            if port not in out_values:
                continue
            self._send(route, port, out_values[port], t)
        self.next_step[comp] = nxt

    def _send(self, route: Route, port: str, value: float, t_send: int) -> None:
        decl = self._ports[(route.from_[0], port)]
        quantity, unit = decl.quantity, decl.unit
        if route.adapter is not None:
            value, unit = bus.adapt(value, unit, route.adapter)
            if route.adapter.kind == "KeyRename":
                quantity = route.adapter.rename.get(quantity, quantity)
        seq = self._seq[route.route_id]
        self._seq[route.route_id] = seq + 1
        env = Envelope(
            route_id=route.route_id,
            seq=seq,
            t_send_us=t_send,
            t_deliver_us=t_send,
            quantity=quantity,
            unit=unit,
            value=value,
            experiment_id=self.experiment_id,
        )
        t_deliver = bus.route(env, route.channel, self._chan_state[route.route_id])
        if t_deliver is None:
            return
        if t_deliver < self.t_global_us:
            raise CausalityViolation(
                f"route {route.route_id} computed t_deliver {t_deliver} "
                f"behind clock {self.t_global_us}"
            )
        env.t_deliver_us = t_deliver
        if route.route_id in self._local_dest:
            heappush(self.pending[route.to[0]], (t_deliver, route.route_id, seq, env))
        elif self.egress_handler is not None:
            self.egress_handler(env)

    def enqueue_remote(self, env: Envelope) -> None:
        """Queue an envelope received from another lab via federation."""
        route = self._route_by_id.get(env.route_id)
        if route is None:
            return
        heappush(self.pending[route.to[0]], (env.t_deliver_us, env.route_id, env.seq, env))

    def _pace(self, t_target: int) -> None:
        if self._pace_denominator is None or self._wall_start is None:
            return
        wall_target = t_target / self._pace_denominator
        delay = wall_target - (_time.monotonic() - self._wall_start)
        if delay > 0:
            _time.sleep(delay)

    def advance_until(self, grant_us: int) -> None:
        """Step every component whose next step lies within the grant."""
        while True:
            comp = self.next_component()
            if comp is None:
                return
            t = self.next_step[comp]
            if t > grant_us:
                return
            self._pace(t)
            self.advance(comp)

    def stop_all(self, reason: str) -> None:
        """Deliver stop to every component exactly once and record it."""
        t_stop = self.run.duration_us if reason == "completed" else self.t_global_us
        for lab, launch in sorted(self._launches, key=lambda e: (e[0], e[1].component)):
            comp = launch.component
            if comp in self._stopped:
                continue
            self._stopped.add(comp)
            model = self._models.get(comp)
            if model is not None:
                try:
                    model.stop(reason)
                except Exception:
                    pass  # stopping must reach every component regardless
            self.trace.records.append(
                TraceRecord(t_us=t_stop, kind="stop", component=comp, reason=reason)
            )
        self.trace.stop_reason = reason

    def run_to_completion(self) -> Trace:
        """Single-process loop: advance events until duration or all Done."""
        try:
            while True:
                comp = self.next_component()
                if comp is None:
                    break
                t = self.next_step[comp]
                if t > self.run.duration_us:
                    break
                self._pace(t)
                self.advance(comp)
            self.stop_all("completed")
        except StepFailure as exc:
            self.trace.error = str(exc)
            self.stop_all("component_failure")
        return self.trace
