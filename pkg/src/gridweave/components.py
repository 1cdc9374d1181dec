"""Reference simulation models: radial feeder power flow, PV inverter, loads.

The power flow is a backward-forward sweep over a tree: branch currents are
accumulated from the leaves toward the slack bus, then voltages propagate
back out. That is exact for the radial low-voltage feeders modeled here and
easy to cross-check against the two-bus closed form.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .kernel import FederateContract

V_TOLERANCE = 1e-8  # volts, per-iteration change
MAX_SWEEPS = 100


class BadGrid(Exception):
    """Grid description violates the radial-tree invariants."""


class Diverged(Exception):
    """Sweep hit the iteration cap without meeting the voltage tolerance."""


@dataclass
class GridModel:
    buses: list[str]  # bus 0 is the slack
    lines: list[tuple[str, str, float, float]]  # (from, to, R ohm, X ohm)
    v_slack: float  # phase-neutral magnitude, volts
    base_kv: float
    base_kva: float


@dataclass
class Injection:
    bus: str
    p_w: float  # positive = consumption
    q_var: float


@dataclass
class PvParams:
    p_peak: float  # watts at 1000 W/m2
    p_rated: float  # inverter limit, watts
    voltvar: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class LoadProfile:
    points: list[tuple[int, float, float]]  # (t_us, P, Q), strictly increasing t
    mode: str = "Step"  # "Step" | "Hold"


def _tree_order(grid: GridModel):
    """BFS the line graph from the slack; returns (order, parent, z) indices."""
    n = len(grid.buses)
    index = {bus: i for i, bus in enumerate(grid.buses)}
    if len(index) != n:
        raise BadGrid("duplicate bus ids")
    if len(grid.lines) != n - 1:
        raise BadGrid(f"{len(grid.lines)} lines cannot span {n} buses as a tree")

    adj: dict[int, list[tuple[int, complex]]] = {i: [] for i in range(n)}
    for a, b, r, x in grid.lines:
        if a not in index or b not in index:
            raise BadGrid(f"line {a!r}-{b!r} references unknown bus")
        if r < 0 or x < 0 or (r == 0 and x == 0):
            raise BadGrid(f"line {a!r}-{b!r} needs R >= 0, X >= 0, not both zero")
        z = complex(r, x)
        adj[index[a]].append((index[b], z))
        adj[index[b]].append((index[a], z))

    order = [0]
    parent = np.full(n, -1, dtype=int)
    z_up = np.zeros(n, dtype=complex)
    seen = {0}
    head = 0
    while head < len(order):
        node = order[head]
        head += 1
        for nxt, z in adj[node]:
            if nxt in seen:
                continue
            seen.add(nxt)
            parent[nxt] = node
            z_up[nxt] = z
            order.append(nxt)
    if len(order) != n:
        raise BadGrid("lines do not connect every bus to the slack")
    return index, order, parent, z_up


def bfs_powerflow_detailed(
    grid: GridModel, injections: list[Injection]
) -> tuple[dict[str, tuple[float, float]], int]:
    """Run the sweep; returns ({bus: (volts, pu)}, iterations used)."""
    index, order, parent, z_up = _tree_order(grid)
    n = len(grid.buses)

    s = np.zeros(n, dtype=complex)
    for inj in injections:
        if inj.bus not in index:
            raise BadGrid(f"injection at unknown bus {inj.bus!r}")
        if index[inj.bus] == 0:
            raise BadGrid("injections at the slack bus are not allowed")
        s[index[inj.bus]] += complex(inj.p_w, inj.q_var)

    v = np.full(n, complex(grid.v_slack, 0.0))
    reverse = order[:0:-1]  # leaves toward root, slack excluded
    forward = order[1:]
    for iteration in range(1, MAX_SWEEPS + 1):
        with np.errstate(all="ignore"):
            i_branch = np.conj(s / v)
        if not np.all(np.isfinite(i_branch)):
            raise Diverged(f"voltage collapsed after {iteration} sweeps")
        for node in reverse:
            i_branch[parent[node]] += i_branch[node]
        v_new = v.copy()
        for node in forward:
            v_new[node] = v_new[parent[node]] - z_up[node] * i_branch[node]
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if not np.all(np.isfinite(v)):
            raise Diverged(f"voltage collapsed after {iteration} sweeps")
        if delta < V_TOLERANCE:
            base_v = grid.base_kv * 1000.0
            mags = np.abs(v)
            return (
                {bus: (float(mags[i]), float(mags[i] / base_v)) for bus, i in index.items()},
                iteration,
            )
    raise Diverged(f"no convergence within {MAX_SWEEPS} sweeps")


def bfs_powerflow(grid: GridModel, injections: list[Injection]) -> dict[str, tuple[float, float]]:
    voltages, _ = bfs_powerflow_detailed(grid, injections)
    return voltages


def pv_power(g: float, params: PvParams) -> float:
    """DC-side production for irradiance g, clipped at the inverter rating."""
    if g < 0:
        raise ValueError("irradiance must be >= 0")
    return min(params.p_peak * g / 1000.0, params.p_rated)


def volt_var(v_pu: float, curve: list[tuple[float, float]]) -> float:
    """Piecewise-linear volt-var lookup, clamped beyond the curve ends."""
    if not curve:
        return 0.0
    xs = [p[0] for p in curve]
    qs = [p[1] for p in curve]
    return float(np.interp(v_pu, xs, qs))


def profile_step(
    profile: LoadProfile, t_us: int
) -> tuple[float, float, Optional[int]]:
    """Profile value at t plus the next event time (None when exhausted)."""
    times = [p[0] for p in profile.points]
    idx = bisect_right(times, t_us) - 1
    if idx < 0:
        nxt = times[0] if times else None
        return 0.0, 0.0, nxt
    _, p, q = profile.points[idx]
    nxt = times[idx + 1] if idx + 1 < len(times) else None
    return p, q, nxt


# ---------------------------------------------------------------------------
# Fixture loading


def grid_from_dict(obj: dict) -> GridModel:
    return GridModel(
        buses=list(obj["buses"]),
        lines=[(a, b, float(r), float(x)) for a, b, r, x in obj["lines"]],
        v_slack=float(obj["v_slack"]),
        base_kv=float(obj["base_kv"]),
        base_kva=float(obj["base_kva"]),
    )


def load_grid(source) -> GridModel:
    if isinstance(source, dict):
        return grid_from_dict(source)
    return grid_from_dict(json.loads(Path(source).read_text()))


def profile_from_dict(obj: dict) -> LoadProfile:
    return LoadProfile(
        points=[(int(t), float(p), float(q)) for t, p, q in obj["points"]],
        mode=obj.get("mode", "Step"),
    )


def load_profile(source) -> LoadProfile:
    """Profile from a dict, a JSON file, or a CSV file with t_us,P,Q header."""
    if isinstance(source, dict):
        return profile_from_dict(source)
    path = Path(source)
    if path.suffix.lower() == ".csv":
        points = []
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["t_us", "P", "Q"]:
                raise ValueError(f"{path}: expected header t_us,P,Q")
            for row in reader:
                points.append((int(row["t_us"]), float(row["P"]), float(row["Q"])))
        return LoadProfile(points=points)
    return profile_from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# Federate implementations


class ProfilePlayer(FederateContract):
    """Plays a (t, P, Q) profile onto one or two output ports.

    params: points | file, mode, ports (first port carries P, optional
    second carries Q).
    """

    def __init__(self, params: dict, step_us: Optional[int] = None):
        if "file" in params:
            self.profile = load_profile(params["file"])
        else:
            self.profile = profile_from_dict(params)
        self.ports = list(params.get("ports", ["p", "q"]))

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        if not self.profile.points:
            return None
        return self.profile.points[0][0]

    def step(self, t_us, inputs):
        p, q, nxt = profile_step(self.profile, t_us)
        outputs = [(self.ports[0], p)]
        if len(self.ports) > 1:
            outputs.append((self.ports[1], q))
        return outputs, nxt


class PvInverter(FederateContract):
    """Continuous PV model: held irradiance and voltage in, (P, Q) out.

    Published P and Q follow the consumption-positive sign convention, so
    generation comes out negative. The volt-var curve value is the reactive
    power the inverter supplies, hence the sign flip on publication.
    """

    def __init__(self, params: dict, step_us: Optional[int] = None):
        if step_us is None:
            raise ValueError("pv_inverter is Continuous and needs step_us")
        self.step_us = step_us
        self.params = PvParams(
            p_peak=float(params["p_peak"]),
            p_rated=float(params["p_rated"]),
            voltvar=[(float(v), float(q)) for v, q in params.get("voltvar", [])],
        )
        self.g_port = params.get("irradiance_port", "irradiance")
        self.v_port = params.get("voltage_port", "v_pu")
        self.out_ports = list(params.get("ports", ["p", "q"]))
        self.g = 0.0
        self.v = 1.0

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        return t0_us + self.step_us

    def step(self, t_us, inputs):
        for port, value in inputs:
            if port == self.g_port:
                self.g = value
            elif port == self.v_port:
                self.v = value
        p = -pv_power(self.g, self.params)
        q = -volt_var(self.v, self.params.voltvar)
        return [(self.out_ports[0], p), (self.out_ports[1], q)], t_us + self.step_us


class PowerFlowModel(FederateContract):
    """Discrete-event feeder solver; resolves held injections every interval.

    params: grid (dict or file path), interval_us, inputs {port: {bus,
    field}}, outputs {port: {bus}} reporting voltage in pu.
    """

    def __init__(self, params: dict, step_us: Optional[int] = None):
        self.grid = load_grid(params["grid"])
        self.interval_us = int(params["interval_us"])
        if self.interval_us < 1:
            raise ValueError("interval_us must be >= 1")
        self.input_map = {
            port: (str(spec["bus"]), str(spec["field"]))
            for port, spec in params.get("inputs", {}).items()
        }
        self.output_map = {
            port: str(spec["bus"]) for port, spec in params.get("outputs", {}).items()
        }
        self.held: dict[str, float] = {port: 0.0 for port in self.input_map}

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        return t0_us

    def step(self, t_us, inputs):
        for port, value in inputs:
            if port in self.held:
                self.held[port] = value
        per_bus: dict[str, list[float]] = {}
        for port, (bus, which) in self.input_map.items():
            pq = per_bus.setdefault(bus, [0.0, 0.0])
            pq[0 if which == "p" else 1] += self.held[port]
        injections = [Injection(bus, pq[0], pq[1]) for bus, pq in sorted(per_bus.items())]
        voltages = bfs_powerflow(self.grid, injections)
        outputs = [
            (port, voltages[bus][1]) for port, bus in sorted(self.output_map.items())
        ]
        return outputs, t_us + self.interval_us


class ConstSource(FederateContract):
    """Emits fixed values on its ports at a fixed interval."""

    def __init__(self, params: dict, step_us: Optional[int] = None):
        self.values = {port: float(v) for port, v in params["values"].items()}
        self.interval_us = int(params["interval_us"])
        self.start_us = int(params.get("start_us", 0))

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        return t0_us + self.start_us

    def step(self, t_us, inputs):
        return sorted(self.values.items()), t_us + self.interval_us


class Gain(FederateContract):
    """Re-emits factor x (last seen input) at a fixed interval."""

    def __init__(self, params: dict, step_us: Optional[int] = None):
        self.factor = float(params.get("factor", 1.0))
        self.in_port = params.get("in_port", "in")
        self.out_port = params.get("out_port", "out")
        self.interval_us = int(params["interval_us"])
        self.held = float(params.get("initial", 0.0))

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        return t0_us + self.interval_us

    def step(self, t_us, inputs):
        for port, value in inputs:
            if port == self.in_port:
                self.held = value
        return [(self.out_port, self.factor * self.held)], t_us + self.interval_us


class Sink(FederateContract):
    """Consumes inputs; steps at an interval if given, otherwise never."""

    def __init__(self, params: dict, step_us: Optional[int] = None):
        self.interval_us = params.get("interval_us")
        self.seen: list[tuple[int, str, float]] = []

    def init(self, t0_us: int, params: dict) -> Optional[int]:
        if self.interval_us is None:
            return None
        return t0_us + int(self.interval_us)

    def step(self, t_us, inputs):
        for port, value in inputs:
            self.seen.append((t_us, port, value))
        return [], t_us + int(self.interval_us)


DEFAULT_REGISTRY = {
    "profile_player": ProfilePlayer,
    "pv_inverter": PvInverter,
    "powerflow": PowerFlowModel,
    "const_source": ConstSource,
    "gain": Gain,
    "sink": Sink,
}
