"""Builders for the two-lab PV validation scenarios.

Mirrors the coupled-lab experiment shape this kernel exists for: a feeder
solver plus loads in one lab, a PV inverter in the other, irradiance going
out and (P, Q) coming back. Profiles are generated from smooth daily
curves, so the scenarios are deterministic without any fixture files.
"""

from __future__ import annotations

import math

from .bus import ChannelModel
from .scenario import (
    ComponentDecl,
    LabDecl,
    LinkDecl,
    PortDecl,
    RunConfig,
    ScenarioModel,
)

DAY_US = 86_400_000_000
STEP_60S = 60_000_000


def _out(name: str, quantity: str, unit: str) -> PortDecl:
    return PortDecl(name=name, direction="Out", quantity=quantity, unit=unit)


def _in(name: str, quantity: str, unit: str) -> PortDecl:
    return PortDecl(name=name, direction="In", quantity=quantity, unit=unit)


def _load_points(base_w: float, amp_w: float, phase: float, duration_us: int, scale: float = 1.0):
    points = []
    t = 0
    while t < duration_us:
        frac = (t / DAY_US) * 2.0 * math.pi
        p = max(0.0, base_w + amp_w * math.sin(frac + phase))
        q = 0.2 * p
        points.append([t, round(p * scale, 4), round(q * scale, 4)])
        t += STEP_60S
    return points


def _irradiance_points(duration_us: int):
    sunrise, sunset = DAY_US * 6 // 24, DAY_US * 18 // 24
    points = []
    t = 0
    while t < duration_us:
        if sunrise <= t <= sunset:
            g = 1000.0 * math.sin(math.pi * (t - sunrise) / (sunset - sunrise))
        else:
            g = 0.0
        points.append([t, round(g, 3), 0.0])
        t += STEP_60S
    return points


def feeder_grid(n_buses: int = 10, r_ohm: float = 0.2, x_ohm: float = 0.1) -> dict:
    # 400 V slack: with 0.2 ohm segments a 230 V feeder of this length
    # cannot carry the scenario loads (the power flow has no solution).
    buses = [f"b{i}" for i in range(n_buses)]
    lines = [[buses[i - 1], buses[i], r_ohm, x_ohm] for i in range(1, n_buses)]
    return {
        "buses": buses,
        "lines": lines,
        "v_slack": 400.0,
        "base_kv": 0.4,
        "base_kva": 100.0,
    }


def reference_scenario(
    duration_us: int = DAY_US,
    seed: int = 7,
    experiment_id: str = "sv-reference",
    master_endpoint: str = "127.0.0.1:7841",
    member_endpoint: str = "127.0.0.1:7842",
    rt_factor=None,
) -> ScenarioModel:
    """Full two-lab scenario: feeder + 3 loads + irradiance in sesa, PV in smartest.

    Cross-lab traffic: irradiance out to the PV, its (P, Q) back into the
    feeder, and the PV bus voltage out again for volt-var support. One load
    publishes in kW/kvar to exercise unit-scaling adapters.
    """
    loads = [
        ("load1", "b2", 1400.0, 600.0, 0.0, 1.0, "W", "var"),
        ("load2", "b5", 1800.0, 700.0, 2.1, 0.001, "kW", "kvar"),
        ("load3", "b8", 1100.0, 500.0, 4.2, 1.0, "W", "var"),
    ]
    components = [
        ComponentDecl(
            id="irr",
            lab="sesa",
            kind="DiscreteEvent",
            model="profile_player",
            params={
                "points": _irradiance_points(duration_us),
                "mode": "Step",
                "ports": ["g"],
            },
            ports=[_out("g", "irradiance", "W/m2")],
            sgam_layer="Function",
        )
    ]
    pf_inputs = {}
    for name, bus, *_ in loads:
        pf_inputs[f"{name}_p"] = {"bus": bus, "field": "p"}
        pf_inputs[f"{name}_q"] = {"bus": bus, "field": "q"}
    pf_inputs["pv_p"] = {"bus": "b9", "field": "p"}
    pf_inputs["pv_q"] = {"bus": "b9", "field": "q"}

    for name, _bus, base, amp, phase, scale, p_unit, q_unit in loads:
        components.append(
            ComponentDecl(
                id=name,
                lab="sesa",
                kind="DiscreteEvent",
                model="profile_player",
                params={
                    "points": _load_points(base, amp, phase, duration_us, scale),
                    "mode": "Step",
                    "ports": ["p", "q"],
                },
                ports=[
                    _out("p", "active-power", p_unit),
                    _out("q", "reactive-power", q_unit),
                ],
            )
        )
    pf_ports = [
        _in(port, "active-power" if port.endswith("_p") else "reactive-power",
            "W" if port.endswith("_p") else "var")
        for port in sorted(pf_inputs)
    ]
    pf_ports.append(_out("v_pv", "voltage-magnitude", "pu"))
    components.append(
        ComponentDecl(
            id="pf",
            lab="sesa",
            kind="DiscreteEvent",
            model="powerflow",
            params={
                "grid": feeder_grid(),
                "interval_us": STEP_60S,
                "inputs": pf_inputs,
                "outputs": {"v_pv": {"bus": "b9"}},
            },
            ports=pf_ports,
        )
    )
    components.append(
        ComponentDecl(
            id="pv",
            lab="smartest",
            kind="Continuous",
            step_us=1_000_000,
            model="pv_inverter",
            params={
                "p_peak": 5000.0,
                "p_rated": 4600.0,
                "voltvar": [[0.95, 2000.0], [1.0, 0.0], [1.05, -2000.0]],
                "irradiance_port": "irradiance",
                "voltage_port": "v_pu",
                "ports": ["p", "q"],
            },
            ports=[
                _in("irradiance", "irradiance", "W/m2"),
                _in("v_pu", "voltage-magnitude", "pu"),
                _out("p", "active-power", "W"),
                _out("q", "reactive-power", "var"),
            ],
        )
    )

    links = []
    for name, *_ in loads:
        links.append(LinkDecl(from_=(name, "p"), to=("pf", f"{name}_p"), channel=ChannelModel()))
        links.append(LinkDecl(from_=(name, "q"), to=("pf", f"{name}_q"), channel=ChannelModel()))
    links.append(LinkDecl(from_=("irr", "g"), to=("pv", "irradiance"), channel=ChannelModel()))
    links.append(LinkDecl(from_=("pv", "p"), to=("pf", "pv_p"), channel=ChannelModel()))
    links.append(LinkDecl(from_=("pv", "q"), to=("pf", "pv_q"), channel=ChannelModel()))
    links.append(LinkDecl(from_=("pf", "v_pv"), to=("pv", "v_pu"), channel=ChannelModel()))

    return ScenarioModel(
        id="sv-reference",
        labs=[
            LabDecl(id="sesa", endpoint=master_endpoint, description="feeder simulation lab"),
            LabDecl(id="smartest", endpoint=member_endpoint, description="inverter lab"),
        ],
        components=components,
        links=links,
        run=RunConfig(
            duration_us=duration_us,
            experiment_id=experiment_id,
            seed=seed,
            rt_factor=rt_factor,
        ),
    )


def minimal_two_lab_scenario(
    duration_us: int = 600_000_000, experiment_id: str = "sv-minimal"
) -> ScenarioModel:
    """Smallest two-lab shape: one cross-lab link carrying irradiance."""
    grid = feeder_grid(3)
    components = [
        ComponentDecl(
            id="load1",
            lab="sesa",
            kind="DiscreteEvent",
            model="profile_player",
            params={
                "points": [[0, 1000.0, 200.0], [300_000_000, 1500.0, 300.0]],
                "mode": "Step",
                "ports": ["p", "q"],
            },
            ports=[
                _out("p", "active-power", "W"),
                _out("q", "reactive-power", "var"),
            ],
        ),
        ComponentDecl(
            id="pf",
            lab="sesa",
            kind="DiscreteEvent",
            model="powerflow",
            params={
                "grid": grid,
                "interval_us": STEP_60S,
                "inputs": {
                    "load1_p": {"bus": "b1", "field": "p"},
                    "load1_q": {"bus": "b1", "field": "q"},
                },
                "outputs": {"v_end": {"bus": "b2"}},
            },
            ports=[
                _in("load1_p", "active-power", "W"),
                _in("load1_q", "reactive-power", "var"),
                _out("v_end", "voltage-magnitude", "pu"),
            ],
        ),
        ComponentDecl(
            id="irr",
            lab="sesa",
            kind="DiscreteEvent",
            model="profile_player",
            params={
                "points": [[0, 0.0, 0.0], [300_000_000, 800.0, 0.0]],
                "mode": "Step",
                "ports": ["g"],
            },
            ports=[_out("g", "irradiance", "W/m2")],
            sgam_layer="Function",
        ),
        ComponentDecl(
            id="pv",
            lab="smartest",
            kind="Continuous",
            step_us=1_000_000,
            model="pv_inverter",
            params={"p_peak": 5000.0, "p_rated": 4600.0, "ports": ["p", "q"]},
            ports=[
                _in("irradiance", "irradiance", "W/m2"),
                _out("p", "active-power", "W"),
                _out("q", "reactive-power", "var"),
            ],
        ),
    ]
    links = [
        LinkDecl(from_=("load1", "p"), to=("pf", "load1_p"), channel=ChannelModel()),
        LinkDecl(from_=("load1", "q"), to=("pf", "load1_q"), channel=ChannelModel()),
        LinkDecl(from_=("irr", "g"), to=("pv", "irradiance"), channel=ChannelModel()),
    ]
    return ScenarioModel(
        id="sv-minimal",
        labs=[
            LabDecl(id="sesa", endpoint="127.0.0.1:7841"),
            LabDecl(id="smartest", endpoint="127.0.0.1:7842"),
        ],
        components=components,
        links=links,
        run=RunConfig(duration_us=duration_us, experiment_id=experiment_id, seed=0),
    )
