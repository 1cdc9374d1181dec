"""Simulation message bus: envelope wire form, channel emulation, adapters.

All channel impairments act in simulated time and are driven by a
splitmix64 stream per route, so identical seeds give identical delivery
schedules on any host.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class AdaptFailure(Exception):
    """Adapter applied to a value whose unit does not match the spec."""


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new state, raw 64-bit output)."""
    state = (state + _GAMMA) & _MASK64
    return state, _mix64(state)


def channel_rng_seed(channel_seed: int, route_id: int) -> int:
    """Initial rng_state for a route: one splitmix64 output of seed XOR route."""
    _, out = splitmix64_next((channel_seed ^ route_id) & _MASK64)
    return out


@dataclass
class ChannelModel:
    latency_us: int = 0
    jitter_us: int = 0
    loss_prob: float = 0.0
    bandwidth_Bps: int = 0  # 0 = unlimited
    reorder_allowed: bool = False
    seed: int = 0

    def min_delay_positive(self) -> bool:
        # Serialization adds at least 1 us per message whenever bandwidth is
        # finite, so a bandwidth-limited link also breaks zero-delay cycles.
        return (self.latency_us - self.jitter_us) > 0 or self.bandwidth_Bps > 0


@dataclass
class ChannelState:
    """Mutable per-route channel state, owned by the kernel of the sender."""

    rng_state: int
    bucket_free_at_us: int = 0
    last_deliver_us: int = 0

    @classmethod
    def for_route(cls, channel: ChannelModel, route_id: int) -> "ChannelState":
        return cls(rng_state=channel_rng_seed(channel.seed, route_id))


@dataclass
class Envelope:
    route_id: int
    seq: int
    t_send_us: int
    t_deliver_us: int
    quantity: str
    unit: str
    value: float
    experiment_id: str


def envelope_to_obj(env: Envelope) -> dict:
    """Envelope as a dict in canonical key order (the wire form's layout)."""
    return {
        "route_id": env.route_id,
        "seq": env.seq,
        "t_send_us": env.t_send_us,
        "t_deliver_us": env.t_deliver_us,
        "quantity": env.quantity,
        "unit": env.unit,
        "value": float(env.value),
        "experiment_id": env.experiment_id,
    }


def envelope_wire(env: Envelope) -> bytes:
    """Canonical wire form: fixed key order, no whitespace, shortest floats."""
    obj = envelope_to_obj(env)
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def envelope_from_wire(data: dict) -> Envelope:
    return Envelope(
        route_id=int(data["route_id"]),
        seq=int(data["seq"]),
        t_send_us=int(data["t_send_us"]),
        t_deliver_us=int(data["t_deliver_us"]),
        quantity=str(data["quantity"]),
        unit=str(data["unit"]),
        value=float(data["value"]),
        experiment_id=str(data["experiment_id"]),
    )


def next_f64(state: ChannelState) -> float:
    """Advance the route stream and return a uniform double in [0, 1)."""
    state.rng_state, raw = splitmix64_next(state.rng_state)
    return (raw >> 11) * 2.0**-53


def route(
    env: Envelope,
    channel: ChannelModel,
    state: ChannelState,
    payload_bytes: Optional[int] = None,
) -> Optional[int]:
    """Pass an envelope through a channel; return t_deliver_us, or None if lost.

    Draw discipline is part of the contract: the loss draw happens on every
    call, the jitter draw only when the envelope survives, so replaying the
    same envelope sequence reproduces the same stream positions exactly.
    Serialization delay is sized from the envelope's wire form; callers that
    ship a different payload may pass its size explicitly.
    """
    u1 = next_f64(state)
    if u1 < channel.loss_prob:
        return None
    u2 = next_f64(state)
    jitter = round((2.0 * u2 - 1.0) * channel.jitter_us)

    if channel.bandwidth_Bps > 0:
        if payload_bytes is None:
            payload_bytes = len(envelope_wire(env))
        serialization = math.ceil(payload_bytes * 1_000_000 / channel.bandwidth_Bps)
    else:
        serialization = 0

    start = max(env.t_send_us, state.bucket_free_at_us)
    state.bucket_free_at_us = start + serialization
    raw = state.bucket_free_at_us + channel.latency_us + jitter
    if channel.reorder_allowed:
        return raw
    t_deliver = max(raw, state.last_deliver_us)
    state.last_deliver_us = t_deliver
    return t_deliver


# Closed conversion table; direction matters, both directions are listed.
UNIT_SCALE: dict[tuple[str, str], float] = {
    ("kW", "W"): 1000.0,
    ("W", "kW"): 0.001,
    ("MW", "W"): 1e6,
    ("W", "MW"): 1e-6,
    ("kvar", "var"): 1000.0,
    ("var", "kvar"): 0.001,
}


def units_convertible(from_unit: str, to_unit: str) -> bool:
    return from_unit == to_unit or (from_unit, to_unit) in UNIT_SCALE


def adapt(value: float, unit: str, spec) -> tuple[float, str]:
    """Apply an AdapterSpec from the plan module to a (value, unit) pair.

    KeyRename leaves value and unit untouched here; the quantity rename is
    applied by the kernel when it builds the envelope.
    """
    if spec is None or spec.kind == "Identity":
        return value, unit
    if spec.kind == "UnitScale":
        if unit != spec.from_unit:
            raise AdaptFailure(
                f"UnitScale adapter expects unit {spec.from_unit!r}, got {unit!r}"
            )
        return value * spec.factor, spec.to_unit
    if spec.kind == "KeyRename":
        return value, unit
    raise AdaptFailure(f"unknown adapter kind {spec.kind!r}")
