"""Shared fixtures and helpers for the gridweave test suite."""

from __future__ import annotations

import queue
import socket
import threading

import pytest

from gridweave.components import DEFAULT_REGISTRY
from gridweave.federation import (
    DISCONNECT,
    PROTO_VERSION,
    MasterCoordinator,
    MemberCoordinator,
    SessionHost,
    _TaggedSink,
    handshake,
)
from gridweave.kernel import Kernel, Trace, TraceRecord


def run_single_process(model, plans) -> Trace:
    kernel = Kernel(model, list(plans.values()), DEFAULT_REGISTRY, model.run)
    kernel.start()
    return kernel.run_to_completion()


def trace_sort_key(rec: TraceRecord):
    return (
        rec.t_us,
        rec.route_id if rec.route_id is not None else -1,
        rec.seq if rec.seq is not None else -1,
        rec.component,
    )


def normalized_lines(records) -> list[str]:
    return [rec.to_json_line() for rec in sorted(records, key=trace_sort_key)]


def normalize_jsonl_text(text: str) -> str:
    """Normalize a trace file's line order by (t_us, route_id, seq, component)."""
    import json

    lines = [line for line in text.splitlines() if line.strip()]

    def key(line: str):
        rec = json.loads(line)
        return (
            rec["t_us"],
            rec["route_id"] if rec["route_id"] is not None else -1,
            rec["seq"] if rec["seq"] is not None else -1,
            rec["component"],
        )

    return "".join(line + "\n" for line in sorted(lines, key=key))


def check_trace_invariants(trace: Trace) -> None:
    """Causality and monotonicity; raises AssertionError with context."""
    clock = 0
    last_deliver: dict[str, int] = {}
    for rec in trace.records:
        if rec.kind == "deliver":
            assert rec.t_send_us is not None
            assert rec.t_us >= rec.t_send_us, f"delivery before send: {rec}"
            prev = last_deliver.get(rec.component, 0)
            assert rec.t_us >= prev, f"receiver saw time go backwards: {rec}"
            last_deliver[rec.component] = rec.t_us
        else:
            assert rec.t_us >= clock, f"clock went backwards: {rec}"
            clock = rec.t_us


class FederationHarness:
    """Two lab coordinators over an in-process socketpair.

    One harness per experiment; several harnesses may share the same
    session pair to exercise multiplexing.
    """

    def __init__(self, model, plans, master_lab, member_lab, sessions=None):
        self.model = model
        self.plans = plans
        self.master_lab = master_lab
        self.member_lab = member_lab
        self.experiment_id = model.run.experiment_id
        if sessions is None:
            s1, s2 = socket.socketpair()
            self.master_session = SessionHost(s1)
            self.member_session = SessionHost(s2)
            self._own_sessions = True
        else:
            self.master_session, self.member_session = sessions
            self._own_sessions = False
        self.shared: queue.SimpleQueue = queue.SimpleQueue()
        self.master_session.register(
            self.experiment_id, sink=_TaggedSink(self.master_session, self.shared)
        )
        if self._own_sessions:
            self.master_session.start()
            self.member_session.start()
        self.traces: dict[str, Trace] = {}

    def _member_main(self):
        inbox = handshake(self.member_session, self.member_lab, self.experiment_id)
        kernel = Kernel(
            self.model, [self.plans[self.member_lab]], DEFAULT_REGISTRY, self.model.run
        )
        coordinator = MemberCoordinator(
            self.member_lab, kernel, self.member_session, inbox
        )
        self.traces["member"] = coordinator.run()

    def _master_main(self):
        # manual master-side handshake (what accept_members does per session)
        session, frame = self.shared.get(timeout=10)
        assert frame is not DISCONNECT and frame.type == "HELLO"
        session.peer_lab = frame.body["lab_id"]
        session.states[self.experiment_id] = "Ready"
        session.send(
            "HELLO",
            self.experiment_id,
            {"lab_id": self.master_lab, "proto_version": PROTO_VERSION},
        )
        kernel = Kernel(
            self.model, [self.plans[self.master_lab]], DEFAULT_REGISTRY, self.model.run
        )
        coordinator = MasterCoordinator(
            self.master_lab,
            kernel,
            self.plans,
            {self.member_lab: self.master_session},
            self.shared,
        )
        self.traces["master"] = coordinator.run()

    def run(self, timeout=60) -> dict[str, Trace]:
        member = threading.Thread(target=self._member_main, daemon=True)
        master = threading.Thread(target=self._master_main, daemon=True)
        member.start()
        master.start()
        master.join(timeout=timeout)
        member.join(timeout=timeout)
        assert not master.is_alive() and not member.is_alive(), "federated run hung"
        if self._own_sessions:
            self.master_session.close()
            self.member_session.close()
        return self.traces

    def combined_records(self):
        return self.traces["master"].records + self.traces["member"].records


@pytest.fixture
def registry():
    return dict(DEFAULT_REGISTRY)
