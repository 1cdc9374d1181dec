"""Operator entry point: validate, plan, run, results.

Exit codes are a stable contract: 0 success, 1 run or validation failure,
2 usage/config failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import socket
import sys
import time as _time
from pathlib import Path

from . import federation
from .components import DEFAULT_REGISTRY
from .federation import (
    MasterCoordinator,
    MemberCoordinator,
    PeerDisconnect,
    accept_members,
    join_master,
    parse_bind,
)
from .kernel import InitFailure, Kernel, Trace, UnknownModel
from .plan import CompileError, compile_plans, plan_to_dict, plans_to_json
from .scenario import ScenarioModel, SchemaError, ScenarioSyntaxError, parse_scenario, validate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

_TIME_SUFFIXES = {"us": 1, "ms": 1_000, "s": 1_000_000, "m": 60_000_000, "h": 3_600_000_000}


def parse_time_us(text: str) -> int:
    """Accept raw microseconds or a value with a us/ms/s/m/h suffix."""
    for suffix in ("us", "ms", "h", "m", "s"):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * _TIME_SUFFIXES[suffix])
    return int(text)


def _load_model(path: str) -> ScenarioModel:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def cmd_validate(args) -> int:
    try:
        model = _load_model(args.scenario)
    except OSError as exc:
        print(f"cannot read {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioSyntaxError, SchemaError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    violations = validate(model)
    for v in violations:
        print(v)
    return EXIT_FAILURE if violations else EXIT_OK


def _load_valid_model(path: str) -> tuple[ScenarioModel, int]:
    try:
        model = _load_model(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return None, EXIT_CONFIG
    except (ScenarioSyntaxError, SchemaError) as exc:
        print(str(exc), file=sys.stderr)
        return None, EXIT_CONFIG
    violations = validate(model)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return None, EXIT_FAILURE
    return model, EXIT_OK


def cmd_plan(args) -> int:
    # expects a valid scenario (the validate subcommand is the gate); parse
    # errors are config failures, adapter gaps surface as CompileError
    try:
        model = _load_model(args.scenario)
    except OSError as exc:
        print(f"cannot read {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioSyntaxError, SchemaError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    try:
        plans, _topology = compile_plans(model)
    except CompileError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILURE
    print(plans_to_json(plans))
    return EXIT_OK


def _write_trace(trace: Trace, out_path: str) -> None:
    Path(out_path).write_text(trace.to_jsonl(), encoding="utf-8")


def _report(trace: Trace, experiment_id: str, out_path: str, wall_s: float) -> dict:
    return {
        "experiment_id": experiment_id,
        "completed": trace.completed,
        "reason": trace.stop_reason,
        "final_t_us": trace.final_t_us,
        "trace_path": out_path,
        "wall_clock_s": round(wall_s, 3),
    }


def cmd_run(args) -> int:
    model, _status = _load_valid_model(args.scenario)
    if model is None:
        return EXIT_CONFIG  # a scenario that cannot run is a config failure
    run = model.run
    if args.seed is not None:
        run.seed = args.seed
    if args.rt_factor is not None:
        run.rt_factor = args.rt_factor

    try:
        plans, topology = compile_plans(model)
    except CompileError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILURE

    started = _time.monotonic()
    if args.single_process:
        try:
            kernel = Kernel(model, list(plans.values()), DEFAULT_REGISTRY, run)
            kernel.start()
        except (UnknownModel, InitFailure) as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_CONFIG
        trace = kernel.run_to_completion()
    else:
        lab = args.lab
        if lab not in plans:
            print(f"lab {lab!r} is not declared in the scenario", file=sys.stderr)
            return EXIT_CONFIG
        try:
            trace = _run_federated(model, plans, topology, lab)
        except (UnknownModel, InitFailure, federation.PlanMismatch) as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_CONFIG
        except PeerDisconnect as exc:
            print(str(exc), file=sys.stderr)
            trace = Trace(stop_reason="peer_disconnect")

    _write_trace(trace, args.out)
    report = _report(trace, run.experiment_id, args.out, _time.monotonic() - started)
    print(json.dumps(report))
    return EXIT_OK if trace.completed else EXIT_FAILURE


def _run_federated(model, plans, topology, lab) -> Trace:
    experiment_id = model.run.experiment_id
    if lab == topology.master:
        members = [lab_id for lab_id, _ in topology.members if lab_id != lab]
        host, port = parse_bind(topology.endpoint(lab))
        listener = socket.create_server((host, port))
        try:
            sessions, shared = accept_members(
                listener, lab, members, experiment_id, plans
            )
        finally:
            listener.close()
        kernel = Kernel(model, [plans[lab]], DEFAULT_REGISTRY, model.run)
        coordinator = MasterCoordinator(lab, kernel, plans, sessions, shared)
        trace = coordinator.run()
        for session in sessions.values():
            session.close()
        return trace

    session, inbox, remote_plan = join_master(
        lab, topology.endpoint(topology.master), experiment_id
    )
    local_plan = plan_to_dict(plans[lab])
    if remote_plan != local_plan:
        session.close()
        raise federation.PlanMismatch(
            "master's plan for this lab differs from the local compilation; "
            "are both sides running the same scenario file?"
        )
    kernel = Kernel(model, [plans[lab]], DEFAULT_REGISTRY, model.run)
    coordinator = MemberCoordinator(lab, kernel, session, inbox)
    trace = coordinator.run()
    session.close()
    return trace


def cmd_results(args) -> int:
    try:
        lines = Path(args.trace).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        print(f"cannot read {args.trace}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t_from = parse_time_us(getattr(args, "from")) if getattr(args, "from") else None
    t_to = parse_time_us(args.to) if args.to else None

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["t_us", "component", "port", "value"])
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
            t_us = rec["t_us"]
        except (json.JSONDecodeError, KeyError, TypeError):
            print(f"{args.trace}:{lineno}: corrupt trace record", file=sys.stderr)
            return EXIT_CONFIG
        if kind != "deliver":
            continue
        if args.component and rec.get("component") != args.component:
            continue
        if args.port and rec.get("port") != args.port:
            continue
        if t_from is not None and t_us < t_from:
            continue
        if t_to is not None and t_us > t_to:
            continue
        writer.writerow([t_us, rec.get("component"), rec.get("port"), rec.get("value")])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridweave",
        description="Co-simulation orchestration: validate, plan, and run scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a scenario file")
    p_validate.add_argument("scenario")
    p_validate.set_defaults(func=cmd_validate)

    p_plan = sub.add_parser("plan", help="print compiled per-lab plans as JSON")
    p_plan.add_argument("scenario")
    p_plan.set_defaults(func=cmd_plan)

    p_run = sub.add_parser("run", help="execute a scenario")
    p_run.add_argument("scenario")
    mode = p_run.add_mutually_exclusive_group(required=True)
    mode.add_argument("--single-process", action="store_true")
    mode.add_argument("--lab", help="run one lab coordinator of a federation")
    p_run.add_argument("--out", default="trace.jsonl")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--rt-factor", type=float, default=None)
    p_run.set_defaults(func=cmd_run)

    p_results = sub.add_parser("results", help="export delivery records as CSV")
    p_results.add_argument("trace")
    p_results.add_argument("--component", default=None)
    p_results.add_argument("--port", default=None)
    p_results.add_argument("--from", default=None)
    p_results.add_argument("--to", default=None)
    p_results.set_defaults(func=cmd_results)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
