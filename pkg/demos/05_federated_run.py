#!/usr/bin/env python3
"""Run the two labs as two real processes and verify trace equivalence.

Starts a master coordinator for lab "sesa" and a member coordinator for
lab "smartest" on localhost, lets the conservative time management drive
the run, then checks the merged trace against a single-process run of the
same scenario. One simulated hour keeps the wall time short.
"""

import json
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from gridweave import Kernel, compile_plans, serialize_scenario
from gridweave.components import DEFAULT_REGISTRY
from gridweave.reference import reference_scenario

sock = socket.socket()
sock.bind(("127.0.0.1", 0))
port = sock.getsockname()[1]
sock.close()

model = reference_scenario(
    duration_us=3_600_000_000, seed=7, master_endpoint=f"127.0.0.1:{port}"
)
workdir = Path(tempfile.mkdtemp(prefix="gridweave-demo-"))
scenario_path = workdir / "scenario.json"
scenario_path.write_text(serialize_scenario(model))
print(f"scenario written to {scenario_path} (master on port {port})")


def coordinator(lab):
    return subprocess.Popen(
        [
            sys.executable, "-m", "gridweave.cli", "run", str(scenario_path),
            "--lab", lab, "--out", str(workdir / f"{lab}.jsonl"),
        ],
        stdout=subprocess.PIPE,
        text=True,
    )


t0 = time.monotonic()
master = coordinator("sesa")
time.sleep(0.3)
member = coordinator("smartest")
reports = [json.loads(p.communicate()[0].strip().splitlines()[-1]) for p in (master, member)]
print(f"federated run took {time.monotonic() - t0:.1f}s wall")
for report in reports:
    print("  ", report)

print("\nsingle-process run of the same scenario for comparison...")
plans, _ = compile_plans(model)
kernel = Kernel(model, list(plans.values()), DEFAULT_REGISTRY, model.run)
kernel.start()
single = kernel.run_to_completion()


def normalized(text):
    def key(line):
        rec = json.loads(line)
        return (
            rec["t_us"],
            rec["route_id"] if rec["route_id"] is not None else -1,
            rec["seq"] if rec["seq"] is not None else -1,
            rec["component"],
        )

    return sorted((l for l in text.splitlines() if l.strip()), key=key)


merged = normalized(
    (workdir / "sesa.jsonl").read_text() + (workdir / "smartest.jsonl").read_text()
)
reference = normalized(single.to_jsonl())
print("merged federated trace == single-process trace:", merged == reference)
print(f"({len(reference)} records either way)")
