#!/usr/bin/env python3
"""From one scenario to per-lab execution plans.

Compilation pins every link to a route id, splits cross-lab links into
egress/ingress pairs, elects the master lab, and inserts unit adapters
where the two ends of a link disagree.
"""

from gridweave import assign_master, compile_plans, select_adapter
from gridweave.plan import NoAdapter
from gridweave.reference import reference_scenario

model = reference_scenario(duration_us=3_600_000_000)  # one hour slice
plans, topology = compile_plans(model)

print(f"master lab: {topology.master} (smallest lab id in byte order)")
print(f"experiment: {topology.experiment_id}\n")

for lab in sorted(plans):
    plan = plans[lab]
    print(f"[{lab}] master={plan.master}")
    print(f"  launches: {[l.component for l in plan.launches]}")
    for group, routes in (
        ("local", plan.local_routes),
        ("egress", plan.egress_routes),
        ("ingress", plan.ingress_routes),
    ):
        for r in routes:
            adapter = f" via {r.adapter.kind}x{r.adapter.factor}" if r.adapter else ""
            print(
                f"  {group:7s} #{r.route_id} {r.from_[0]}.{r.from_[1]}"
                f" -> {r.to[0]}.{r.to[1]}{adapter}"
            )
    print()

print("adapter selection on its own:")
print("  kW -> W   :", select_adapter("smb-json", "kW", "smb-json", "W"))
try:
    select_adapter("smb-json", "W", "csv-frame", "pu")
except NoAdapter as exc:
    print("  W -> pu   : NoAdapter:", exc)

print("\nbyte-order master election: labs {'B', 'a'} ->", end=" ")
model.labs[0].id, model.labs[1].id = "B", "a"
for comp in model.components:
    comp.lab = "B" if comp.lab == "sesa" else "a"
print(assign_master(model))
