#!/usr/bin/env python3
"""Walk through the scenario model: build, serialize, validate, slice.

The experiment description is plain JSON. Everything downstream (plans,
execution, federation) is derived from it, so this demo starts where every
experiment starts: a document that either validates cleanly or tells you
exactly what is wrong.
"""

import json

from gridweave import layer_view, parse_scenario, serialize_scenario, validate
from gridweave.reference import minimal_two_lab_scenario

model = minimal_two_lab_scenario()
text = serialize_scenario(model)
print("A two-lab scenario document, first 15 lines:")
print("\n".join(text.splitlines()[:15]))
print("...")

print("\nValidation of the pristine model:", validate(model) or "clean")

# break it three different ways and watch the violation codes
broken = parse_scenario(text)
broken.components.append(broken.components[0])
print("\nDuplicate component id ->", [str(v) for v in validate(broken)])

broken = parse_scenario(text)
broken.links[0].channel.jitter_us = broken.links[0].channel.latency_us + 1
print("Jitter above latency    ->", [str(v) for v in validate(broken)])

broken = parse_scenario(text)
broken.run.duration_us = 0
print("Zero duration           ->", [str(v) for v in validate(broken)])

# architecture-layer views: filter the model by SGAM-style tags
print("\nLayer views (components kept):")
for layer in ("Component", "Function", "Business"):
    view = layer_view(model, layer)
    print(f"  {layer:14s} {[c.id for c in view.components]} links={len(view.links)}")

# round-trip stability: parse . serialize . parse is the identity
assert parse_scenario(serialize_scenario(parse_scenario(text))) == model
print("\nRound-trip parse/serialize/parse: stable")
