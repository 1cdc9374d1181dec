"""Plan compilation: route placement, adapters, master election."""

import json
import random

import pytest

from gridweave.plan import (
    CompileError,
    NoAdapter,
    assign_master,
    clear_rename_registry,
    compile_plans,
    plan_from_dict,
    plan_to_dict,
    register_rename,
    select_adapter,
)
from gridweave.reference import minimal_two_lab_scenario, reference_scenario
from gridweave.scenario import parse_scenario, serialize_scenario, validate
from _gen import random_scenario


@pytest.fixture(autouse=True)
def _clean_registry():
    clear_rename_registry()
    yield
    clear_rename_registry()


class TestSelectAdapter:
    def test_equal_endpoints_identity(self):
        spec = select_adapter("smb-json", "W", "smb-json", "W")
        assert spec.kind == "Identity"

    def test_table_entry_kw_to_w(self):
        spec = select_adapter("smb-json", "kW", "smb-json", "W")
        assert spec.kind == "UnitScale" and spec.factor == 1000.0

    def test_reverse_direction_w_to_kw(self):
        spec = select_adapter("smb-json", "W", "smb-json", "kW")
        assert spec.kind == "UnitScale" and spec.factor == 0.001

    def test_mw_and_kvar_entries(self):
        assert select_adapter("p", "MW", "p", "W").factor == 1e6
        assert select_adapter("p", "kvar", "p", "var").factor == 1000.0

    def test_absent_pair_raises(self):
        with pytest.raises(NoAdapter):
            select_adapter("smb-json", "W", "csv-frame", "pu")

    def test_protocol_rename_requires_registration(self):
        with pytest.raises(NoAdapter):
            select_adapter("smb-json", "W", "csv-frame", "W")
        register_rename("smb-json", "csv-frame", {"active-power": "P"})
        spec = select_adapter("smb-json", "W", "csv-frame", "W")
        assert spec.kind == "KeyRename" and spec.rename == {"active-power": "P"}


class TestAssignMaster:
    def test_singleton(self):
        model = minimal_two_lab_scenario()
        model.labs = model.labs[:1]
        assert assign_master(model) == "sesa"

    def test_lexicographic(self):
        assert assign_master(minimal_two_lab_scenario()) == "sesa"

    def test_byte_order_uppercase_first(self):
        model = minimal_two_lab_scenario()
        model.labs[0].id = "a"
        model.labs[1].id = "B"
        assert assign_master(model) == "B"  # 0x42 < 0x61


class TestCompile:
    def test_single_lab_degenerate_federation(self):
        model = minimal_two_lab_scenario()
        # keep only the sesa side
        model.labs = [lab for lab in model.labs if lab.id == "sesa"]
        model.components = [c for c in model.components if c.lab == "sesa"]
        model.links = [l for l in model.links if l.from_[0] != "irr" or l.to[0] != "pv"]
        assert validate(model) == []
        plans, topology = compile_plans(model)
        assert list(plans) == ["sesa"]
        plan = plans["sesa"]
        assert plan.master is True
        assert len(plan.local_routes) == 2
        assert plan.egress_routes == [] and plan.ingress_routes == []
        assert topology.master == "sesa"

    def test_cross_lab_link_split(self):
        model = minimal_two_lab_scenario()
        plans, _ = compile_plans(model)
        sesa, smartest = plans["sesa"], plans["smartest"]
        assert len(sesa.egress_routes) == 1 and len(smartest.ingress_routes) == 1
        assert sesa.egress_routes[0].route_id == smartest.ingress_routes[0].route_id == 2
        assert smartest.egress_routes == [] and sesa.ingress_routes == []
        assert sesa.master and not smartest.master

    def test_unit_scale_adapter_inserted(self):
        model = reference_scenario(duration_us=60_000_000)
        plans, _ = compile_plans(model)
        kw_routes = [
            r
            for r in plans["sesa"].local_routes
            if r.adapter is not None and r.adapter.kind == "UnitScale"
        ]
        factors = sorted(r.adapter.factor for r in kw_routes)
        assert factors == [1000.0, 1000.0]  # kW -> W and kvar -> var

    def test_identity_routes_carry_no_adapter(self):
        plans, _ = compile_plans(minimal_two_lab_scenario())
        for plan in plans.values():
            for route in plan.local_routes + plan.egress_routes:
                assert route.adapter is None

    def test_unbridgeable_units_raise_compile_error(self):
        model = minimal_two_lab_scenario()
        model.components[0].ports[0].unit = "pu"  # load1.p now publishes pu
        with pytest.raises(CompileError) as err:
            compile_plans(model)
        assert "NoAdapter" in str(err.value)

    def test_conservation_and_pairing(self):
        for i in range(100):
            model = random_scenario(random.Random(i), i)
            plans, topology = compile_plans(model)
            launches = sum(len(p.launches) for p in plans.values())
            assert launches == len(model.components)
            local = sum(len(p.local_routes) for p in plans.values())
            egress = sum(len(p.egress_routes) for p in plans.values())
            ingress = sum(len(p.ingress_routes) for p in plans.values())
            assert local + egress == len(model.links)
            assert egress == ingress
            egress_ids = sorted(
                r.route_id for p in plans.values() for r in p.egress_routes
            )
            ingress_ids = sorted(
                r.route_id for p in plans.values() for r in p.ingress_routes
            )
            assert egress_ids == ingress_ids
            all_ids = sorted(
                r.route_id
                for p in plans.values()
                for r in p.local_routes + p.egress_routes
            )
            assert all_ids == list(range(len(model.links)))
            assert topology.master in [lab for lab, _ in topology.members]
            masters = [p.lab for p in plans.values() if p.master]
            assert masters == [topology.master]

    def test_deterministic_compilation(self):
        model_a = parse_scenario(serialize_scenario(reference_scenario(duration_us=60_000_000)))
        model_b = parse_scenario(serialize_scenario(reference_scenario(duration_us=60_000_000)))
        plans_a, topo_a = compile_plans(model_a)
        plans_b, topo_b = compile_plans(model_b)
        assert plans_a == plans_b
        assert topo_a == topo_b

    def test_plan_json_round_trip(self):
        plans, _ = compile_plans(reference_scenario(duration_us=60_000_000))
        for plan in plans.values():
            as_dict = plan_to_dict(plan)
            again = plan_from_dict(json.loads(json.dumps(as_dict)))
            assert again == plan
