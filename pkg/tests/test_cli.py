"""CLI contract: exit codes, plan output, run reports, results export."""

import json
from pathlib import Path

import pytest

from gridweave.cli import main, parse_time_us
from gridweave.reference import minimal_two_lab_scenario, reference_scenario
from gridweave.scenario import serialize_scenario


@pytest.fixture
def minimal_file(tmp_path):
    path = tmp_path / "minimal.json"
    path.write_text(serialize_scenario(minimal_two_lab_scenario()))
    return str(path)


def write_scenario(tmp_path, model, name="scenario.json"):
    path = tmp_path / name
    path.write_text(serialize_scenario(model))
    return str(path)


class TestParseTime:
    def test_suffixes(self):
        assert parse_time_us("60s") == 60_000_000
        assert parse_time_us("5ms") == 5_000
        assert parse_time_us("2m") == 120_000_000
        assert parse_time_us("1h") == 3_600_000_000
        assert parse_time_us("42us") == 42
        assert parse_time_us("1234") == 1234


class TestValidate:
    def test_valid_file_is_silent(self, minimal_file, capsys):
        assert main(["validate", minimal_file]) == 0
        assert capsys.readouterr().out == ""

    def test_duplicate_id_exit_one(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        model.components.append(model.components[0])
        path = write_scenario(tmp_path, model)
        assert main(["validate", path]) == 1
        out = capsys.readouterr().out
        assert out.startswith("DuplicateId ")

    def test_non_json_exit_two(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("this is not json")
        assert main(["validate", str(path)]) == 2

    def test_missing_file_exit_two(self, capsys):
        assert main(["validate", "/does/not/exist.json"]) == 2


class TestPlan:
    def test_single_lab_plan(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        model.labs = [lab for lab in model.labs if lab.id == "sesa"]
        model.components = [c for c in model.components if c.lab == "sesa"]
        model.links = model.links[:2]
        path = write_scenario(tmp_path, model)
        assert main(["plan", path]) == 0
        plans = json.loads(capsys.readouterr().out)
        assert len(plans) == 1
        assert plans[0]["master"] is True

    def test_two_lab_plan_route_pair(self, minimal_file, capsys):
        assert main(["plan", minimal_file]) == 0
        plans = json.loads(capsys.readouterr().out)
        assert len(plans) == 2
        by_lab = {p["lab"]: p for p in plans}
        assert len(by_lab["sesa"]["egress_routes"]) == 1
        assert len(by_lab["smartest"]["ingress_routes"]) == 1
        assert (
            by_lab["sesa"]["egress_routes"][0]["route_id"]
            == by_lab["smartest"]["ingress_routes"][0]["route_id"]
        )

    def test_unbridgeable_units_exit_one(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        model.components[0].ports[0].unit = "pu"
        path = write_scenario(tmp_path, model)
        code = main(["plan", path])
        err = capsys.readouterr().err
        assert code == 1
        assert "NoAdapter" in err


class TestRun:
    def test_run_twice_byte_identical(self, tmp_path, capsys):
        model = reference_scenario(duration_us=600_000_000)  # 10 min slice
        path = write_scenario(tmp_path, model)
        out1, out2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        assert main(["run", path, "--single-process", "--seed", "7", "--out", out1]) == 0
        assert main(["run", path, "--single-process", "--seed", "7", "--out", out2]) == 0
        assert Path(out1).read_bytes() == Path(out2).read_bytes()
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["completed"] is True
        assert report["reason"] == "completed"

    def test_empty_scenario_zero_records(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        model.components = []
        model.links = []
        path = write_scenario(tmp_path, model)
        out = str(tmp_path / "empty.jsonl")
        assert main(["run", path, "--single-process", "--out", out]) == 0
        assert Path(out).read_text() == ""

    def test_unknown_lab_exit_two(self, minimal_file, tmp_path, capsys):
        assert (
            main(["run", minimal_file, "--lab", "nosuchlab", "--out", str(tmp_path / "t.jsonl")])
            == 2
        )

    def test_unknown_model_exit_two(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        model.components[0].model = "not-a-model"
        path = write_scenario(tmp_path, model)
        assert main(["run", path, "--single-process", "--out", str(tmp_path / "t.jsonl")]) == 2

    def test_peer_down_exit_one_reason_peer_disconnect(self, tmp_path, capsys):
        # member dials a dead master: bounded retries, then a clean abort
        model = minimal_two_lab_scenario()
        model.labs[0].endpoint = "127.0.0.1:1"  # nothing listens there
        path = write_scenario(tmp_path, model)
        out = str(tmp_path / "t.jsonl")
        assert main(["run", path, "--lab", "smartest", "--out", out]) == 1
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["completed"] is False
        assert report["reason"] == "peer_disconnect"

    def test_component_failure_exit_one(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        # 10 MW load on the little feeder: the power flow diverges mid-run
        model.components[0].params["points"] = [[0, 10e6, 0.0]]
        path = write_scenario(tmp_path, model)
        out = str(tmp_path / "t.jsonl")
        assert main(["run", path, "--single-process", "--out", out]) == 1
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["reason"] == "component_failure"
        stops = [
            json.loads(line)
            for line in Path(out).read_text().splitlines()
            if json.loads(line)["kind"] == "stop"
        ]
        assert stops and all(r["reason"] == "component_failure" for r in stops)


class TestResults:
    @pytest.fixture
    def trace_file(self, tmp_path, capsys):
        model = minimal_two_lab_scenario()
        path = write_scenario(tmp_path, model)
        out = str(tmp_path / "trace.jsonl")
        assert main(["run", path, "--single-process", "--out", out]) == 0
        capsys.readouterr()
        return out

    def test_port_filter(self, trace_file, capsys):
        assert main(["results", trace_file, "--port", "irradiance"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "t_us,component,port,value"
        assert len(lines) > 1
        assert all(line.split(",")[2] == "irradiance" for line in lines[1:])

    def test_row_count_matches_delivery_records(self, trace_file, capsys):
        assert main(["results", trace_file]) == 0
        rows = capsys.readouterr().out.strip().splitlines()[1:]
        delivers = [
            line
            for line in Path(trace_file).read_text().splitlines()
            if json.loads(line)["kind"] == "deliver"
        ]
        assert len(rows) == len(delivers)

    def test_empty_trace_header_only(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["results", str(empty)]) == 0
        assert capsys.readouterr().out == "t_us,component,port,value\n"

    def test_time_range_inclusive(self, tmp_path, capsys):
        # the PV publishes every second, so this trace has deliveries at
        # both range boundaries and inclusivity is actually exercised
        model = reference_scenario(duration_us=180_000_000)
        path = write_scenario(tmp_path, model)
        out = str(tmp_path / "ref-trace.jsonl")
        assert main(["run", path, "--single-process", "--out", out]) == 0
        capsys.readouterr()
        assert main(["results", out, "--from", "60s", "--to", "120s"]) == 0
        rows = capsys.readouterr().out.strip().splitlines()[1:]
        times = [int(r.split(",")[0]) for r in rows]
        assert times
        assert all(60_000_000 <= t <= 120_000_000 for t in times)
        assert 60_000_000 in times and 120_000_000 in times

    def test_corrupt_trace_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"t_us": 1, "kind": "deliver"}\nnot json\n')
        assert main(["results", str(bad)]) == 2
