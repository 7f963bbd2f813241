"""Scenario documents, the bundled catalog and report files."""

import json

import numpy as np
import pytest

from onticqm.cli import run_scenario
from onticqm.errors import ConfigError
from onticqm.report import Gate, RunReport, Series, TaskResult, write_report
from onticqm.scenario import (
    TASK_KINDS,
    bundled_scenarios,
    list_scenarios,
    load_scenario,
    parse_scenario,
    resolve_scenario,
)
from onticqm.states import build_grid
from onticqm.tasks import expected_value


BUNDLED_NAMES = [
    "gaussian-uncertainty",
    "box-ground-state",
    "plane-wave",
    "theorem2-sweep",
    "free-packet-spreading",
    "classical-limit",
    "born-rule",
    "angular-momentum-measurement",
    "correlation-split",
    "mu-invariance",
]


def _minimal(**overrides):
    raw = {
        "name": "tiny",
        "grid": {"lower": -5.0, "upper": 5.0, "points": 64},
        "state": {"family": "gaussian"},
        "tasks": [{"kind": "uncertainty", "name": "bound"}],
    }
    raw.update(overrides)
    return raw


class TestParse:
    def test_defaults(self):
        scenario = parse_scenario(_minimal())
        assert scenario.hbar == 1.0
        assert scenario.seed == 0
        assert scenario.samples == 100_000
        assert scenario.xi_law == "two_point"
        assert scenario.formats == ("json", "csv")
        assert scenario.runtime_budget is None
        assert scenario.tasks[0].kind == "uncertainty"

    def test_task_params_are_kept(self):
        scenario = parse_scenario(_minimal(tasks=[{"kind": "evolve", "dt": 0.01, "T": 1.0}]))
        task = scenario.tasks[0]
        assert task.name == "evolve-1"
        assert task.params == {"dt": 0.01, "T": 1.0}

    @pytest.mark.parametrize(
        "overrides",
        [
            {"name": ""},
            {"hbar": 0.0},
            {"hbar": "1"},
            {"seed": -1},
            {"samples": 1},
            {"xi": {"law": "uniform"}},
            {"grid": {"lower": 0.0, "upper": 1.0}},
            {"grid": {"lower": 0.0, "upper": 1.0, "points": 2}},
            {"state": {"sigma": 1.0}},
            {"observables": "kinetic"},
            {"tasks": []},
            {"tasks": [{"kind": "teleport"}]},
            {"tasks": [{"kind": "born", "name": "x"}, {"kind": "born", "name": "x"}]},
            {"output": {"formats": ["xml"]}},
            {"runtime_budget": -5},
        ],
    )
    def test_invalid_documents(self, overrides):
        with pytest.raises(ConfigError):
            parse_scenario(_minimal(**overrides))

    def test_not_an_object(self):
        with pytest.raises(ConfigError):
            parse_scenario([1, 2, 3])

    def test_echo_applies_overrides(self):
        scenario = parse_scenario(_minimal(seed=3, samples=50))
        echoed = scenario.echo(9, 1000)
        assert echoed["seed"] == 9 and echoed["samples"] == 1000
        assert scenario.raw["seed"] == 3

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(_minimal()), encoding="utf-8")
        assert load_scenario(path).name == "tiny"
        assert resolve_scenario(str(path)).name == "tiny"

    def test_broken_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_scenario(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "absent.json")


class TestCatalog:
    def test_bundled_scenarios_parse(self):
        catalog = bundled_scenarios()
        assert len(catalog) == 10
        for scenario in catalog.values():
            assert scenario.description
            assert all(task.kind in TASK_KINDS for task in scenario.tasks)
            grids = [scenario.grid] + [t.params["grid"] for t in scenario.tasks if "grid" in t.params]
            for raw in filter(None, grids):
                build_grid(raw)

    def test_catalog_names(self):
        assert sorted(bundled_scenarios()) == sorted(BUNDLED_NAMES)

    def test_filter(self):
        names = [name for name, _ in list_scenarios("measure")]
        assert sorted(names) == ["angular-momentum-measurement", "born-rule"]

    def test_resolve_by_name(self):
        assert resolve_scenario("plane-wave").state["family"] == "plane_wave"
        with pytest.raises(ConfigError):
            resolve_scenario("no-such-scenario")


class TestExpectedValues:
    def test_expressions_use_hbar(self):
        assert expected_value("hbar/2", 0.5) == pytest.approx(0.25)
        assert expected_value("pi**2 * hbar**2", 1.0) == pytest.approx(np.pi**2)
        assert expected_value(3, 2.0) == 3.0

    def test_garbage(self):
        with pytest.raises(ConfigError):
            expected_value("hbar +* 2", 1.0)


class TestReport:
    def test_gate_status(self):
        assert Gate("close", 1.0 + 1e-9, 1.0, 1e-6).passed
        assert not Gate("far", 1.1, 1.0, 1e-6).passed
        assert Gate("flag", np.bool_(True)).passed
        with pytest.raises(ValueError):
            Gate("open", 1.0).passed

    def test_task_status(self):
        assert TaskResult("a", "born").status == "done"
        passed = TaskResult("b", "born", gates=[Gate("ok", True)])
        failed = TaskResult("c", "born", gates=[Gate("ok", True), Gate("bad", False)])
        assert passed.status == "passed"
        assert failed.status == "failed"
        report = RunReport({"name": "x"}, seed=1, samples=10, results=[passed, failed])
        assert not report.passed

    def test_series_shape_checked(self):
        with pytest.raises(ValueError):
            Series(("a", "b"), np.zeros((3, 3)))

    def test_write_report(self, tmp_path):
        result = TaskResult(
            "walk",
            "evolve",
            values={"energy": np.float64(0.5), "trace": np.array([1.0, np.inf]), "z": 1 + 2j},
            gates=[Gate("energy", 0.5, 0.5, 1e-9)],
            series={"evolution": Series.from_columns(time=[0.0, 0.1], norm=[1.0, 1.0])},
        )
        report = RunReport({"name": "walk", "grid": {"points": 8}}, seed=4, samples=2, results=[result])
        path = write_report(tmp_path, report)
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["passed"] is True
        assert data["provenance"]["seed"] == 4
        assert data["provenance"]["grid"] == {"points": 8}
        task = data["tasks"][0]
        assert task["status"] == "passed"
        assert task["values"]["trace"] == [1.0, "inf"]
        assert task["values"]["z"] == {"re": 1.0, "im": 2.0}
        csv = (tmp_path / "walk__evolution.csv").read_text(encoding="utf-8").splitlines()
        assert csv[0] == "time,norm"
        assert len(csv) == 3

    def test_json_only(self, tmp_path):
        result = TaskResult("t", "born", series={"s": Series.from_columns(x=[1.0])})
        write_report(tmp_path, RunReport({"name": "t"}, 0, 2, [result]), formats=("json",))
        assert (tmp_path / "report.json").exists()
        assert not (tmp_path / "t__s.csv").exists()


@pytest.mark.slow
@pytest.mark.parametrize("name", BUNDLED_NAMES)
def test_bundled_scenario_passes(name):
    report = run_scenario(resolve_scenario(name))
    failed = {r.name: [g.name for g in r.gates if not g.passed] for r in report.results if r.status == "failed"}
    assert report.passed, failed
