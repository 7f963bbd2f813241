"""Task runners: gates built from the numerics."""

import numpy as np
import pytest

from onticqm import tasks
from onticqm.dynamics import Hamiltonian, evolve_classical_hj
from onticqm.errors import NodeError
from onticqm.scenario import TaskSpec, parse_scenario, resolve_scenario
from onticqm.states import build_grid, build_state
from onticqm.tasks import RunContext, run_madelung_check

MADELUNG = {
    "grid": {"lower": -6.0, "upper": 6.0, "points": 240},
    "state": {"family": "gaussian", "center": 0.0, "sigma": 1.0},
    "hamiltonian": {"potential": "free"},
    "dt": 0.001,
    "T": 0.2,
    "tolerance": 1e-3,
    "min_order": 1.5,
}


@pytest.fixture
def ctx():
    scenario = parse_scenario({"name": "tasks", "tasks": [{"kind": "madelung_check", **MADELUNG}]})
    return RunContext(scenario=scenario, seed=0, samples=100)


class TestMadelungCheck:
    @pytest.mark.slow
    def test_converges_at_second_order(self, ctx):
        result = run_madelung_check(ctx, TaskSpec("madelung_check", "equivalence", dict(MADELUNG)))
        assert result.status == "passed"
        assert result.values["discrepancy"] < 1e-3
        assert result.values["refined_discrepancy"] < result.values["discrepancy"]
        assert 1.5 <= result.values["observed_order"] < 3.0
        assert [g.name for g in result.gates] == ["density_discrepancy", "observed_order"]

    def test_aborted_refinement_is_a_failed_gate(self, ctx, monkeypatch):
        def discrepancy(grid, params, ctx, H, dt_scale=1.0):
            if dt_scale != 1.0:
                raise NodeError("density ratio fell below 1e-12", where="dynamics.evolve_madelung")
            return 1e-4

        monkeypatch.setattr(tasks, "_density_discrepancy", discrepancy)
        result = run_madelung_check(ctx, TaskSpec("madelung_check", "equivalence", dict(MADELUNG)))
        assert result.status == "failed"
        assert "evolve_madelung" in result.values["refinement_error"]
        assert [g.name for g in result.gates] == ["density_discrepancy", "refinement_completed"]
        assert result.gates[0].passed

    def test_slow_convergence_fails_the_order_gate(self, ctx, monkeypatch):
        monkeypatch.setattr(tasks, "_density_discrepancy", lambda grid, params, ctx, H, dt_scale=1.0: 4e-4 * dt_scale**0.25)
        result = run_madelung_check(ctx, TaskSpec("madelung_check", "equivalence", dict(MADELUNG)))
        assert result.values["observed_order"] == pytest.approx(0.5)
        assert result.status == "failed"


def test_classical_limit_state_has_no_caustic():
    scenario = resolve_scenario("classical-limit")
    grid = build_grid(scenario.grid)
    assert grid.boundary == ("vanishing",)
    state = build_state(scenario.state, grid, scenario.hbar)
    _, trajectories, _ = evolve_classical_hj(state.as_kind("classical"), Hamiltonian.build(grid), 1e-3, 0.05)
    np.testing.assert_allclose(trajectories.jacobian, 1.0, atol=1e-6)
    np.testing.assert_allclose(trajectories.p0[:, 0], 1.0, atol=1e-9)
