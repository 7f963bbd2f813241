"""Schrodinger, Madelung and classical Hamilton-Jacobi propagation."""

import math

import numpy as np
import pytest

from onticqm.dynamics import (
    Hamiltonian,
    average_energy_series,
    classical_limit_check,
    deposit,
    deposit_density,
    energy_rate,
    evolve_classical_hj,
    evolve_madelung,
    evolve_schrodinger,
    phase_divergence,
    select_scheme,
)
from onticqm.epistemic import EpistemicState, from_wavefunction
from onticqm.errors import CausticError, CFLError, NodeError
from onticqm.expectation import position_spread
from onticqm.fields import ComplexField, Grid
from onticqm.states import coherent_state, gaussian_wave, plane_wave


def _width(psi: ComplexField) -> float:
    x = psi.grid.axis_coordinates(0)
    rho = np.abs(psi.values) ** 2
    rho = rho / rho.sum()
    mean = float(np.sum(x * rho))
    return math.sqrt(float(np.sum((x - mean) ** 2 * rho)))


class TestHamiltonian:
    def test_potential_from_callable(self):
        grid = Grid.line(-1.0, 1.0, 16)
        H = Hamiltonian.build(grid, potential=lambda x: 0.5 * x**2)
        np.testing.assert_allclose(H.potential, 0.5 * grid.axis_coordinates(0) ** 2)
        assert not H.has_gauge
        assert H.observable.metric.shape == (1, 1, 16)

    def test_non_finite_potential(self):
        grid = Grid.line(-1.0, 1.0, 16)
        with pytest.raises(ValueError):
            Hamiltonian.build(grid, potential=np.full(16, np.inf))

    def test_scheme_selection(self):
        ring = Grid.line(0.0, 1.0, 16, boundary="periodic")
        box = Grid.line(0.0, 1.0, 16)
        assert select_scheme(Hamiltonian.build(ring)) == "split_step"
        assert select_scheme(Hamiltonian.build(box)) == "crank_nicolson"
        with pytest.raises(ValueError):
            select_scheme(Hamiltonian.build(box), "split_step")
        with pytest.raises(ValueError):
            select_scheme(Hamiltonian.build(box), "leapfrog")


class TestSchrodinger:
    def test_free_packet_width(self):
        grid = Grid.line(-40.0, 40.0, 512, boundary="periodic")
        psi0 = gaussian_wave(grid, 0.0, 1.0)
        psi_T, report = evolve_schrodinger(psi0, Hamiltonian.build(grid), 0.01, 5.0)
        # sigma(t)^2 = sigma^2 + (hbar t / 2 m sigma)^2
        assert _width(psi_T) == pytest.approx(math.sqrt(1.0 + 6.25), rel=1e-4)
        assert report.steps == 500
        assert report.max_norm_drift <= 1e-10

    def test_coherent_orbit_returns(self):
        grid = Grid.line(-10.0, 10.0, 512)
        H = Hamiltonian.build(grid, potential=lambda x: 0.5 * x**2)
        psi0 = coherent_state(grid, q0=2.0)
        period = 2.0 * math.pi
        _, report = evolve_schrodinger(psi0, H, 0.005, period, scheme="crank_nicolson")
        assert report.mean_q[-1, 0] == pytest.approx(2.0, abs=1e-3)
        assert report.mean_p[-1, 0] == pytest.approx(0.0, abs=1e-3)
        half = len(report.times) // 2
        assert report.mean_q[half, 0] == pytest.approx(-2.0, abs=1e-3)
        assert report.energy_defect < 1e-8
        assert report.max_norm_drift <= 1e-10

    def test_unnormalized_start_rejected(self):
        grid = Grid.line(-5.0, 5.0, 64)
        psi = ComplexField(grid, 2.0 * gaussian_wave(grid).values)
        with pytest.raises(ValueError):
            evolve_schrodinger(psi, Hamiltonian.build(grid), 0.01, 0.1)

    def test_bad_step_rejected(self):
        grid = Grid.line(-5.0, 5.0, 64)
        with pytest.raises(ValueError):
            evolve_schrodinger(gaussian_wave(grid), Hamiltonian.build(grid), 0.0, 0.1)
        with pytest.raises(ValueError):
            evolve_schrodinger(gaussian_wave(grid), Hamiltonian.build(grid), 0.01, -1.0)

    def test_split_step_phase_limit(self):
        grid = Grid.line(-40.0, 40.0, 256, boundary="periodic")
        H = Hamiltonian.build(grid, potential=lambda x: 0.5 * x**2)
        with pytest.raises(CFLError):
            evolve_schrodinger(gaussian_wave(grid), H, 0.01, 0.1)

    def test_snapshots_follow_stride(self):
        grid = Grid.line(-10.0, 10.0, 128, boundary="periodic")
        _, report = evolve_schrodinger(gaussian_wave(grid), Hamiltonian.build(grid), 0.01, 0.1, snapshot_stride=5)
        assert [round(t, 12) for t, _ in report.snapshots] == [0.0, 0.05, 0.1]

    def test_report_csv(self, tmp_path):
        grid = Grid.line(-10.0, 10.0, 128, boundary="periodic")
        _, report = evolve_schrodinger(gaussian_wave(grid), Hamiltonian.build(grid), 0.01, 0.05)
        path = report.write_csv(tmp_path / "run.csv")
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "time,norm,energy,mean_q0,mean_p0"


class TestMadelung:
    @pytest.mark.slow
    def test_matches_schrodinger_density(self):
        grid = Grid.line(-6.0, 6.0, 240)
        psi0 = gaussian_wave(grid, 0.0, 1.0)
        H = Hamiltonian.build(grid)
        psi_T, _ = evolve_schrodinger(psi0, H, 1e-3, 0.5, order=2)
        state_T, report = evolve_madelung(from_wavefunction(psi0), H, None, 0.5, order=2)
        rho_q = np.abs(psi_T.values) ** 2
        gap = float(np.sum(np.abs(rho_q - state_T.density.values)) * grid.cell_volume)
        assert gap < 1e-3
        assert report.steps == 2000

    def test_translating_packet_keeps_energy(self):
        grid = Grid.line(-6.0, 6.0, 240)
        state0 = from_wavefunction(gaussian_wave(grid, 0.0, 1.0, 1.0))
        state_T, report = evolve_madelung(state0, Hamiltonian.build(grid), None, 0.5, quantum_potential=False)
        assert report.mean_q[-1, 0] == pytest.approx(0.5, abs=1e-6)
        assert report.energy_defect < 1e-8
        assert state_T.kind == "classical"

    def test_zero_density_raises(self):
        grid = Grid.line(-1.0, 1.0, 40)
        x = grid.axis_coordinates(0)
        rho = x**2
        rho[20] = 0.0
        state = EpistemicState.from_arrays(grid, rho)
        with pytest.raises(NodeError):
            evolve_madelung(state, Hamiltonian.build(grid), None, 0.01)

    def test_tails_below_node_floor_raise(self):
        grid = Grid.line(-10.0, 10.0, 256)
        state = from_wavefunction(gaussian_wave(grid, 0.0, 1.0))
        with pytest.raises(NodeError, match="node floor"):
            evolve_madelung(state, Hamiltonian.build(grid), None, 0.01)

    def test_ring_winding_raises(self):
        grid = Grid.line(0.0, 2.0 * np.pi, 64, boundary="periodic")
        with pytest.raises(NodeError):
            evolve_madelung(plane_wave(grid, 2.0), Hamiltonian.build(grid), None, 0.01)

    def test_large_step_raises(self):
        grid = Grid.line(-6.0, 6.0, 240)
        state0 = from_wavefunction(gaussian_wave(grid))
        with pytest.raises(CFLError):
            evolve_madelung(state0, Hamiltonian.build(grid), 0.1, 0.5)


class TestClassicalHJ:
    def test_free_translation(self):
        grid = Grid.line(-10.0, 10.0, 512)
        state0 = from_wavefunction(gaussian_wave(grid, 0.0, 1.0, 1.0)).as_kind("classical")
        state_T, trajectories, report = evolve_classical_hj(state0, Hamiltonian.build(grid), 0.01, 1.0)
        assert report.mean_q[-1, 0] == pytest.approx(1.0, abs=1e-8)
        assert report.energy_defect < 1e-10
        np.testing.assert_allclose(trajectories.q - trajectories.q0, trajectories.p0 * 1.0, atol=1e-10)
        np.testing.assert_allclose(trajectories.jacobian, 1.0, atol=1e-6)
        mean, variance = position_spread(state_T)
        assert mean == pytest.approx(1.0, abs=1e-3)
        assert variance == pytest.approx(1.0, rel=1e-2)

    def test_focusing_phase_is_a_caustic(self):
        grid = Grid.line(-6.0, 6.0, 240)
        x = grid.axis_coordinates(0)
        state0 = EpistemicState.from_arrays(grid, np.exp(-(x**2) / 2.0), -(x**2), kind="classical")
        # every characteristic reaches q = 0 at t = 1/2
        with pytest.raises(CausticError):
            evolve_classical_hj(state0, Hamiltonian.build(grid), 0.01, 1.0)

    def test_random_launch_needs_count(self):
        grid = Grid.line(-5.0, 5.0, 64)
        state0 = from_wavefunction(gaussian_wave(grid)).as_kind("classical")
        with pytest.raises(ValueError):
            evolve_classical_hj(state0, Hamiltonian.build(grid), 0.01, 0.1, launch="random")

    def test_random_launch_is_seeded(self):
        grid = Grid.line(-5.0, 5.0, 64)
        state0 = from_wavefunction(gaussian_wave(grid, 0.0, 1.0, 0.5)).as_kind("classical")
        H = Hamiltonian.build(grid)
        _, a, _ = evolve_classical_hj(state0, H, 0.01, 0.1, 500, launch="random", seed=3)
        _, b, _ = evolve_classical_hj(state0, H, 0.01, 0.1, 500, launch="random", seed=3)
        assert len(a) == 500
        np.testing.assert_array_equal(a.q, b.q)

    def test_deposit_conserves_totals(self):
        rng = np.random.default_rng(0)
        grid = Grid.cube(-1.0, 1.0, 12, 2, boundary="periodic")
        q = rng.uniform(-1.5, 1.5, size=(300, 2))
        values = rng.random(300)
        assert deposit(grid, q, values).sum() == pytest.approx(values.sum(), rel=1e-12)
        total = deposit_density(grid, q, values).sum() * grid.cell_volume
        assert total == pytest.approx(values.sum(), rel=1e-12)


class TestEnergyAndLimit:
    def test_average_energy_of_coherent_orbit(self):
        grid = Grid.line(-8.0, 8.0, 512)
        H = Hamiltonian.build(grid, potential=lambda x: 0.5 * x**2)
        _, report = evolve_schrodinger(coherent_state(grid, q0=1.5), H, 0.01, 1.0, snapshot_stride=20)
        series = average_energy_series(report, H, 1.0)
        assert series.values.shape == (len(report.snapshots),)
        assert series.values[0] == pytest.approx(0.5 + 0.5 * 1.5**2, rel=1e-5)
        assert series.defect < 1e-5
        times = [t for t, _ in report.snapshots]
        assert np.max(np.abs(energy_rate(report, times, H, 1.0))) < 1e-4

    def test_energy_rate_needs_matching_times(self):
        grid = Grid.line(-8.0, 8.0, 128)
        state = from_wavefunction(gaussian_wave(grid))
        with pytest.raises(ValueError):
            energy_rate([state, state], [0.0], Hamiltonian.build(grid))

    def test_phase_divergence_of_identical_states(self):
        grid = Grid.line(-8.0, 8.0, 128)
        state = from_wavefunction(gaussian_wave(grid, 0.0, 1.0, 1.0))
        assert phase_divergence(state, state.as_kind("classical")) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.slow
    def test_divergence_shrinks_with_hbar(self):
        grid = Grid.line(-8.0, 8.0, 400)
        state0 = from_wavefunction(gaussian_wave(grid, 0.0, 1.0, 1.0))
        result = classical_limit_check(state0, Hamiltonian.build(grid), [0.5, 0.25], 1e-3, 0.5)
        assert result.monotonic
        # the quadratic phase correction scales as hbar^2
        assert 2.5 < result.ratios[0] < 6.0
        assert result.to_dict()["hbars"] == [0.5, 0.25]
