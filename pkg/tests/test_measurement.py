"""Von Neumann measurement: branch translation, Born probabilities, outcome sampling."""

import math

import numpy as np
import pytest

from onticqm.epistemic import EpistemicState
from onticqm.errors import DomainError, OverlapError, SeparationWarning, SpanError
from onticqm.measurement import (
    MeasurementSetup,
    angular_harmonics,
    angular_momentum_scenario,
    born_probabilities,
    box_modes,
    classical_counterfactual_hj,
    counterfactual_initial_state,
    decompose,
    evolve_measurement,
    evolve_measurement_direct,
    gaussian_pointer,
    harmonic_modes,
    lz_residual,
    marginal,
    pointer_grid,
    sample_outcome,
    sample_outcomes,
    shift_packet,
)
from onticqm.fields import ComplexField, Grid
from onticqm.states import box_state

PROBABILITIES = np.array([0.2, 0.3, 0.5])


def _superposition(modes, weights):
    values = sum(math.sqrt(w) * np.asarray(f.values) for w, f in zip(weights, modes.fields))
    return ComplexField(modes.fields[0].grid, values)


@pytest.fixture
def box_setup():
    modes = box_modes(Grid.line(0.0, 1.0, 256), 3)
    sigma = 0.05
    pointer = gaussian_pointer(pointer_grid([0.0, 1.0, 2.0], sigma), sigma)
    return modes, MeasurementSetup.from_eigensystem(modes, pointer, 1.0, 1.0)


class TestEigensystems:
    def test_box_modes_are_orthonormal(self, box_setup):
        _, setup = box_setup
        np.testing.assert_allclose(setup.gram, np.eye(3), atol=1e-12)
        np.testing.assert_array_equal(setup.eigenvalues, [0.0, 1.0, 2.0])
        np.testing.assert_allclose(setup.shifts, [0.0, 1.0, 2.0])

    def test_harmonic_modes_are_orthonormal(self):
        modes = harmonic_modes(Grid.line(-10.0, 10.0, 512), 4, eigenvalues=[0.5, 1.5, 2.5, 3.5])
        basis = np.stack([f.values for f in modes.fields])
        gram = basis.conj() @ basis.T * (20.0 / 512)
        np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)

    def test_eigenvalue_count_must_match(self):
        with pytest.raises(ValueError):
            box_modes(Grid.line(0.0, 1.0, 64), 3, eigenvalues=[1.0, 2.0])

    def test_box_modes_need_walls(self):
        with pytest.raises(ValueError):
            box_modes(Grid.line(0.0, 1.0, 64, boundary="periodic"), 2)

    def test_non_orthogonal_fields_rejected(self):
        grid = Grid.line(0.0, 1.0, 64)
        modes = box_modes(grid, 2)
        tilted = ComplexField(grid, modes.fields[0].values + modes.fields[1].values).normalized()
        pointer = gaussian_pointer(pointer_grid([0.0, 1.0], 0.05), 0.05)
        with pytest.raises(ValueError):
            MeasurementSetup([0.0, 1.0], (modes.fields[0], tilted), pointer, 1.0, 1.0)

    def test_angular_harmonics_are_lz_eigenfunctions(self):
        grid = Grid.cube(-7.0, 7.0, 64, 2)
        modes = angular_harmonics(grid, [0, 1, 2])
        np.testing.assert_allclose(modes.eigenvalues, [0.0, 1.0, 2.0])
        for m, f in zip([0, 1, 2], modes.fields):
            assert lz_residual(f, m) < 1e-5


class TestBranches:
    def test_decompose_recovers_coefficients(self, box_setup):
        modes, setup = box_setup
        coefficients = decompose(_superposition(modes, PROBABILITIES), setup)
        np.testing.assert_allclose(np.abs(coefficients) ** 2, PROBABILITIES, atol=1e-12)

    def test_missing_mode_is_a_span_error(self, box_setup):
        _, setup = box_setup
        with pytest.raises(SpanError):
            decompose(box_state(setup.system_grid, 4), setup)

    def test_shift_moves_the_centre(self):
        grid = Grid.line(-4.0, 6.0, 400)
        packet = gaussian_pointer(grid, 0.3)
        moved = shift_packet(packet, 1.7)
        x = grid.axis_coordinates(0)
        centre = float(np.sum(x * np.abs(moved.values) ** 2) / np.sum(np.abs(moved.values) ** 2))
        assert centre == pytest.approx(1.7, abs=1e-8)
        assert moved.norm() == pytest.approx(1.0, abs=1e-10)

    def test_shift_off_the_grid(self):
        grid = Grid.line(-2.0, 2.0, 128)
        with pytest.raises(DomainError):
            shift_packet(gaussian_pointer(grid, 0.2), 3.0)

    def test_branch_translation_matches_direct_integration(self):
        modes = box_modes(Grid.line(0.0, 1.0, 64), 3)
        sigma = 0.08
        pointer = gaussian_pointer(pointer_grid([0.0, 1.0, 2.0], sigma), sigma)
        setup = MeasurementSetup.from_eigensystem(modes, pointer, 1.0, 1.0)
        psi_S = _superposition(modes, PROBABILITIES)
        exact = evolve_measurement(psi_S, setup).to_field()
        direct = evolve_measurement_direct(psi_S, setup)
        assert direct.grid == exact.grid
        scale = float(np.max(np.abs(exact.values)))
        assert float(np.max(np.abs(direct.values - exact.values))) < 1e-3 * scale

    def test_zero_coupling_leaves_pointer_alone(self, box_setup):
        modes, setup = box_setup
        frozen = MeasurementSetup.from_eigensystem(modes, setup.pointer, 0.0, 1.0)
        direct = evolve_measurement_direct(_superposition(modes, PROBABILITIES), frozen)
        marginal_ = np.sum(np.abs(direct.values) ** 2, axis=0) * frozen.system_grid.cell_volume
        np.testing.assert_allclose(marginal_, np.abs(setup.pointer.values) ** 2, atol=1e-12)


class TestBornRule:
    def test_probabilities_are_squared_coefficients(self, box_setup):
        modes, setup = box_setup
        joint = evolve_measurement(_superposition(modes, PROBABILITIES), setup)
        assert joint.separated
        born = born_probabilities(joint)
        np.testing.assert_allclose(born.probabilities, PROBABILITIES, atol=1e-6)
        assert born.total == pytest.approx(1.0, abs=1e-6)
        assert born.cross_term < 1e-6
        assert born.to_dict()["eigenvalues"] == [0.0, 1.0, 2.0]

    def test_pointer_marginal_is_normalized(self, box_setup):
        modes, setup = box_setup
        joint = evolve_measurement(_superposition(modes, PROBABILITIES), setup)
        marginal_ = joint.pointer_marginal()
        total = float(np.sum(marginal_.values)) * setup.pointer_grid.cell_volume
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_overlapping_packets(self):
        modes = box_modes(Grid.line(0.0, 1.0, 128), 3)
        sigma = 0.5
        pointer = gaussian_pointer(pointer_grid([0.0, 1.0, 2.0], sigma), sigma)
        setup = MeasurementSetup.from_eigensystem(modes, pointer, 1.0, 1.0)
        with pytest.warns(SeparationWarning):
            joint = evolve_measurement(_superposition(modes, PROBABILITIES), setup)
        assert not joint.separated
        with pytest.raises(OverlapError):
            born_probabilities(joint)
        with pytest.raises(OverlapError):
            sample_outcomes(joint, 10, seed=0)

    def test_sampled_frequencies(self, box_setup):
        modes, setup = box_setup
        joint = evolve_measurement(_superposition(modes, PROBABILITIES), setup)
        n = 100_000
        outcomes = sample_outcomes(joint, n, seed=21, chunk_size=8192)
        again = sample_outcomes(joint, n, seed=21, chunk_size=8192, workers=3)
        np.testing.assert_array_equal(outcomes, again)
        frequencies = np.bincount(outcomes, minlength=3) / n
        tolerance = 4.0 * np.sqrt(PROBABILITIES * (1.0 - PROBABILITIES) / n)
        assert np.all(np.abs(frequencies - PROBABILITIES) <= tolerance)

    def test_single_outcome_collapses(self, box_setup):
        modes, setup = box_setup
        joint = evolve_measurement(_superposition(modes, PROBABILITIES), setup)
        outcome = sample_outcome(joint, seed=5)
        k = int(outcome.eigenvalue)
        assert outcome.probability == pytest.approx(PROBABILITIES[k], abs=1e-6)
        overlap = abs(modes.fields[k].inner(outcome.state))
        assert overlap == pytest.approx(1.0, abs=1e-10)


class TestAngularMomentum:
    def test_three_packets(self):
        joint, report = angular_momentum_scenario([0, 1, 2], [1.0, 1.0, 1.0], coupling=1.0, duration=1.0)
        assert report.separated
        assert report.discrete
        assert report.schmidt_rank == 3
        np.testing.assert_allclose(report.probabilities, [1 / 3, 1 / 3, 1 / 3], atol=1e-6)
        np.testing.assert_allclose(report.shifts, [0.0, 1.0, 2.0])
        assert report.lz_expectation == pytest.approx(1.0, abs=1e-2)
        assert report.interaction_quantum_term > 0.0
        assert report.to_dict()["schmidt_rank"] == 3
        assert joint.separated

    def test_weights_must_match(self):
        with pytest.raises(ValueError):
            angular_momentum_scenario([0, 1], [1.0], coupling=1.0, duration=1.0)
        with pytest.raises(ValueError):
            angular_momentum_scenario([1, 1], [1.0, 1.0], coupling=1.0, duration=1.0)


class TestCounterfactual:
    @pytest.fixture
    def joint_grid(self):
        system = Grid.cube(-5.0, 5.0, 24, 2)
        pointer = Grid.line(-6.0, 7.0, 32)
        return Grid.product(system, pointer)

    def _state(self, grid, k):
        x, y, z = grid.mesh()
        rho = np.exp(-((x - 1.0) ** 2 + y**2) / 2.0 - z**2 / (2.0 * 0.25))
        return EpistemicState.from_arrays(grid, rho, k * y, kind="classical")

    def test_initial_state_is_a_product(self):
        system = Grid.cube(-5.0, 5.0, 16, 2)
        psi_S = ComplexField.from_function(system, lambda x, y: np.exp(-(x**2 + y**2) / 4.0)).normalized()
        pointer = gaussian_pointer(Grid.line(-4.0, 4.0, 32), 0.5)
        state = counterfactual_initial_state(psi_S, pointer)
        assert state.grid.dims == 3
        assert state.kind == "quantum"
        assert float(np.sum(state.density.values)) * state.grid.cell_volume == pytest.approx(1.0, abs=1e-12)

    def test_zero_coupling_freezes_pointer(self, joint_grid):
        _, trajectories = classical_counterfactual_hj(self._state(joint_grid, 1.0), 0.0, 1.0)
        np.testing.assert_allclose(trajectories.q, trajectories.q0, atol=1e-12)

    def test_pointer_smears_instead_of_splitting(self, joint_grid):
        state0 = self._state(joint_grid, 1.0)
        state_T, trajectories = classical_counterfactual_hj(state0, 0.5, 1.0)
        shift = trajectories.q[:, 2] - trajectories.q0[:, 2]
        # d_theta S = x k, so each system point moves the pointer by g T k x
        np.testing.assert_allclose(shift, 0.5 * trajectories.q0[:, 0], atol=1e-8)
        mean_shift = float(np.sum(trajectories.weights * shift))
        assert mean_shift == pytest.approx(0.5, abs=1e-2)

        before = marginal(state0, 2)
        after = marginal(state_T, 2)
        z = before.grid.axis_coordinates(0)
        dz = before.grid.cell_volume
        assert float(np.sum(after.values)) * dz == pytest.approx(1.0, abs=1e-10)
        variance_before = float(np.sum(z**2 * before.values) * dz)
        mean_after = float(np.sum(z * after.values) * dz)
        variance_after = float(np.sum((z - mean_after) ** 2 * after.values) * dz)
        assert variance_after > 1.5 * variance_before

    def test_needs_three_axes(self):
        grid = Grid.cube(-2.0, 2.0, 8, 2)
        state = EpistemicState.from_arrays(grid, np.ones(grid.shape), kind="classical")
        with pytest.raises(ValueError):
            classical_counterfactual_hj(state, 1.0, 1.0)
