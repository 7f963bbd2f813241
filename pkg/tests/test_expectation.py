"""Ensemble averages against quantum expectations, and the uncertainty relation."""

import math

import numpy as np
import pytest

from onticqm.epistemic import OnticSample, XiModel, draw_ensemble, from_wavefunction, to_wavefunction
from onticqm.errors import ObservableOrderError
from onticqm.expectation import (
    QuadraticObservable,
    angular_momentum_z,
    ensemble_average_closed,
    ensemble_average_mc,
    evaluate,
    evaluate_ensemble,
    from_expression,
    harmonic,
    kinetic,
    mean_and_stderr,
    momentum,
    position,
    quantum_expectation,
    uncertainty_chain,
    uncertainty_product,
    uncertainty_product_mc,
)
from onticqm.fields import ComplexField, Grid
from onticqm.states import (
    box_state,
    gaussian_wave,
    harmonic_level,
    plane_wave,
    random_observable,
    random_smooth_state,
)


@pytest.fixture
def line():
    return Grid.line(-10.0, 10.0, 1024)


@pytest.fixture
def packet(line):
    return from_wavefunction(gaussian_wave(line, 0.5, 1.0, 2.0))


class TestObservables:
    def test_metric_must_be_symmetric(self):
        grid = Grid.cube(-1.0, 1.0, 8, 2)
        with pytest.raises(ValueError):
            QuadraticObservable.build(grid, metric=[[1.0, 0.5], [0.0, 1.0]])

    def test_expression_matches_harmonic(self, line):
        parsed = from_expression(line, "p0**2/2 + q0**2/2")
        reference = harmonic(line)
        np.testing.assert_allclose(parsed.metric, reference.metric)
        np.testing.assert_allclose(parsed.potential, reference.potential)
        assert not np.any(parsed.linear)

    def test_expression_cross_terms(self):
        grid = Grid.cube(-1.0, 1.0, 8, 2)
        parsed = from_expression(grid, "p0*p1 + q1*p0")
        np.testing.assert_allclose(parsed.metric[0, 1], 1.0)
        np.testing.assert_allclose(parsed.metric[1, 0], 1.0)
        np.testing.assert_allclose(parsed.linear[0], grid.mesh()[1])

    def test_cubic_momentum_rejected(self, line):
        with pytest.raises(ObservableOrderError):
            from_expression(line, "p0**3")

    def test_unknown_symbol_rejected(self, line):
        with pytest.raises(ValueError):
            from_expression(line, "p0 * t")

    def test_single_sample_matches_vectorized(self, packet):
        ensemble = draw_ensemble(packet, XiModel(seed=4), 16)
        obs = harmonic(packet.grid, omega=1.5)
        vectorized = evaluate_ensemble(obs, ensemble)
        for k in range(4):
            sample = ensemble[k]
            assert evaluate(obs, OnticSample(q=sample.q, xi=sample.xi, p=sample.p)) == pytest.approx(
                vectorized[k], rel=1e-12
            )


class TestClosedForm:
    def test_moving_gaussian_kinetic_energy(self, packet):
        # p0^2/2 + sigma_p^2/2 with sigma_p = hbar / (2 sigma)
        assert ensemble_average_closed(kinetic(packet.grid), packet) == pytest.approx(2.125, rel=1e-8)

    def test_position_and_momentum(self, packet):
        assert ensemble_average_closed(position(packet.grid), packet) == pytest.approx(0.5, abs=1e-10)
        assert ensemble_average_closed(momentum(packet.grid), packet) == pytest.approx(2.0, rel=1e-8)

    def test_plane_wave_momentum_is_sharp(self):
        ring = Grid.line(0.0, 2.0 * np.pi, 256, boundary="periodic")
        state = plane_wave(ring, 3.0)
        assert ensemble_average_closed(momentum(ring), state) == pytest.approx(3.0, abs=1e-12)
        assert ensemble_average_closed(kinetic(ring), state) == pytest.approx(4.5, abs=1e-10)

    def test_harmonic_ground_energy(self, line):
        state = from_wavefunction(harmonic_level(line, 0))
        assert ensemble_average_closed(harmonic(line), state) == pytest.approx(0.5, rel=1e-8)

    def test_classical_state_drops_quantum_term(self, packet):
        classical = packet.as_kind("classical")
        assert ensemble_average_closed(kinetic(packet.grid), classical) == pytest.approx(2.0, rel=1e-8)

    def test_vortex_angular_momentum(self):
        grid = Grid.cube(-6.0, 6.0, 128, 2)
        psi = ComplexField.from_function(grid, lambda x, y: (x + 1j * y) * np.exp(-(x**2 + y**2) / 2.0)).normalized()
        state = from_wavefunction(psi)
        assert state.winding == 1
        obs = angular_momentum_z(grid)
        assert ensemble_average_closed(obs, state) == pytest.approx(1.0, abs=1e-3)
        assert quantum_expectation(obs, psi).real == pytest.approx(1.0, abs=1e-3)


class TestThreeWayAgreement:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_state_and_observable(self, seed):
        grid = Grid.line(-8.0, 8.0, 800)
        rng = np.random.default_rng(seed)
        state = random_smooth_state(grid, rng)
        obs = random_observable(grid, rng)
        closed = ensemble_average_closed(obs, state)
        quantum = quantum_expectation(obs, to_wavefunction(state), state.hbar)
        assert quantum.real == pytest.approx(closed, abs=1e-4)
        assert abs(quantum.imag) < 1e-6

        mc = ensemble_average_mc(obs, state, XiModel(seed=seed), 100_000)
        assert abs(mc.value - closed) <= 4.0 * mc.stderr

    def test_gaussian_xi_law_agrees(self, packet):
        obs = kinetic(packet.grid)
        mc = ensemble_average_mc(obs, packet, XiModel(law="gaussian", seed=9), 200_000)
        assert abs(mc.value - 2.125) <= 4.0 * mc.stderr

    def test_grid_mismatch(self, packet):
        with pytest.raises(ValueError):
            ensemble_average_closed(kinetic(Grid.line(-5.0, 5.0, 64)), packet)


class TestUncertainty:
    def test_gaussian_saturates(self, line):
        state = from_wavefunction(gaussian_wave(line, 0.0, 1.0))
        result = uncertainty_product(state)
        assert result.product == pytest.approx(0.5, rel=1e-6)

    def test_gaussian_monte_carlo(self, line):
        state = from_wavefunction(gaussian_wave(line, 0.0, 1.0))
        mc = uncertainty_product_mc(state, XiModel(seed=17), 200_000)
        assert abs(mc.product - 0.5) <= 4.0 * mc.stderr

    def test_box_ground_level(self):
        grid = Grid.line(0.0, 1.0, 1024)
        state = from_wavefunction(box_state(grid, 1))
        result = uncertainty_product(state)
        sigma_q2 = (math.pi**2 - 6.0) / (12.0 * math.pi**2)
        assert result.sigma_q**2 == pytest.approx(sigma_q2, rel=1e-6)
        assert result.sigma_p**2 == pytest.approx(math.pi**2, rel=1e-6)
        assert result.product == pytest.approx(math.sqrt((math.pi**2 - 6.0) / 3.0) / 2.0, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_chain_holds_for_random_states(self, seed):
        grid = Grid.line(-8.0, 8.0, 400)
        state = random_smooth_state(grid, np.random.default_rng(seed))
        chain = uncertainty_chain(state)
        assert chain.holds(1e-6)
        assert math.sqrt(chain.sigma_q2 * chain.sigma_p2) >= 0.5 - 1e-6

    def test_hbar_scales_bound(self, line):
        state = from_wavefunction(gaussian_wave(line, 0.0, 1.0, hbar=0.25), hbar=0.25)
        assert uncertainty_product(state).product == pytest.approx(0.125, rel=1e-6)


def test_mean_and_stderr():
    estimate = mean_and_stderr(np.array([1.0, 2.0, 3.0, 4.0]))
    assert estimate.value == pytest.approx(2.5)
    assert estimate.stderr == pytest.approx(math.sqrt((5.0 / 3.0) / 4.0))
    with pytest.raises(ValueError):
        mean_and_stderr(np.array([1.0]))
