from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import time
from typing import Any, Callable, Mapping

import numpy as np
import sympy

from .correlation import XiStructure, correction_forms, momentum_correlation, quantum_correction, schmidt_rank
from .dynamics import (
    Hamiltonian,
    average_energy_series,
    classical_limit_check,
    evolve_classical_hj,
    evolve_madelung,
    evolve_schrodinger,
)
from .epistemic import EpistemicState, XiModel, from_wavefunction, to_wavefunction
from .errors import ConfigError, OnticError
from .expectation import (
    ensemble_average_closed,
    ensemble_average_mc,
    momentum_product,
    position_spread,
    quantum_expectation,
    uncertainty_chain,
    uncertainty_product,
    uncertainty_product_mc,
)
from .fields import ComplexField, Grid, richardson
from .measurement import (
    MeasurementSetup,
    SEPARATION_WIDTHS,
    angular_momentum_scenario,
    born_probabilities,
    box_modes,
    evolve_measurement,
    gaussian_pointer,
    harmonic_modes,
    pointer_grid,
    sample_outcomes,
)
from .report import Gate, Series, TaskResult
from .scenario import Scenario, TaskSpec
from .states import (
    build_grid,
    build_hamiltonian,
    build_observable,
    build_state,
    build_wavefunction,
    random_observable,
    random_smooth_state,
)

logger = logging.getLogger(__name__)

MC_SIGMAS = 4.0


@dataclass(frozen=True)
class RunContext:
    scenario: Scenario
    seed: int
    samples: int
    workers: int = 1
    chunk_size: int = 65536

    @property
    def hbar(self) -> float:
        return self.scenario.hbar

    def xi_model(self, law: str | None = None, offset: int = 0) -> XiModel:
        return XiModel(hbar=self.hbar, law=law or self.scenario.xi_law, seed=self.seed + offset)

    def grid(self, params: Mapping[str, Any]) -> Grid:
        raw = params.get("grid", self.scenario.grid)
        if raw is None:
            raise ConfigError("task needs a grid and the scenario declares none")
        return build_grid(raw)

    def state_spec(self, params: Mapping[str, Any]) -> Mapping[str, Any]:
        spec = params.get("state", self.scenario.state)
        if spec is None:
            raise ConfigError("task needs a state and the scenario declares none")
        return spec

    def state(self, params: Mapping[str, Any], grid: Grid) -> EpistemicState:
        return build_state(self.state_spec(params), grid, self.hbar)

    def wave(self, params: Mapping[str, Any], grid: Grid) -> ComplexField:
        spec = self.state_spec(params)
        if spec.get("family") in ("plane_wave", "file"):
            return to_wavefunction(build_state(spec, grid, self.hbar))
        return build_wavefunction(spec, grid, self.hbar)

    def samples_for(self, params: Mapping[str, Any]) -> int:
        return int(params.get("samples", self.samples))


def expected_value(raw: Any, hbar: float) -> float:
    """A number or a sympy expression in ``hbar`` and ``pi``."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    try:
        value = sympy.sympify(str(raw), locals={"hbar": sympy.Float(hbar)})
        return float(value.evalf())
    except (sympy.SympifyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot evaluate expected value {raw!r}") from exc


def mc_gate(name: str, estimate: float, stderr: float, target: float) -> Gate:
    return Gate(name, estimate, target, max(MC_SIGMAS * stderr, 1e-12 * max(1.0, abs(target))))


def _relative_gate(name: str, value: float, target: float, rtol: float) -> Gate:
    return Gate(name, value, target, rtol * max(abs(target), 1e-300))


def run_uncertainty(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    state = ctx.state(params, grid)
    axis = int(params.get("axis", 0))
    rtol = float(params.get("rtol", 1e-6))
    result = TaskResult(task.name, task.kind)

    closed = uncertainty_product(state, ctx.xi_model(), axis)
    chain = uncertainty_chain(state, ctx.hbar, axis)
    result.values.update(
        sigma_q=closed.sigma_q,
        sigma_p=closed.sigma_p,
        product=closed.product,
        fisher=chain.fisher,
        position_bound=chain.position_bound,
    )
    result.gates.append(Gate("uncertainty_chain", chain.holds()))
    for key, value in (("product", closed.product), ("sigma_q2", closed.sigma_q**2), ("sigma_p2", closed.sigma_p**2)):
        raw = params.get(f"expected_{key}" if key != "product" else "expected")
        if raw is not None:
            result.gates.append(_relative_gate(key, value, expected_value(raw, ctx.hbar), rtol))

    if params.get("mc", True):
        n = ctx.samples_for(params)
        mc = uncertainty_product_mc(state, ctx.xi_model(), n, axis, chunk_size=ctx.chunk_size, workers=ctx.workers)
        result.values.update(mc_product=mc.product, mc_stderr=mc.stderr, samples=n)
        result.gates.append(mc_gate("mc_product", mc.product, mc.stderr, closed.product))
    return result


def run_uncertainty_sweep(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    count = int(params.get("states", 1000))
    tolerance = float(params.get("tolerance", 1e-6))
    products = np.empty(count)
    failures = 0
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([ctx.seed, k]))
        state = random_smooth_state(grid, rng, modes=int(params.get("modes", 4)), hbar=ctx.hbar)
        chain = uncertainty_chain(state, ctx.hbar)
        products[k] = math.sqrt(chain.sigma_q2 * max(chain.sigma_p2, 0.0))
        if not chain.holds(tolerance) or products[k] < ctx.hbar / 2.0 - tolerance:
            failures += 1
    result = TaskResult(task.name, task.kind)
    result.values.update(states=count, min_product=float(products.min()), failures=failures)
    result.gates.append(Gate("all_states_bounded", failures == 0))
    result.series["products"] = Series.from_columns(state=np.arange(count), product=products)
    return result


def _three_way(
    ctx: RunContext,
    obs_spec: Any,
    state: EpistemicState,
    grid: Grid,
    n: int,
    offset: int,
) -> tuple[dict[str, Any], list[Gate]]:
    obs = build_observable(obs_spec, grid)
    closed = ensemble_average_closed(obs, state)
    quantum = quantum_expectation(obs, to_wavefunction(state), ctx.hbar)
    values: dict[str, Any] = {"closed": closed, "quantum_re": quantum.real, "quantum_im": quantum.imag}
    gates = [
        Gate(f"{obs.label}:closed_vs_quantum", closed, quantum.real, 1e-5),
        Gate(f"{obs.label}:imaginary_residue", quantum.imag, 0.0, 1e-6),
    ]
    if isinstance(obs_spec, dict) and "expected" in obs_spec:
        target = expected_value(obs_spec["expected"], ctx.hbar)
        gates.append(Gate(f"{obs.label}:expected", closed, target, float(obs_spec.get("tolerance", 1e-6))))
    if n >= 2:
        mc = ensemble_average_mc(obs, state, ctx.xi_model(offset=offset), n, chunk_size=ctx.chunk_size, workers=ctx.workers)
        values.update(mc=mc.value, mc_stderr=mc.stderr)
        gates.append(mc_gate(f"{obs.label}:mc", mc.value, mc.stderr, closed))
    return values, gates


def run_expectation(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    state = ctx.state(params, grid)
    observables = params.get("observables", list(ctx.scenario.observables))
    if not observables:
        raise ConfigError(f"task {task.name} has no observables")
    n = ctx.samples_for(params) if params.get("mc", True) else 0
    result = TaskResult(task.name, task.kind)
    for idx, obs_spec in enumerate(observables):
        values, gates = _three_way(ctx, obs_spec, state, grid, n, idx)
        label = gates[0].name.split(":")[0]
        result.values[label] = values
        result.gates.extend(gates)
    return result


def run_expectation_sweep(ctx: RunContext, task: TaskSpec) -> TaskResult:
    """Random node-free states against random observables, grid-converged by one refinement."""
    params = task.params
    grid = ctx.grid(params)
    fine = grid.refine(2)
    n_states = int(params.get("states", 50))
    n_obs = int(params.get("observables_per_state", 10))
    mc_pairs = int(params.get("mc_pairs", 20))
    n = ctx.samples_for(params)
    rows = []
    mc_outside = 0
    pair = 0
    for k in range(n_states):
        state_seed = np.random.SeedSequence([ctx.seed, k])
        coarse_state = random_smooth_state(grid, np.random.default_rng(state_seed), hbar=ctx.hbar)
        fine_state = random_smooth_state(fine, np.random.default_rng(state_seed), hbar=ctx.hbar)
        coarse_psi, fine_psi = to_wavefunction(coarse_state), to_wavefunction(fine_state)
        for j in range(n_obs):
            obs_seed = np.random.SeedSequence([ctx.seed, k, j + 1])
            coarse_obs = random_observable(grid, np.random.default_rng(obs_seed))
            fine_obs = random_observable(fine, np.random.default_rng(obs_seed))
            closed = richardson(
                ensemble_average_closed(coarse_obs, coarse_state), ensemble_average_closed(fine_obs, fine_state), 4
            )
            q_coarse = quantum_expectation(coarse_obs, coarse_psi, ctx.hbar)
            q_fine = quantum_expectation(fine_obs, fine_psi, ctx.hbar)
            quantum = richardson(q_coarse.real, q_fine.real, 4)
            imaginary = max(abs(q_coarse.imag), abs(q_fine.imag))
            mc_z = float("nan")
            if pair < mc_pairs:
                mc = ensemble_average_mc(
                    coarse_obs, coarse_state, ctx.xi_model(offset=pair), n, chunk_size=ctx.chunk_size, workers=ctx.workers
                )
                target = ensemble_average_closed(coarse_obs, coarse_state)
                mc_z = abs(mc.value - target) / max(mc.stderr, 1e-15)
                mc_outside += int(mc_z > MC_SIGMAS)
            pair += 1
            rows.append((k, j, closed, quantum, abs(closed - quantum), imaginary, mc_z))
    table = np.array(rows, dtype=float)
    result = TaskResult(task.name, task.kind)
    result.values.update(
        pairs=len(rows),
        max_difference=float(table[:, 4].max()),
        max_imaginary=float(table[:, 5].max()),
        mc_pairs=min(mc_pairs, len(rows)),
        mc_outside=mc_outside,
    )
    result.gates.extend(
        [
            Gate("max_difference", float(table[:, 4].max()), 0.0, float(params.get("tolerance", 1e-5))),
            Gate("max_imaginary", float(table[:, 5].max()), 0.0, 1e-6),
            Gate("mc_within_bounds", mc_outside == 0),
        ]
    )
    result.series["pairs"] = Series(
        ("state", "observable", "closed", "quantum", "difference", "imaginary", "mc_z"), table
    )
    return result


def _hamiltonian(params: Mapping[str, Any], grid: Grid) -> Hamiltonian:
    return build_hamiltonian(params.get("hamiltonian", {"potential": "free"}), grid)


def _oracle_gates(
    params: Mapping[str, Any], ctx: RunContext, report: Any, H: Hamiltonian, result: TaskResult
) -> None:
    oracle = params.get("oracle")
    if oracle is None:
        return
    rtol = float(params.get("oracle_rtol", 1e-4))
    state_spec = ctx.state_spec(params)
    mass = H.masses[0]
    times = np.asarray(report.times)
    if oracle == "free_width":
        sigma0 = float(state_spec.get("sigma", 1.0))
        snapshots = [(t, s) for t, s in report.snapshots if isinstance(s, ComplexField)]
        if not snapshots:
            raise ConfigError("the free_width oracle needs snapshot_stride > 0")
        measured = np.array([math.sqrt(position_spread(from_wavefunction(s.normalized(), ctx.hbar))[1]) for _, s in snapshots])
        snap_times = np.array([t for t, _ in snapshots])
        exact = sigma0 * np.sqrt(1.0 + (ctx.hbar * snap_times / (2.0 * mass * sigma0**2)) ** 2)
        error = float(np.max(np.abs(measured - exact) / exact))
        result.values["width_error"] = error
        result.gates.append(Gate("free_width_law", error, 0.0, rtol))
        result.series["width"] = Series.from_columns(time=snap_times, measured=measured, exact=exact)
    elif oracle == "coherent":
        omega = float(params.get("hamiltonian", {}).get("omega", 1.0))
        q0 = float(state_spec.get("q0", 0.0))
        p0 = float(state_spec.get("p0", 0.0))
        exact = q0 * np.cos(omega * times) + p0 / (mass * omega) * np.sin(omega * times)
        amplitude = math.hypot(q0, p0 / (mass * omega))
        error = float(np.max(np.abs(report.mean_q[:, 0] - exact))) / max(amplitude, 1e-300)
        result.values["trajectory_error"] = error
        result.gates.append(Gate("coherent_trajectory", error, 0.0, rtol))
    else:
        raise ConfigError(f"unknown oracle {oracle!r}")


def _report_series(report: Any) -> Series:
    dims = report.mean_q.shape[1]
    columns = {"time": report.times, "norm": report.norm, "energy": report.energy}
    columns.update({f"mean_q{a}": report.mean_q[:, a] for a in range(dims)})
    columns.update({f"mean_p{a}": report.mean_p[:, a] for a in range(dims)})
    return Series.from_columns(**columns)


def run_evolve(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    H = _hamiltonian(params, grid)
    method = params.get("method", "schrodinger")
    dt = params.get("dt")
    T = float(params.get("T", 1.0))
    stride = int(params.get("snapshot_stride", 0))
    result = TaskResult(task.name, task.kind)

    if method == "schrodinger":
        if dt is None:
            raise ConfigError("Schrodinger evolution needs 'dt'")
        _, report = evolve_schrodinger(
            ctx.wave(params, grid), H, float(dt), T, hbar=ctx.hbar, scheme=params.get("scheme", "auto"), snapshot_stride=stride
        )
        result.gates.append(Gate("norm_drift_per_step", report.max_norm_drift, 0.0, 1e-10))
    elif method == "madelung":
        _, report = evolve_madelung(
            ctx.state(params, grid),
            H,
            None if dt is None else float(dt),
            T,
            quantum_potential=bool(params.get("quantum_potential", True)),
            snapshot_stride=stride,
        )
    elif method == "classical_hj":
        if dt is None:
            raise ConfigError("classical evolution needs 'dt'")
        state0 = ctx.state(params, grid).as_kind("classical")
        _, _, report = evolve_classical_hj(
            state0,
            H,
            float(dt),
            T,
            params.get("trajectories"),
            launch=params.get("launch", "lattice"),
            seed=ctx.seed,
            snapshot_stride=stride,
        )
    else:
        raise ConfigError(f"unknown evolution method {method!r}")

    energy_tolerance = float(params.get("energy_tolerance", 1e-6))
    result.values.update(
        method=method,
        steps=report.steps,
        max_norm_drift=report.max_norm_drift,
        energy_defect=report.energy_defect,
        final_mean_q=report.mean_q[-1],
        final_mean_p=report.mean_p[-1],
    )
    result.gates.append(Gate("energy_defect", report.energy_defect, 0.0, energy_tolerance))
    if params.get("average_energy", False) and report.snapshots:
        series = average_energy_series(report, H, ctx.hbar)
        result.values["average_energy_defect"] = series.defect
        result.gates.append(Gate("average_energy_defect", series.defect, 0.0, energy_tolerance))
    _oracle_gates(params, ctx, report, H, result)
    result.series["evolution"] = _report_series(report)
    return result


def _density_discrepancy(
    grid: Grid, params: Mapping[str, Any], ctx: RunContext, H: Hamiltonian, dt_scale: float = 1.0
) -> float:
    T = float(params.get("T", 0.5))
    order = int(params.get("order", 2))
    dt = float(params.get("dt", 1e-3)) * dt_scale
    psi_T, _ = evolve_schrodinger(ctx.wave(params, grid), H, dt, T, hbar=ctx.hbar, order=order)
    state_T, _ = evolve_madelung(ctx.state(params, grid), H, None, T, order=order)
    difference = np.abs(psi_T.values) ** 2 - state_T.density.values
    return math.sqrt(float(np.sum(difference**2)) * grid.cell_volume)


def run_madelung_check(ctx: RunContext, task: TaskSpec) -> TaskResult:
    """Density from the Madelung equations against Schrodinger, on the grid and once refined."""
    params = task.params
    grid = ctx.grid(params)
    coarse = _density_discrepancy(grid, params, ctx, _hamiltonian(params, grid))
    result = TaskResult(task.name, task.kind)
    result.values["discrepancy"] = coarse
    result.gates.append(Gate("density_discrepancy", coarse, 0.0, float(params.get("tolerance", 1e-3))))

    fine_grid = grid.refine(2)
    try:
        fine = _density_discrepancy(fine_grid, params, ctx, _hamiltonian(params, fine_grid), dt_scale=0.25)
    except OnticError as exc:
        logger.warning("Task %s: refined Madelung run aborted: %s", task.name, exc)
        result.values["refinement_error"] = str(exc)
        result.gates.append(Gate("refinement_completed", False))
        return result

    observed_order = math.log2(coarse / fine) if fine > 0 and coarse > 0 else float("inf")
    result.values.update(refined_discrepancy=fine, observed_order=observed_order)
    result.gates.append(Gate("observed_order", observed_order >= float(params.get("min_order", 1.5))))
    return result


def run_classical_limit(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    H = _hamiltonian(params, grid)
    hbars = [float(h) for h in params.get("hbars", [1.0, 0.5, 0.25, 0.125, 0.0625])]
    report = classical_limit_check(
        ctx.state(params, grid).with_hbar(1.0),
        H,
        hbars,
        float(params.get("dt", 1e-3)),
        float(params.get("T", 1.0)),
        scheme=params.get("scheme", "auto"),
    )
    result = TaskResult(task.name, task.kind)
    result.values.update(report.to_dict())
    factor = float(params.get("ratio_factor", 1.5))
    result.gates.append(Gate("monotonic", report.monotonic))
    result.gates.append(Gate("quadratic_ratios", all(4.0 / factor <= r <= 4.0 * factor for r in report.ratios)))
    result.series["divergence"] = Series.from_columns(hbar=report.hbars, phase_divergence=report.phase_divergence)
    return result


def _modes(params: Mapping[str, Any], grid: Grid, count: int, hbar: float) -> Any:
    family = params.get("modes", "box")
    eigenvalues = params.get("eigenvalues")
    if family == "box":
        return box_modes(grid, count, eigenvalues)
    if family == "harmonic":
        return harmonic_modes(grid, count, float(params.get("omega", 1.0)), 1.0, hbar, eigenvalues)
    raise ConfigError(f"unknown mode family {family!r}")


def run_born(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    probabilities = np.asarray(params.get("probabilities", [0.2, 0.3, 0.5]), dtype=float)
    if np.any(probabilities < 0) or abs(probabilities.sum() - 1.0) > 1e-12:
        raise ConfigError("Born task probabilities must be non-negative and sum to 1")
    phases = np.asarray(params.get("phases", np.zeros_like(probabilities)), dtype=float)
    coefficients = np.sqrt(probabilities) * np.exp(1j * phases)
    eigensystem = _modes(params, grid, probabilities.size, ctx.hbar)
    coupling = float(params.get("coupling", 1.0))
    duration = float(params.get("duration", 1.0))
    shifts = coupling * eigensystem.eigenvalues * duration
    spacing = float(np.min(np.diff(np.unique(shifts)))) if np.unique(shifts).size > 1 else 1.0
    sigma = float(params.get("pointer_sigma", spacing / SEPARATION_WIDTHS))
    pointer = gaussian_pointer(pointer_grid(shifts, sigma), sigma)
    setup = MeasurementSetup.from_eigensystem(eigensystem, pointer, coupling, duration)
    basis = np.stack([np.asarray(f.values) for f in eigensystem.fields])
    psi_S = ComplexField(grid, coefficients @ basis)

    joint = evolve_measurement(psi_S, setup)
    born = born_probabilities(joint)
    n = ctx.samples_for(params)
    outcomes = sample_outcomes(joint, n, ctx.seed, chunk_size=ctx.chunk_size, workers=ctx.workers)
    counts = np.bincount(outcomes, minlength=born.probabilities.size)
    bounds = MC_SIGMAS * np.sqrt(n * born.probabilities * (1.0 - born.probabilities))
    within = bool(np.all(np.abs(counts - n * born.probabilities) <= np.maximum(bounds, 1.0)))

    result = TaskResult(task.name, task.kind)
    result.values.update(born.to_dict())
    result.values.update(counts=counts, samples=n, max_overlap=joint.max_overlap)
    result.values["schmidt_rank"] = schmidt_rank(joint.to_field(), split=grid.dims)
    for j, (p, target) in enumerate(zip(born.probabilities, probabilities)):
        result.gates.append(Gate(f"probability_{j}", float(p), float(target), float(params.get("tolerance", 1e-6))))
    result.gates.append(Gate("sampled_counts", within))
    marginal_ = joint.pointer_marginal()
    result.series["pointer_marginal"] = Series.from_columns(
        q=marginal_.grid.axis_coordinates(0), density=marginal_.values
    )
    return result


def run_angular_momentum(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    m_values = [int(m) for m in params.get("m", [0, 1, 2])]
    weights = params.get("weights", [1.0] * len(m_values))
    coupling = float(params.get("coupling", 1.0))
    duration = float(params.get("duration", 1.0))
    grid = build_grid(params["grid"]) if "grid" in params else None
    joint, report = angular_momentum_scenario(m_values, weights, coupling, duration, hbar=ctx.hbar, grid=grid)
    result = TaskResult(task.name, task.kind)
    result.values.update(report.to_dict())
    result.gates.append(Gate("centre_error", report.centre_error, 0.0, float(params.get("centre_tolerance", 1e-3))))
    result.gates.append(Gate("schmidt_rank", report.schmidt_rank == len(m_values)))
    result.gates.append(Gate("separated", report.separated))
    marginal_ = joint.pointer_marginal()
    result.series["pointer_marginal"] = Series.from_columns(
        q=marginal_.grid.axis_coordinates(0), density=marginal_.values
    )
    return result


def run_correlation(ctx: RunContext, task: TaskSpec) -> TaskResult:
    params = task.params
    grid = ctx.grid(params)
    psi = ctx.wave(params, grid).normalized()
    state = from_wavefunction(psi, ctx.hbar)
    n = ctx.samples_for(params)
    model = ctx.xi_model()
    nonseparable, separable = XiStructure.nonseparable(model), XiStructure.separable(model)
    kwargs = {"chunk_size": ctx.chunk_size, "workers": ctx.workers}

    closed_ns = momentum_correlation(state, nonseparable, "closed")
    closed_s = momentum_correlation(state, separable, "closed")
    mc_ns = momentum_correlation(state, nonseparable, "mc", n, **kwargs)
    mc_s = momentum_correlation(state, separable, "mc", n, **kwargs)
    forms = correction_forms(state)
    correction = quantum_correction(state)
    quantum = quantum_expectation(momentum_product(grid), psi, ctx.hbar)

    result = TaskResult(task.name, task.kind)
    result.values.update(
        nonseparable_closed=closed_ns.to_dict(),
        separable_closed=closed_s.to_dict(),
        nonseparable_mc=mc_ns.to_dict(),
        separable_mc=mc_s.to_dict(),
        quantum_expectation=quantum.real,
        correction_osmotic=forms.osmotic,
        correction_amplitude=forms.amplitude,
    )
    tolerance = float(params.get("tolerance", 1e-5))
    result.gates.extend(
        [
            Gate("nonseparable_vs_quantum", closed_ns.value, quantum.real, tolerance),
            mc_gate("nonseparable_mc", mc_ns.value, mc_ns.stderr, closed_ns.value),
            mc_gate("separable_mc", mc_s.value, mc_s.stderr, closed_s.value),
            Gate("split_equals_correction", closed_ns.value - closed_s.value, correction, tolerance),
            _relative_gate("correction_forms", forms.amplitude, forms.osmotic, float(params.get("forms_rtol", 1e-5))),
        ]
    )
    if "expected_schmidt_rank" in params:
        rank = schmidt_rank(psi)
        result.values["schmidt_rank"] = rank
        result.gates.append(Gate("schmidt_rank", rank == int(params["expected_schmidt_rank"])))
    return result


def run_mu_invariance(ctx: RunContext, task: TaskSpec) -> TaskResult:
    """Monte Carlo averages under the two-point and the Gaussian xi laws."""
    params = task.params
    grid = ctx.grid(params)
    state = ctx.state(params, grid)
    n = ctx.samples_for(params)
    result = TaskResult(task.name, task.kind)
    kwargs = {"chunk_size": ctx.chunk_size, "workers": ctx.workers}

    def compare(label: str, a: tuple[float, float], b: tuple[float, float]) -> None:
        combined = math.hypot(a[1], b[1])
        result.values[label] = {"two_point": a[0], "two_point_stderr": a[1], "gaussian": b[0], "gaussian_stderr": b[1]}
        result.gates.append(Gate(f"{label}:laws_agree", a[0] - b[0], 0.0, MC_SIGMAS * max(combined, 1e-15)))

    for idx, obs_spec in enumerate(params.get("observables", list(ctx.scenario.observables))):
        obs = build_observable(obs_spec, grid)
        a = ensemble_average_mc(obs, state, ctx.xi_model("two_point", idx), n, **kwargs)
        b = ensemble_average_mc(obs, state, ctx.xi_model("gaussian", idx), n, **kwargs)
        compare(obs.label, a, b)
    if params.get("uncertainty", False):
        a = uncertainty_product_mc(state, ctx.xi_model("two_point"), n, **kwargs)
        b = uncertainty_product_mc(state, ctx.xi_model("gaussian"), n, **kwargs)
        compare("uncertainty_product", (a.product, a.stderr), (b.product, b.stderr))
    if params.get("correlation", False):
        a = momentum_correlation(state, XiStructure.nonseparable(ctx.xi_model("two_point")), "mc", n, **kwargs)
        b = momentum_correlation(state, XiStructure.nonseparable(ctx.xi_model("gaussian")), "mc", n, **kwargs)
        compare("momentum_correlation", (a.value, a.stderr), (b.value, b.stderr))
    if not result.gates:
        raise ConfigError(f"task {task.name} compares nothing")
    return result


TaskRunner = Callable[[RunContext, TaskSpec], TaskResult]

TASKS: dict[str, TaskRunner] = {
    "uncertainty": run_uncertainty,
    "uncertainty_sweep": run_uncertainty_sweep,
    "expectation": run_expectation,
    "expectation_sweep": run_expectation_sweep,
    "evolve": run_evolve,
    "madelung_check": run_madelung_check,
    "classical_limit": run_classical_limit,
    "born": run_born,
    "angular_momentum": run_angular_momentum,
    "correlation": run_correlation,
    "mu_invariance": run_mu_invariance,
}


def run_task(ctx: RunContext, task: TaskSpec) -> TaskResult:
    started = time.perf_counter()
    logger.info("Task %s (%s) started", task.name, task.kind)
    result = TASKS[task.kind](ctx, task)
    elapsed = time.perf_counter() - started
    if result.status == "failed":
        failed = [g.name for g in result.gates if not g.passed]
        logger.warning("Task %s failed gates %s after %.2fs", task.name, failed, elapsed)
    else:
        logger.info("Task %s %s in %.2fs", task.name, result.status, elapsed)
    return result
