from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import logging
import math
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.interpolate import griddata
from scipy.sparse.linalg import splu

from .epistemic import (
    DERIVATIVE_ORDER,
    NODE_EPSILON,
    NORMALIZATION_TOLERANCE,
    EpistemicState,
    chunk_streams,
    from_wavefunction,
    sample_positions,
    to_wavefunction,
)
from .errors import CausticError, CFLError, DomainError, InstabilityError, NodeError
from .expectation import QuadraticObservable, ensemble_average_closed, per_axis_masses, require_node_free
from .fields import (
    ComplexField,
    Grid,
    ScalarField,
    gradient,
    interpolator,
    laplacian_like,
    spectral_gradient,
)

logger = logging.getLogger(__name__)

METHODS = ("schrodinger", "madelung", "classical_hj")
SCHEMES = ("auto", "split_step", "crank_nicolson")
LAUNCHES = ("lattice", "random")

NORM_DRIFT_LIMIT = 1e-10
ESCAPE_TOLERANCE = 1e-9
# RK4 stability reaches about 2.83 on the imaginary axis
RK4_STABILITY = 2.8

_FIRST = {
    2: {-1: -0.5, 1: 0.5},
    4: {-2: 1.0 / 12.0, -1: -8.0 / 12.0, 1: 8.0 / 12.0, 2: -1.0 / 12.0},
}
_SECOND = {
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    4: {-2: -1.0 / 12.0, -1: 16.0 / 12.0, 0: -30.0 / 12.0, 1: 16.0 / 12.0, 2: -1.0 / 12.0},
}


def _grid_array(grid: Grid, value: Any) -> np.ndarray:
    if isinstance(value, ScalarField):
        if value.grid != grid:
            raise ValueError("field lives on another grid")
        return np.array(value.values, dtype=float)
    if callable(value):
        value = value(*grid.mesh())
    return np.broadcast_to(np.asarray(value, dtype=float), grid.shape).astype(float)


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """H = sum_i (p_i - A_i)^2 / 2 m_i + V(q), time independent."""

    grid: Grid
    masses: tuple[float, ...]
    potential: np.ndarray = field(repr=False)
    gauge: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        masses = per_axis_masses(self.grid, self.masses)
        potential = np.broadcast_to(np.asarray(self.potential, dtype=float), self.grid.shape).copy()
        gauge = np.broadcast_to(np.asarray(self.gauge, dtype=float), (self.grid.dims, *self.grid.shape)).copy()
        if not (np.all(np.isfinite(potential)) and np.all(np.isfinite(gauge))):
            raise ValueError("Hamiltonian potentials must be finite")
        potential.setflags(write=False)
        gauge.setflags(write=False)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "potential", potential)
        object.__setattr__(self, "gauge", gauge)

    @classmethod
    def build(
        cls,
        grid: Grid,
        *,
        masses: float | Sequence[float] = 1.0,
        potential: Any = 0.0,
        gauge: Sequence[Any] | None = None,
    ) -> Hamiltonian:
        """``potential`` and gauge components may be numbers, arrays, ScalarFields or ``fn(*mesh)``."""
        if gauge is None:
            a = np.zeros((grid.dims, *grid.shape))
        else:
            a = np.stack([_grid_array(grid, gauge[i]) for i in range(grid.dims)])
        return cls(grid=grid, masses=per_axis_masses(grid, masses), potential=_grid_array(grid, potential), gauge=a)

    @property
    def has_gauge(self) -> bool:
        return bool(np.any(self.gauge))

    @property
    def observable(self) -> QuadraticObservable:
        dims = self.grid.dims
        metric = np.zeros((dims, dims, *self.grid.shape))
        for i, m in enumerate(self.masses):
            metric[i, i] = 1.0 / m
        return QuadraticObservable(
            grid=self.grid,
            metric=metric,
            gauge=self.gauge,
            linear=np.zeros((dims, *self.grid.shape)),
            potential=self.potential,
            label="hamiltonian",
        )


AnyHamiltonian = Union[Hamiltonian, QuadraticObservable]


@dataclass(eq=False)
class EvolutionReport:
    method: str
    times: np.ndarray
    norm: np.ndarray
    energy: np.ndarray
    mean_q: np.ndarray
    mean_p: np.ndarray
    snapshots: list[tuple[float, Any]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"Unknown evolution method {self.method!r}")
        n = len(self.times)
        for name in ("norm", "energy", "mean_q", "mean_p"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"report series {name!r} has {len(getattr(self, name))} entries, expected {n}")

    @property
    def steps(self) -> int:
        return max(len(self.times) - 1, 0)

    @property
    def norm_drift(self) -> np.ndarray:
        return np.abs(np.diff(self.norm))

    @property
    def max_norm_drift(self) -> float:
        drift = self.norm_drift
        return float(np.max(drift)) if drift.size else 0.0

    @property
    def energy_defect(self) -> float:
        """Largest deviation of the energy series from its first value, relative to it."""
        if len(self.energy) == 0:
            return 0.0
        e0 = float(self.energy[0])
        return float(np.max(np.abs(self.energy - e0))) / max(abs(e0), 1e-300)

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        dims = self.mean_q.shape[1] if self.mean_q.ndim == 2 else 1
        columns = ["time", "norm", "energy"]
        columns += [f"mean_q{a}" for a in range(dims)] + [f"mean_p{a}" for a in range(dims)]
        rows = np.column_stack((self.times, self.norm, self.energy, self.mean_q, self.mean_p))
        np.savetxt(target, rows, delimiter=",", header=",".join(columns), comments="", fmt="%.17g")
        return target


class _Recorder:
    def __init__(self, method: str, stride: int):
        self.method = method
        self.stride = stride
        self.times: list[float] = []
        self.norm: list[float] = []
        self.energy: list[float] = []
        self.mean_q: list[np.ndarray] = []
        self.mean_p: list[np.ndarray] = []
        self.snapshots: list[tuple[float, Any]] = []

    def record(
        self,
        step: int,
        t: float,
        norm: float,
        energy: float,
        mean_q: np.ndarray,
        mean_p: np.ndarray,
        snapshot: Callable[[], Any] | None = None,
        last: bool = False,
    ) -> None:
        self.times.append(t)
        self.norm.append(norm)
        self.energy.append(energy)
        self.mean_q.append(np.asarray(mean_q, dtype=float))
        self.mean_p.append(np.asarray(mean_p, dtype=float))
        if snapshot is not None and self.stride > 0 and (step % self.stride == 0 or last):
            self.snapshots.append((t, snapshot()))

    def report(self) -> EvolutionReport:
        return EvolutionReport(
            method=self.method,
            times=np.asarray(self.times),
            norm=np.asarray(self.norm),
            energy=np.asarray(self.energy),
            mean_q=np.vstack(self.mean_q),
            mean_p=np.vstack(self.mean_p),
            snapshots=self.snapshots,
        )


def _step_count(dt: float, T: float) -> tuple[int, float]:
    if not T >= 0:
        raise ValueError("evolution time T must be non-negative")
    if not dt > 0:
        raise ValueError("time step dt must be positive")
    if T == 0:
        return 0, dt
    steps = max(int(round(T / dt)), 1)
    if abs(steps * dt - T) > 1e-9 * T:
        logger.debug("Adjusted dt from %g to %g so that %d steps reach T=%g", dt, T / steps, steps, T)
    return steps, T / steps


def _stencil_1d(n: int, h: float, boundary: str, coefficients: dict[int, float]) -> sparse.csr_matrix:
    """Banded operator for one axis; vanishing axes drop the ghost points."""
    index = np.arange(n)
    rows, cols, vals = [], [], []
    for offset, c in coefficients.items():
        target = index + offset
        if boundary == "periodic":
            keep = np.ones(n, dtype=bool)
            target = np.mod(target, n)
        else:
            keep = (target >= 0) & (target < n)
        rows.append(index[keep])
        cols.append(target[keep])
        vals.append(np.full(int(keep.sum()), c / h))
    matrix = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return matrix.tocsr()


def _axis_operator(grid: Grid, axis: int, op: sparse.spmatrix) -> sparse.csr_matrix:
    result: sparse.spmatrix | None = None
    for a in range(grid.dims):
        factor = op if a == axis else sparse.identity(grid.points[a], format="csr")
        result = factor if result is None else sparse.kron(result, factor, format="csr")
    return sparse.csr_matrix(result)


def hamiltonian_matrix(H: Hamiltonian, hbar: float = 1.0, order: int = DERIVATIVE_ORDER) -> sparse.csr_matrix:
    """Hermitian finite-difference H on the flattened grid (row-major)."""
    if order not in _FIRST:
        raise ValueError(f"stencil order must be 2 or 4, got {order}")
    grid = H.grid
    total = sparse.diags(H.potential.reshape(-1)).astype(complex)
    for axis, mass in enumerate(H.masses):
        n, h, boundary = grid.points[axis], grid.spacing[axis], grid.boundary[axis]
        if not np.any(H.gauge[axis]):
            second = _stencil_1d(n, h * h, boundary, _SECOND[order])
            total = total - (hbar**2 / (2.0 * mass)) * _axis_operator(grid, axis, second)
            continue
        first = _axis_operator(grid, axis, _stencil_1d(n, h, boundary, _FIRST[order]))
        p = -1j * hbar * first - sparse.diags(H.gauge[axis].reshape(-1))
        total = total + (p @ p) / (2.0 * mass)
    return sparse.csr_matrix(total)


class _SplitStep:
    """Strang splitting V/2, T, V/2 with the kinetic factor applied in Fourier space."""

    def __init__(self, H: Hamiltonian, hbar: float, dt: float):
        grid = H.grid
        kinetic = np.zeros(grid.shape)
        for axis, mass in enumerate(H.masses):
            k = 2.0 * np.pi * np.fft.fftfreq(grid.points[axis], d=grid.spacing[axis])
            shape = [1] * grid.dims
            shape[axis] = grid.points[axis]
            kinetic = kinetic + (hbar * k.reshape(shape)) ** 2 / (2.0 * mass)
        self.kinetic = kinetic
        self.potential = H.potential
        self.kinetic_phase = np.exp(-1j * kinetic * dt / hbar)
        self.half_potential = np.exp(-0.5j * H.potential * dt / hbar)
        self.cell_volume = grid.cell_volume

    def step(self, psi: np.ndarray) -> np.ndarray:
        psi = self.half_potential * psi
        psi = np.fft.ifftn(self.kinetic_phase * np.fft.fftn(psi))
        return self.half_potential * psi

    def energy(self, psi: np.ndarray) -> float:
        spectrum = np.fft.fftn(psi)
        kinetic = float(np.sum(self.kinetic * np.abs(spectrum) ** 2)) / psi.size
        potential = float(np.sum(self.potential * np.abs(psi) ** 2))
        return (kinetic + potential) * self.cell_volume


class _CrankNicolson:
    """(1 + i dt H / 2 hbar) psi' = (1 - i dt H / 2 hbar) psi with a sparse LU factorization."""

    def __init__(self, H: Hamiltonian, hbar: float, dt: float, order: int):
        self.matrix = hamiltonian_matrix(H, hbar, order)
        size = self.matrix.shape[0]
        ident = sparse.identity(size, dtype=complex, format="csr")
        half = 0.5j * dt / hbar
        self.forward = (ident - half * self.matrix).tocsr()
        self.solver = splu((ident + half * self.matrix).tocsc())
        self.shape = H.grid.shape
        self.cell_volume = H.grid.cell_volume

    def step(self, psi: np.ndarray) -> np.ndarray:
        return self.solver.solve(self.forward @ psi.reshape(-1)).reshape(self.shape)

    def energy(self, psi: np.ndarray) -> float:
        flat = psi.reshape(-1)
        return float(np.real(np.vdot(flat, self.matrix @ flat))) * self.cell_volume


def _wave_moments(psi: np.ndarray, grid: Grid, hbar: float, order: int) -> tuple[float, np.ndarray, np.ndarray]:
    density = np.abs(psi) ** 2
    dv = grid.cell_volume
    norm = float(np.sum(density)) * dv
    mesh = grid.mesh()
    mean_q = np.array([float(np.sum(mesh[a] * density)) * dv / norm for a in range(grid.dims)])
    field_ = ComplexField(grid, psi)
    mean_p = np.empty(grid.dims)
    for a in range(grid.dims):
        if grid.boundary[a] == "periodic":
            derivative = spectral_gradient(field_, a).values
        else:
            derivative = gradient(field_, a, order).values
        mean_p[a] = float(np.real(np.vdot(psi, -1j * hbar * derivative))) * dv / norm
    return norm, mean_q, mean_p


def select_scheme(H: Hamiltonian, scheme: str = "auto") -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown scheme {scheme!r}; expected one of {SCHEMES}")
    spectral_ok = all(b == "periodic" for b in H.grid.boundary) and not H.has_gauge
    if scheme == "auto":
        return "split_step" if spectral_ok else "crank_nicolson"
    if scheme == "split_step" and not spectral_ok:
        raise ValueError("split-step propagation needs a fully periodic grid without vector potential")
    return scheme


def evolve_schrodinger(
    psi0: ComplexField,
    H: Hamiltonian,
    dt: float,
    T: float,
    *,
    hbar: float = 1.0,
    scheme: str = "auto",
    order: int = DERIVATIVE_ORDER,
    snapshot_stride: int = 0,
) -> tuple[ComplexField, EvolutionReport]:
    """Unitary propagation of psi0 under H up to time T.

    Fully periodic grids without vector potential use split-step Fourier;
    everything else uses Crank-Nicolson on the finite-difference Hamiltonian.
    The reported energy uses the propagator's own operator.
    """
    op = "dynamics.evolve_schrodinger"
    if psi0.grid != H.grid:
        raise ValueError("wave function and Hamiltonian live on different grids")
    if not hbar > 0:
        raise ValueError("hbar must be positive")
    if abs(psi0.norm() - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValueError(f"psi0 norm is {psi0.norm():.12g}, expected 1")
    steps, dt = _step_count(dt, T)
    grid = psi0.grid
    chosen = select_scheme(H, scheme)

    if chosen == "split_step":
        spread = float(np.max(H.potential) - np.min(H.potential))
        if spread * dt / hbar > np.pi:
            raise CFLError(
                f"potential range {spread:.3g} turns by more than pi per step at dt={dt:.3g}",
                where=op,
            )
        propagator: _SplitStep | _CrankNicolson = _SplitStep(H, hbar, dt)
    else:
        propagator = _CrankNicolson(H, hbar, dt, order)

    logger.info("Schrodinger run: scheme=%s grid=%s steps=%d dt=%g", chosen, grid.points, steps, dt)
    recorder = _Recorder("schrodinger", snapshot_stride)
    psi = np.array(psi0.values)
    norm, mean_q, mean_p = _wave_moments(psi, grid, hbar, order)
    recorder.record(0, 0.0, norm, propagator.energy(psi), mean_q, mean_p, lambda: ComplexField(grid, psi))

    for step in range(1, steps + 1):
        psi = propagator.step(psi)
        if not np.all(np.isfinite(psi)):
            raise InstabilityError(f"non-finite amplitude at step {step}", where=op)
        t = step * dt
        new_norm, mean_q, mean_p = _wave_moments(psi, grid, hbar, order)
        drift = abs(new_norm - norm)
        if drift > NORM_DRIFT_LIMIT:
            raise InstabilityError(
                f"norm drift {drift:.3e} at step {step} (t={t:.6g}) exceeds {NORM_DRIFT_LIMIT:g}",
                where=op,
            )
        norm = new_norm
        current = psi
        recorder.record(
            step,
            t,
            norm,
            propagator.energy(psi),
            mean_q,
            mean_p,
            lambda: ComplexField(grid, current),
            last=step == steps,
        )

    report = recorder.report()
    logger.info(
        "Schrodinger run done: max norm drift %.2e, energy defect %.2e",
        report.max_norm_drift,
        report.energy_defect,
    )
    return ComplexField(grid, psi), report


def _madelung_step_limit(H: Hamiltonian, hbar: float, velocity: Sequence[np.ndarray], quantum_potential: bool) -> float:
    limit = math.inf
    for axis, mass in enumerate(H.masses):
        h = H.grid.spacing[axis]
        rate = 1.4 * float(np.max(np.abs(velocity[axis]))) / h
        if quantum_potential:
            rate += 8.0 * hbar / (3.0 * mass * h * h)
        if rate > 0:
            limit = min(limit, RK4_STABILITY / rate)
    return limit


def evolve_madelung(
    state0: EpistemicState,
    H: Hamiltonian,
    dt: float | None,
    T: float,
    *,
    quantum_potential: bool = True,
    phase_perturbation: ScalarField | None = None,
    order: int = DERIVATIVE_ORDER,
    snapshot_stride: int = 0,
) -> tuple[EpistemicState, EvolutionReport]:
    """Continuity plus modified Hamilton-Jacobi equation for (log rho, S), RK4 in time.

    With ``quantum_potential=False`` the hbar^2 term is dropped and the run is
    the classical Hamilton-Jacobi flow on the grid. ``phase_perturbation`` adds
    a static term to the right-hand side of the S equation; such a flow no
    longer conserves the average energy.
    """
    op = "dynamics.evolve_madelung"
    grid = state0.grid
    if H.grid != grid:
        raise ValueError("state and Hamiltonian live on different grids")
    hbar = state0.hbar
    if dt is None:
        dt = 0.1 * min(h * h * m for h, m in zip(grid.spacing, H.masses)) / hbar
    steps, dt = _step_count(dt, T)

    require_node_free(state0, op)
    rho0 = state0.density.values
    if state0.has_branch_cut():
        raise NodeError("initial phase winds around a node", where=op)
    log_floor = math.log(NODE_EPSILON)
    source = None if phase_perturbation is None else np.asarray(phase_perturbation.values)
    dv = grid.cell_volume
    mesh = grid.mesh()

    def d1(values: np.ndarray, axis: int) -> np.ndarray:
        return gradient(ScalarField(grid, values), axis, order).values

    def d2(values: np.ndarray, axis: int) -> np.ndarray:
        return laplacian_like(ScalarField(grid, values), axis, axis, order).values

    def velocities(S: np.ndarray) -> list[np.ndarray]:
        return [(d1(S, a) - H.gauge[a]) / m for a, m in enumerate(H.masses)]

    def rhs(L: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dL = np.zeros(grid.shape)
        dS = -np.array(H.potential)
        if source is not None:
            dS = dS - source
        for axis, mass in enumerate(H.masses):
            grad_L = d1(L, axis)
            v = (d1(S, axis) - H.gauge[axis]) / mass
            dL -= v * grad_L + d1(v, axis)
            dS -= 0.5 * mass * v * v
            if quantum_potential:
                # d^2 sqrt(rho) / sqrt(rho) = L''/2 + L'^2/4 with L = log rho
                dS += (hbar**2 / (2.0 * mass)) * (0.5 * d2(L, axis) + 0.25 * grad_L * grad_L)
        return dL, dS

    def diagnostics(L: np.ndarray, S: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
        rho = np.exp(L)
        norm = float(np.sum(rho)) * dv
        weight = rho * dv / norm
        energy_density = np.array(H.potential)
        mean_p = np.empty(grid.dims)
        for axis, mass in enumerate(H.masses):
            grad_S = d1(S, axis)
            energy_density = energy_density + (grad_S - H.gauge[axis]) ** 2 / (2.0 * mass)
            if quantum_potential:
                energy_density = energy_density + (hbar**2 / (8.0 * mass)) * d1(L, axis) ** 2
            mean_p[axis] = float(np.sum(weight * grad_S))
        mean_q = np.array([float(np.sum(weight * mesh[a])) for a in range(grid.dims)])
        return norm, float(np.sum(weight * energy_density)), mean_q, mean_p

    kind = "quantum" if quantum_potential else "classical"

    def as_state(L: np.ndarray, S: np.ndarray) -> EpistemicState:
        return EpistemicState.from_arrays(grid, np.exp(L - np.max(L)), S, hbar=hbar, kind=kind)

    L = np.log(rho0)
    S = np.array(state0.phase.values)
    limit = _madelung_step_limit(H, hbar, velocities(S), quantum_potential)
    if dt > limit:
        raise CFLError(f"dt={dt:.3g} exceeds the RK4 stability bound {limit:.3g}", where=op)

    logger.info("Madelung run: grid=%s steps=%d dt=%g quantum_potential=%s", grid.points, steps, dt, quantum_potential)
    recorder = _Recorder("madelung", snapshot_stride)
    norm, energy, mean_q, mean_p = diagnostics(L, S)
    recorder.record(0, 0.0, norm, energy, mean_q, mean_p, lambda: as_state(L, S))

    for step in range(1, steps + 1):
        k1 = rhs(L, S)
        k2 = rhs(L + 0.5 * dt * k1[0], S + 0.5 * dt * k1[1])
        k3 = rhs(L + 0.5 * dt * k2[0], S + 0.5 * dt * k2[1])
        k4 = rhs(L + dt * k3[0], S + dt * k3[1])
        L = L + (dt / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        S = S + (dt / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        t = step * dt
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(S))):
            raise InstabilityError(f"non-finite fields at step {step} (t={t:.6g})", where=op)
        if float(np.min(L) - np.max(L)) < log_floor:
            raise NodeError(f"density ratio fell below {NODE_EPSILON:g} at t={t:.6g}", where=op)
        limit = _madelung_step_limit(H, hbar, velocities(S), quantum_potential)
        if dt > limit:
            raise CFLError(f"dt={dt:.3g} exceeds the RK4 stability bound {limit:.3g} at t={t:.6g}", where=op)
        norm, energy, mean_q, mean_p = diagnostics(L, S)
        current_L, current_S = L, S
        recorder.record(
            step,
            t,
            norm,
            energy,
            mean_q,
            mean_p,
            lambda: as_state(current_L, current_S),
            last=step == steps,
        )

    report = recorder.report()
    logger.info("Madelung run done: norm drift %.2e, energy defect %.2e", report.max_norm_drift, report.energy_defect)
    return as_state(L, S), report


@dataclass(frozen=True, eq=False)
class Trajectories:
    """Characteristics of a classical flow; ``path`` holds positions at ``path_times``."""

    q0: np.ndarray
    p0: np.ndarray
    q: np.ndarray
    p: np.ndarray
    action: np.ndarray
    weights: np.ndarray
    jacobian: np.ndarray
    path_times: np.ndarray
    path: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.weights.shape[0])


def _as_observable(H: AnyHamiltonian) -> QuadraticObservable:
    return H.observable if isinstance(H, Hamiltonian) else H


class _PhaseSpaceFlow:
    """Hamilton's equations of a QuadraticObservable, coefficients read by multilinear interpolation."""

    def __init__(self, obs: QuadraticObservable, order: int):
        grid = obs.grid
        self.dims = grid.dims
        self._slots: dict[tuple[Any, ...], int] = {}
        arrays: list[np.ndarray] = []

        def register(key: tuple[Any, ...], values: np.ndarray, derivatives: bool = True) -> None:
            if np.any(values):
                self._slots[key] = len(arrays)
                arrays.append(np.asarray(values, dtype=float))
            if not derivatives:
                return
            for i in range(self.dims):
                derivative = gradient(ScalarField(grid, values), i, order).values
                if np.any(derivative):
                    self._slots[("d", i, *key)] = len(arrays)
                    arrays.append(derivative)

        for j in range(self.dims):
            for k in range(j, self.dims):
                register(("g", j, k), obs.metric[j, k])
            register(("A", j), obs.gauge[j])
            register(("b", j), obs.linear[j])
        register(("V",), obs.potential)
        self._table = interpolator(grid, np.stack(arrays, axis=-1), clip=True) if arrays else None

    def _sample(self, q: np.ndarray) -> Callable[..., Any]:
        values = self._table(q) if self._table is not None else None

        def get(*key: Any) -> np.ndarray | float:
            slot = self._slots.get(key)
            return 0.0 if slot is None else values[:, slot]

        return get

    def rates(self, q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dq/dt, dp/dt, H) at phase-space points."""
        get = self._sample(q)
        d = self.dims

        def g(j: int, k: int, *prefix: Any) -> np.ndarray | float:
            return get(*prefix, "g", min(j, k), max(j, k))

        u = np.stack([p[:, j] - get("A", j) for j in range(d)], axis=1)
        qdot = np.zeros_like(p)
        pdot = np.zeros_like(p)
        energy = np.zeros(p.shape[0]) + get("V")
        for j in range(d):
            energy = energy + get("b", j) * p[:, j]
            qdot[:, j] = qdot[:, j] + get("b", j)
            for k in range(d):
                qdot[:, j] = qdot[:, j] + g(j, k) * u[:, k]
                energy = energy + 0.5 * g(j, k) * u[:, j] * u[:, k]
        for i in range(d):
            force = get("d", i, "V") * np.ones(p.shape[0])
            for j in range(d):
                force = force + get("d", i, "b", j) * p[:, j]
                for k in range(d):
                    force = force + 0.5 * g(j, k, "d", i) * u[:, j] * u[:, k]
                    force = force - g(j, k) * u[:, j] * get("d", i, "A", k)
            pdot[:, i] = -force
        return qdot, pdot, energy


def _cic_weights(grid: Grid, q: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Flat indices and weights of the 2**dims cloud-in-cell corners of each point."""
    pts = grid.wrap(q)
    lows, highs, fracs = [], [], []
    for axis in range(grid.dims):
        n, h = grid.points[axis], grid.spacing[axis]
        u = (pts[:, axis] - grid.lower[axis]) / h - 0.5
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        if grid.boundary[axis] == "periodic":
            lo, hi = np.mod(i0, n), np.mod(i0 + 1, n)
        else:
            lo, hi = np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1)
        lows.append(lo)
        highs.append(hi)
        fracs.append(f)
    indices, weights = [], []
    for corner in itertools.product((0, 1), repeat=grid.dims):
        idx = tuple(highs[a] if c else lows[a] for a, c in enumerate(corner))
        w = np.ones(pts.shape[0])
        for a, c in enumerate(corner):
            w = w * (fracs[a] if c else 1.0 - fracs[a])
        indices.append(np.ravel_multi_index(idx, grid.shape))
        weights.append(w)
    return indices, weights


def deposit(grid: Grid, q: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cloud-in-cell sum of point values onto the grid; the total is conserved exactly."""
    accumulator = np.zeros(grid.size)
    indices, weights = _cic_weights(grid, q)
    for idx, w in zip(indices, weights):
        np.add.at(accumulator, idx, w * values)
    return accumulator.reshape(grid.shape)


def deposit_density(grid: Grid, q: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return deposit(grid, q, weights) / grid.cell_volume


def _phase_on_grid(grid: Grid, q: np.ndarray, action: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if grid.dims == 1 and grid.boundary[0] == "vanishing":
        order = np.argsort(q[:, 0])
        return np.interp(grid.axis_coordinates(0), q[order, 0], action[order])
    total = deposit(grid, q, weights)
    summed = deposit(grid, q, weights * action)
    filled = total > 0
    phase = np.zeros(grid.shape)
    phase[filled] = summed[filled] / total[filled]
    if not np.all(filled):
        mesh = grid.mesh()
        known = np.stack([m[filled] for m in mesh], axis=1)
        missing = np.stack([m[~filled] for m in mesh], axis=1)
        if grid.dims == 1:
            phase[~filled] = np.interp(missing[:, 0], known[:, 0], phase[filled])
        else:
            phase[~filled] = griddata(known, phase[filled], missing, method="nearest")
    return phase


def evolve_classical_hj(
    state0: EpistemicState,
    H: AnyHamiltonian,
    dt: float,
    T: float,
    n_traj: int | None = None,
    *,
    launch: str = "lattice",
    seed: int = 0,
    order: int = DERIVATIVE_ORDER,
    snapshot_stride: int = 0,
) -> tuple[EpistemicState, Trajectories, EvolutionReport]:
    """Method of characteristics for d_t S + H(q, dS) = 0 with continuity.

    ``launch="lattice"`` starts one characteristic per grid point carrying
    rho0 dq; ``launch="random"`` draws ``n_traj`` seeded starting points
    from rho0 with equal weights. Each characteristic also carries one
    displaced companion per axis, giving a Jacobian estimate whose sign
    change flags a caustic.
    """
    op = "dynamics.evolve_classical_hj"
    obs = _as_observable(H)
    grid = state0.grid
    if obs.grid != grid:
        raise ValueError("state and Hamiltonian live on different grids")
    if launch not in LAUNCHES:
        raise ValueError(f"Unknown launch {launch!r}; expected one of {LAUNCHES}")
    steps, dt = _step_count(dt, T)
    dims = grid.dims

    rho0 = state0.density.values
    points = np.stack([m.reshape(-1) for m in grid.mesh()], axis=1)
    if launch == "lattice":
        keep = rho0.reshape(-1) > NODE_EPSILON * float(np.max(rho0))
        q0 = points[keep]
        weights = rho0.reshape(-1)[keep]
        weights = weights / weights.sum()
    else:
        if n_traj is None or n_traj < 1:
            raise ValueError("random launch needs n_traj >= 1")
        rng, jitter_rng = chunk_streams(seed, 0)
        index = sample_positions(state0, rng, n_traj)
        q0 = points[index] + (jitter_rng.random((n_traj, dims)) - 0.5) * np.asarray(grid.spacing)
        weights = np.full(n_traj, 1.0 / n_traj)
    count = q0.shape[0]

    momentum_table = interpolator(
        grid,
        np.stack([state0.phase_gradient(a, order) for a in range(dims)], axis=-1),
        clip=True,
    )
    delta = 1e-3 * min(grid.spacing)
    starts = [q0] + [q0 + delta * np.eye(dims)[j] for j in range(dims)]
    q = np.concatenate(starts)
    p = momentum_table(q)
    s = np.concatenate([interpolator(grid, state0.phase.values, clip=True)(start) for start in starts])
    p_start = p[:count].copy()
    flow = _PhaseSpaceFlow(obs, order)

    def jacobian(positions: np.ndarray) -> np.ndarray:
        base = positions[:count]
        columns = [(positions[(j + 1) * count:(j + 2) * count] - base) / delta for j in range(dims)]
        return np.linalg.det(np.stack(columns, axis=2))

    def derivatives(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        qdot, pdot, energy = flow.rates(q, p)
        return qdot, pdot, np.sum(p * qdot, axis=1) - energy

    def moments(q: np.ndarray, p: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
        base_q, base_p = q[:count], p[:count]
        _, _, energy = flow.rates(base_q, base_p)
        inside = _inside(grid, base_q)
        norm = float(np.sum(weights[inside]))
        return (
            norm,
            float(np.sum(weights * energy)),
            weights @ base_q,
            weights @ base_p,
        )

    def as_state(q: np.ndarray, s: np.ndarray) -> EpistemicState:
        base = q[:count]
        inside = _inside(grid, base)
        escaped = float(np.sum(weights[~inside]))
        if escaped > ESCAPE_TOLERANCE:
            raise DomainError(f"characteristics carrying weight {escaped:.3g} left the grid", where=op)
        rho = deposit_density(grid, base[inside], weights[inside])
        phase = _phase_on_grid(grid, base[inside], s[:count][inside], weights[inside])
        return EpistemicState.from_arrays(grid, rho, phase, hbar=state0.hbar, kind="classical")

    logger.info("Classical HJ run: %d characteristics (%s launch), steps=%d dt=%g", count, launch, steps, dt)
    recorder = _Recorder("classical_hj", snapshot_stride)
    path_times = [0.0]
    path = [q0.copy()]
    norm, energy, mean_q, mean_p = moments(q, p)
    recorder.record(0, 0.0, norm, energy, mean_q, mean_p, lambda: as_state(q, s))

    for step in range(1, steps + 1):
        k1 = derivatives(q, p)
        k2 = derivatives(q + 0.5 * dt * k1[0], p + 0.5 * dt * k1[1])
        k3 = derivatives(q + 0.5 * dt * k2[0], p + 0.5 * dt * k2[1])
        k4 = derivatives(q + dt * k3[0], p + dt * k3[1])
        q = q + (dt / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        p = p + (dt / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        s = s + (dt / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        t = step * dt
        det = jacobian(q)
        if np.any(det <= 0.0):
            raise CausticError(
                f"characteristics cross at t={t:.6g} (Jacobian changes sign for {int(np.sum(det <= 0))} of them)",
                where=op,
            )
        norm, energy, mean_q, mean_p = moments(q, p)
        current_q, current_s = q, s
        last = step == steps
        recorder.record(step, t, norm, energy, mean_q, mean_p, lambda: as_state(current_q, current_s), last=last)
        if snapshot_stride > 0 and (step % snapshot_stride == 0 or last):
            path_times.append(t)
            path.append(q[:count].copy())

    if path_times[-1] != steps * dt:
        path_times.append(steps * dt)
        path.append(q[:count].copy())

    state_T = as_state(q, s)
    trajectories = Trajectories(
        q0=q0,
        p0=p_start,
        q=q[:count],
        p=p[:count],
        action=s[:count],
        weights=weights,
        jacobian=jacobian(q),
        path_times=np.asarray(path_times),
        path=np.stack(path),
    )
    report = recorder.report()
    logger.info("Classical HJ run done: energy defect %.2e", report.energy_defect)
    return state_T, trajectories, report


def _inside(grid: Grid, q: np.ndarray) -> np.ndarray:
    inside = np.ones(q.shape[0], dtype=bool)
    for axis, boundary in enumerate(grid.boundary):
        if boundary == "vanishing":
            inside &= (q[:, axis] >= grid.lower[axis]) & (q[:, axis] <= grid.upper[axis])
    return inside


class EnergySeries(NamedTuple):
    values: np.ndarray
    defect: float


def _as_states(states: EvolutionReport | Sequence[Any], hbar: float | None) -> list[EpistemicState]:
    items = [snap for _, snap in states.snapshots] if isinstance(states, EvolutionReport) else list(states)
    result = []
    for item in items:
        if isinstance(item, ComplexField):
            result.append(from_wavefunction(item.normalized(), 1.0 if hbar is None else hbar))
        elif isinstance(item, EpistemicState):
            result.append(item if hbar is None or item.hbar == hbar else item.with_hbar(hbar))
        else:
            raise TypeError(f"cannot read an epistemic state from {type(item).__name__}")
    return result


def average_energy_series(
    states: EvolutionReport | Sequence[EpistemicState | ComplexField],
    H: AnyHamiltonian,
    hbar: float | None = None,
    *,
    order: int = DERIVATIVE_ORDER,
) -> EnergySeries:
    """Ensemble-average energy of each state and the series' largest relative deviation.

    Wave functions and report snapshots are mapped to (rho, S) first. Quantum
    states include the hbar^2 (d rho / rho)^2 / 8m term, classical ones do not.
    """
    obs = _as_observable(H)
    values = []
    for state in _as_states(states, hbar):
        if np.any(state.interior_node_mask()):
            raise NodeError("state has a node inside its support", where="dynamics.average_energy_series")
        values.append(ensemble_average_closed(obs, state, order=order))
    series = np.asarray(values, dtype=float)
    if series.size == 0:
        return EnergySeries(series, 0.0)
    e0 = float(series[0])
    defect = float(np.max(np.abs(series - e0))) / max(abs(e0), 1e-300)
    return EnergySeries(series, defect)


def energy_rate(
    states: EvolutionReport | Sequence[EpistemicState | ComplexField],
    times: Sequence[float] | np.ndarray,
    H: AnyHamiltonian,
    hbar: float | None = None,
    *,
    order: int = DERIVATIVE_ORDER,
) -> np.ndarray:
    """d<H>/dt by second-order differences of the energy series."""
    series = average_energy_series(states, H, hbar, order=order)
    times = np.asarray(times, dtype=float)
    if times.shape != series.values.shape:
        raise ValueError("need one time per state")
    if times.size < 2:
        raise ValueError("need at least two states to differentiate")
    return np.gradient(series.values, times)


@dataclass(frozen=True)
class ClassicalLimitReport:
    hbars: tuple[float, ...]
    phase_divergence: tuple[float, ...]
    mean_q_divergence: tuple[float, ...]
    mean_p_divergence: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        d = self.phase_divergence
        return tuple(a / b if b > 0 else math.inf for a, b in zip(d, d[1:]))

    @property
    def monotonic(self) -> bool:
        d = self.phase_divergence
        return all(b < a for a, b in zip(d, d[1:]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "hbars": list(self.hbars),
            "phase_divergence": list(self.phase_divergence),
            "mean_q_divergence": list(self.mean_q_divergence),
            "mean_p_divergence": list(self.mean_p_divergence),
            "ratios": list(self.ratios),
            "monotonic": self.monotonic,
        }


def phase_divergence(quantum: EpistemicState, classical: EpistemicState) -> float:
    """RMS of S_Q - S_C weighted by the classical density, constant offset removed."""
    weight = classical.density.values * classical.grid.cell_volume
    weight = weight / weight.sum()
    difference = quantum.phase.values - classical.phase.values
    difference = difference - float(np.sum(weight * difference))
    return math.sqrt(float(np.sum(weight * difference**2)))


def classical_limit_check(
    initial: EpistemicState | ComplexField,
    H: Hamiltonian,
    hbar_sequence: Sequence[float],
    dt: float,
    T: float,
    *,
    scheme: str = "auto",
    order: int = DERIVATIVE_ORDER,
) -> ClassicalLimitReport:
    """Evolve the same (rho0, S0) quantum mechanically for each hbar and classically once.

    A wave function is read at hbar = 1 to fix S0; afterwards only hbar changes.
    """
    state0 = from_wavefunction(initial, 1.0) if isinstance(initial, ComplexField) else initial
    classical, _, classical_report = evolve_classical_hj(state0.as_kind("classical"), H, dt, T, order=order)

    divergences, q_gaps, p_gaps = [], [], []
    for hbar in hbar_sequence:
        psi0 = to_wavefunction(state0.as_kind("quantum").with_hbar(hbar))
        psi_T, report = evolve_schrodinger(psi0, H, dt, T, hbar=hbar, scheme=scheme, order=order)
        quantum = from_wavefunction(psi_T.normalized(), hbar)
        divergences.append(phase_divergence(quantum, classical))
        q_gaps.append(float(np.max(np.abs(report.mean_q - classical_report.mean_q))))
        p_gaps.append(float(np.max(np.abs(report.mean_p - classical_report.mean_p))))
        logger.info("Classical limit: hbar=%g phase divergence %.3e", hbar, divergences[-1])

    return ClassicalLimitReport(
        hbars=tuple(float(h) for h in hbar_sequence),
        phase_divergence=tuple(divergences),
        mean_q_divergence=tuple(q_gaps),
        mean_p_divergence=tuple(p_gaps),
    )
