from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Any, NamedTuple, Sequence
import warnings

import numpy as np
from scipy.special import eval_hermite, gammaln

from .correlation import schmidt_rank
from .dynamics import Trajectories, evolve_classical_hj
from .epistemic import (
    DEFAULT_CHUNK_SIZE,
    DERIVATIVE_ORDER,
    NORMALIZATION_TOLERANCE,
    EpistemicState,
    chunk_streams,
    from_wavefunction,
    map_chunks,
)
from .errors import (
    BornConsistencyError,
    CFLError,
    DomainError,
    OverlapError,
    SeparationWarning,
    SpanError,
)
from .expectation import QuadraticObservable, angular_momentum_z, ensemble_average_closed, quantum_expectation
from .fields import ComplexField, Grid, ScalarField, gradient, spectral_gradient

logger = logging.getLogger(__name__)

GRAM_TOLERANCE = 1e-8
SPAN_TOLERANCE = 1e-6
OVERLAP_EPSILON = 1e-6
BORN_TOLERANCE = 1e-6
SUPPORT_HALF_WIDTH = 6.0
SEPARATION_WIDTHS = 12.0


class Eigensystem(NamedTuple):
    eigenvalues: np.ndarray
    fields: list[ComplexField]


def box_modes(grid: Grid, count: int, eigenvalues: Sequence[float] | None = None) -> Eigensystem:
    """sqrt(2/L) sin(n pi (x - a) / L), n = 1..count, on a 1D vanishing grid.

    Eigenvalues default to the mode index n - 1.
    """
    if grid.dims != 1 or grid.boundary[0] != "vanishing":
        raise ValueError("box modes need a 1D grid with vanishing walls")
    x = grid.axis_coordinates(0)
    length = grid.upper[0] - grid.lower[0]
    fields = [
        ComplexField(grid, math.sqrt(2.0 / length) * np.sin(n * np.pi * (x - grid.lower[0]) / length))
        for n in range(1, count + 1)
    ]
    return Eigensystem(_eigenvalues(count, eigenvalues), fields)


def harmonic_modes(
    grid: Grid,
    count: int,
    omega: float = 1.0,
    mass: float = 1.0,
    hbar: float = 1.0,
    eigenvalues: Sequence[float] | None = None,
) -> Eigensystem:
    """Hermite functions of the 1D oscillator; eigenvalues default to the level index."""
    if grid.dims != 1:
        raise ValueError("harmonic modes need a 1D grid")
    scale = math.sqrt(mass * omega / hbar)
    xi = scale * grid.axis_coordinates(0)
    fields = []
    for n in range(count):
        log_norm = 0.5 * (math.log(scale) - 0.5 * math.log(math.pi) - n * math.log(2.0) - gammaln(n + 1))
        values = math.exp(log_norm) * eval_hermite(n, xi) * np.exp(-0.5 * xi * xi)
        fields.append(ComplexField(grid, values))
    return Eigensystem(_eigenvalues(count, eigenvalues), fields)


def angular_harmonics(
    grid: Grid,
    m_values: Sequence[int],
    radius: float = 1.0,
    hbar: float = 1.0,
    axes: tuple[int, int] = (0, 1),
) -> Eigensystem:
    """r^|m| exp(-r^2 / 2 a^2) exp(i m theta), normalized on the grid; eigenvalues m hbar."""
    ax, ay = (grid.check_axis(a) for a in axes)
    mesh = grid.mesh()
    x, y = mesh[ax], mesh[ay]
    r = np.hypot(x, y) / radius
    theta = np.arctan2(y, x)
    fields = []
    for m in m_values:
        values = r ** abs(int(m)) * np.exp(-0.5 * r * r) * np.exp(1j * int(m) * theta)
        fields.append(ComplexField(grid, values).normalized())
    return Eigensystem(np.array([int(m) * hbar for m in m_values], dtype=float), fields)


def gaussian_pointer(grid: Grid, sigma: float, center: float = 0.0, momentum: float = 0.0, hbar: float = 1.0) -> ComplexField:
    """Pointer packet with |phi|^2 of standard deviation ``sigma``."""
    if grid.dims != 1:
        raise ValueError("pointer lives on a 1D grid")
    if not sigma > 0:
        raise ValueError("pointer width must be positive")
    q = grid.axis_coordinates(0)
    values = np.exp(-((q - center) ** 2) / (4.0 * sigma * sigma) + 1j * momentum * q / hbar)
    return ComplexField(grid, values).normalized()


def pointer_grid(shifts: Sequence[float], sigma: float, *, points_per_sigma: int = 8, margin: float = 8.0) -> Grid:
    """Vanishing 1D grid that holds every shifted pointer packet with ``margin`` widths to spare."""
    lower = min(0.0, *shifts) - margin * sigma
    upper = max(0.0, *shifts) + margin * sigma
    points = max(int(math.ceil((upper - lower) / sigma * points_per_sigma)), 16)
    return Grid.line(lower, upper, points)


def _eigenvalues(count: int, eigenvalues: Sequence[float] | None) -> np.ndarray:
    if eigenvalues is None:
        return np.arange(count, dtype=float)
    values = np.asarray(eigenvalues, dtype=float)
    if values.shape != (count,):
        raise ValueError(f"need {count} eigenvalues, got {values.shape[0]}")
    return values


def _stack(fields: Sequence[ComplexField]) -> np.ndarray:
    return np.stack([np.asarray(f.values).reshape(-1) for f in fields])


@dataclass(frozen=True, eq=False)
class MeasurementSetup:
    """Observable spectral data, pointer packet, coupling g and duration T."""

    eigenvalues: np.ndarray
    eigenfields: tuple[ComplexField, ...]
    pointer: ComplexField
    coupling: float
    duration: float

    def __post_init__(self) -> None:
        eigenvalues = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        fields = tuple(self.eigenfields)
        if len(fields) == 0 or len(fields) != eigenvalues.shape[0]:
            raise ValueError("need one eigenfield per eigenvalue")
        grid = fields[0].grid
        if any(f.grid != grid for f in fields):
            raise ValueError("eigenfields live on different grids")
        if self.pointer.grid.dims != 1:
            raise ValueError("pointer lives on a 1D grid")
        if abs(self.pointer.norm() - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"pointer packet norm is {self.pointer.norm():.12g}, expected 1")
        if not (math.isfinite(self.coupling) and math.isfinite(self.duration)) or self.duration < 0:
            raise ValueError("coupling must be finite and duration non-negative")
        gram = _stack(fields).conj() @ _stack(fields).T * grid.cell_volume
        deviation = float(np.max(np.abs(gram - np.eye(len(fields)))))
        if deviation > GRAM_TOLERANCE:
            raise ValueError(f"eigenfields are not orthonormal (Gram deviation {deviation:.3e})")
        object.__setattr__(self, "eigenvalues", eigenvalues)
        object.__setattr__(self, "eigenfields", fields)

    @classmethod
    def from_eigensystem(
        cls, eigensystem: Eigensystem, pointer: ComplexField, coupling: float, duration: float
    ) -> MeasurementSetup:
        return cls(eigensystem.eigenvalues, tuple(eigensystem.fields), pointer, coupling, duration)

    @property
    def system_grid(self) -> Grid:
        return self.eigenfields[0].grid

    @property
    def pointer_grid(self) -> Grid:
        return self.pointer.grid

    @property
    def shifts(self) -> np.ndarray:
        return self.coupling * self.eigenvalues * self.duration

    @property
    def gram(self) -> np.ndarray:
        basis = _stack(self.eigenfields)
        return basis.conj() @ basis.T * self.system_grid.cell_volume

    def pointer_moments(self) -> tuple[float, float]:
        """Centre and standard deviation of |phi_pointer|^2."""
        return _packet_moments(self.pointer.grid, np.asarray(self.pointer.values))


def _packet_moments(grid: Grid, packet: np.ndarray) -> tuple[float, float]:
    q = grid.axis_coordinates(0)
    weight = np.abs(packet) ** 2 * grid.cell_volume
    total = float(np.sum(weight))
    centre = float(np.sum(q * weight)) / total
    variance = float(np.sum((q - centre) ** 2 * weight)) / total
    return centre, math.sqrt(variance)


def shift_packet(packet: ComplexField, shift: float) -> ComplexField:
    """phi(q - shift) by a Fourier phase ramp on a zero-padded copy of the pointer grid."""
    grid = packet.grid
    n, h = grid.points[0], grid.spacing[0]
    extra = int(math.ceil(abs(shift) / h))
    total = 1 << int(math.ceil(math.log2(2 * n + 2 * extra)))
    lead = (total - n) // 2
    buffer = np.zeros(total, dtype=complex)
    buffer[lead:lead + n] = packet.values
    k = 2.0 * np.pi * np.fft.fftfreq(total, d=h)
    moved = np.fft.ifft(np.fft.fft(buffer) * np.exp(-1j * k * shift))[lead:lead + n]
    result = ComplexField(grid, moved)
    lost = packet.norm() - result.norm()
    if lost > NORMALIZATION_TOLERANCE:
        raise DomainError(
            f"pointer shifted by {shift:g} leaves the pointer grid (norm loss {lost:.3g})",
            where="measurement.shift_packet",
        )
    return result


@dataclass(frozen=True, eq=False)
class JointState:
    """sum_k c_k phi_k(q_S) phi_pointer(q_pointer - g o_k T) kept in the eigenbasis."""

    setup: MeasurementSetup
    coefficients: np.ndarray
    packets: np.ndarray = field(repr=False)
    supports: np.ndarray
    overlaps: np.ndarray = field(repr=False)
    separated: bool

    @property
    def max_overlap(self) -> float:
        return float(np.max(self.overlaps, initial=0.0))

    def outcome_values(self) -> np.ndarray:
        return np.unique(np.round(self.setup.eigenvalues, 12))

    def to_field(self) -> ComplexField:
        """Psi(q_S, q_pointer) on the product grid, system axes first."""
        system = _stack(self.setup.eigenfields)
        amplitude = np.einsum("k,ks,kp->sp", self.coefficients, system, self.packets)
        grid = Grid.product(self.setup.system_grid, self.setup.pointer_grid)
        return ComplexField(grid, amplitude.reshape(grid.shape))

    def pointer_marginal(self) -> ScalarField:
        """Integral of |Psi|^2 over the system coordinates."""
        weights = np.outer(self.coefficients.conj(), self.coefficients) * self.setup.gram
        density = np.einsum("kl,kp,lp->p", weights, self.packets.conj(), self.packets).real
        return ScalarField(self.setup.pointer_grid, np.maximum(density, 0.0))


def decompose(psi_S: ComplexField, setup: MeasurementSetup) -> np.ndarray:
    """c_k = <phi_k | psi_S>; SpanError when the eigenbasis misses part of psi_S."""
    if psi_S.grid != setup.system_grid:
        raise ValueError("system state and eigenfields live on different grids")
    basis = _stack(setup.eigenfields)
    flat = np.asarray(psi_S.values).reshape(-1)
    dv = setup.system_grid.cell_volume
    coefficients = basis.conj() @ flat * dv
    residual = flat - coefficients @ basis
    size = math.sqrt(float(np.sum(np.abs(residual) ** 2)) * dv)
    if size > SPAN_TOLERANCE:
        raise SpanError(
            f"eigenbasis leaves a residual of norm {size:.3e} (tolerance {SPAN_TOLERANCE:g})",
            where="measurement.decompose",
        )
    return coefficients


def _supports(setup: MeasurementSetup) -> np.ndarray:
    centre, sigma = setup.pointer_moments()
    half = SUPPORT_HALF_WIDTH * sigma
    return np.array([[centre + s - half, centre + s + half] for s in setup.shifts])


def _packet_overlaps(setup: MeasurementSetup, packets: np.ndarray) -> np.ndarray:
    moduli = np.abs(packets)
    overlaps = moduli @ moduli.T * setup.pointer_grid.cell_volume
    distinct = ~np.isclose(setup.eigenvalues[:, None], setup.eigenvalues[None, :], rtol=0.0, atol=1e-12)
    return np.where(distinct, overlaps, 0.0)


def evolve_measurement(psi_S: ComplexField, setup: MeasurementSetup) -> JointState:
    """Exact branch translation: H_I = g O_S p_pointer moves branch k by g o_k T."""
    coefficients = decompose(psi_S, setup)
    packets = np.stack([np.asarray(shift_packet(setup.pointer, s).values) for s in setup.shifts])
    overlaps = _packet_overlaps(setup, packets)
    separated = bool(np.max(overlaps, initial=0.0) <= OVERLAP_EPSILON)
    if not separated:
        message = (
            f"pointer packets overlap up to {np.max(overlaps):.3e} > {OVERLAP_EPSILON:g}; "
            "outcomes are not registered unambiguously"
        )
        logger.warning("Measurement separation failed: %s", message)
        warnings.warn(message, SeparationWarning, stacklevel=2)
    return JointState(
        setup=setup,
        coefficients=coefficients,
        packets=packets,
        supports=_supports(setup),
        overlaps=overlaps,
        separated=separated,
    )


@dataclass(frozen=True)
class BornProbabilities:
    eigenvalues: np.ndarray
    probabilities: np.ndarray
    coefficient_route: np.ndarray
    cross_term: float

    @property
    def total(self) -> float:
        return float(np.sum(self.probabilities))

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.probabilities - self.coefficient_route)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "probabilities": self.probabilities.tolist(),
            "coefficient_route": self.coefficient_route.tolist(),
            "cross_term": self.cross_term,
            "total": self.total,
            "max_deviation": self.max_deviation,
        }


def _require_separated(joint: JointState, op: str) -> None:
    if not joint.separated:
        raise OverlapError(
            f"pointer packets overlap up to {joint.max_overlap:.3e}; outcome supports are ambiguous",
            where=op,
        )


def born_probabilities(joint: JointState) -> BornProbabilities:
    """P(o_j) as the integral of |Psi|^2 over q_pointer in the support of branch j.

    The quadrature runs over the full double sum of branches; the off-diagonal
    part is reported as ``cross_term`` and the result is checked against |c_j|^2.
    """
    op = "measurement.born_probabilities"
    _require_separated(joint, op)
    setup = joint.setup
    q = setup.pointer_grid.axis_coordinates(0)
    dv = setup.pointer_grid.cell_volume
    values = joint.outcome_values()
    rounded = np.round(setup.eigenvalues, 12)
    c = joint.coefficients
    weights = np.outer(c.conj(), c) * setup.gram

    probabilities = np.empty(values.shape[0])
    expected = np.empty(values.shape[0])
    cross = 0.0
    for j, value in enumerate(values):
        members = np.flatnonzero(rounded == value)
        lower, upper = joint.supports[members[0]]
        inside = (q >= lower) & (q <= upper)
        local = joint.packets[:, inside]
        support_overlaps = local.conj() @ local.T * dv
        terms = (weights * support_overlaps).real
        probabilities[j] = float(np.sum(terms))
        cross = max(cross, float(abs(np.sum(terms) - np.trace(terms))))
        expected[j] = float(np.sum(np.abs(c[members]) ** 2))

    result = BornProbabilities(values, probabilities, expected, cross)
    if result.max_deviation > BORN_TOLERANCE:
        raise BornConsistencyError(
            f"support quadrature differs from |c_j|^2 by {result.max_deviation:.3e}",
            where=op,
        )
    return result


class Outcome(NamedTuple):
    eigenvalue: float
    probability: float
    state: ComplexField


def _collapsed(joint: JointState, value: float) -> ComplexField:
    members = np.flatnonzero(np.round(joint.setup.eigenvalues, 12) == value)
    basis = _stack([joint.setup.eigenfields[k] for k in members])
    amplitude = joint.coefficients[members] @ basis
    field_ = ComplexField(joint.setup.system_grid, amplitude.reshape(joint.setup.system_grid.shape))
    return field_.normalized()


def sample_outcomes(
    joint: JointState,
    n: int,
    seed: int,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> np.ndarray:
    """Indices into ``joint.outcome_values()`` drawn from the Born probabilities."""
    _require_separated(joint, "measurement.sample_outcomes")
    probabilities = born_probabilities(joint).probabilities
    probabilities = probabilities / probabilities.sum()

    def _chunk(chunk: int, size: int) -> np.ndarray:
        rng, _ = chunk_streams(seed, chunk)
        return rng.choice(probabilities.shape[0], size=size, p=probabilities)

    parts = map_chunks(_chunk, n, chunk_size=chunk_size, workers=workers)
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def sample_outcome(joint: JointState, seed: int) -> Outcome:
    """One measurement run: the outcome and the effective system state after it."""
    _require_separated(joint, "measurement.sample_outcome")
    born = born_probabilities(joint)
    index = int(sample_outcomes(joint, 1, seed)[0])
    value = float(born.eigenvalues[index])
    return Outcome(value, float(born.probabilities[index]), _collapsed(joint, value))


def evolve_measurement_direct(
    psi_S: ComplexField,
    setup: MeasurementSetup,
    dt: float | None = None,
    *,
    order: int = DERIVATIVE_ORDER,
) -> ComplexField:
    """RK4 integration of d_t Psi = -g O_S d_pointer Psi on the product grid.

    O_S acts through its spectral projectors; this is the validation oracle
    for the exact branch translation.
    """
    op = "measurement.evolve_measurement_direct"
    coefficients = decompose(psi_S, setup)
    system = _stack(setup.eigenfields)
    grid = Grid.product(setup.system_grid, setup.pointer_grid)
    n_system = setup.system_grid.size
    h = setup.pointer_grid.spacing[0]
    rate = abs(setup.coupling) * float(np.max(np.abs(setup.eigenvalues)))
    T = setup.duration

    psi = np.outer(coefficients @ system, np.asarray(setup.pointer.values))
    if rate == 0.0 or T == 0.0:
        return ComplexField(grid, psi.reshape(grid.shape))
    if dt is None:
        dt = 0.5 * h / rate
    limit = 2.8 * h / (1.4 * rate)
    if dt > limit:
        raise CFLError(f"dt={dt:.3g} exceeds the RK4 bound {limit:.3g}", where=op)
    steps = max(int(math.ceil(T / dt)), 1)
    dt = T / steps
    dv = setup.system_grid.cell_volume
    pointer_axis = grid.dims - 1

    def apply(values: np.ndarray) -> np.ndarray:
        derivative = gradient(ComplexField(grid, values.reshape(grid.shape)), pointer_axis, order).values
        derivative = derivative.reshape(n_system, -1)
        projected = setup.eigenvalues[:, None] * (system.conj() @ derivative * dv)
        return -setup.coupling * (system.T @ projected)

    for _ in range(steps):
        k1 = apply(psi)
        k2 = apply(psi + 0.5 * dt * k1)
        k3 = apply(psi + 0.5 * dt * k2)
        k4 = apply(psi + dt * k3)
        psi = psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    logger.debug("Direct measurement integration: %d RK4 steps on grid %s", steps, grid.points)
    return ComplexField(grid, psi.reshape(grid.shape))


def interaction_observable(grid: Grid, coupling: float, axes: tuple[int, int] = (0, 1), pointer_axis: int = 2) -> QuadraticObservable:
    """g (x p_y - y p_x) p_pointer as a QuadraticObservable on the joint grid."""
    ax, ay, ap = (grid.check_axis(a) for a in (*axes, pointer_axis))
    mesh = grid.mesh()
    metric = np.zeros((grid.dims, grid.dims, *grid.shape))
    metric[ay, ap] = metric[ap, ay] = coupling * mesh[ax]
    metric[ax, ap] = metric[ap, ax] = -coupling * mesh[ay]
    return QuadraticObservable.build(grid, metric=metric, label="angular_interaction")


def lz_residual(field_: ComplexField, m: int, hbar: float = 1.0, axes: tuple[int, int] = (0, 1)) -> float:
    """|| L_z phi - m hbar phi || with spectral derivatives."""
    ax, ay = axes
    mesh = field_.grid.mesh()
    lz = -1j * hbar * (mesh[ax] * spectral_gradient(field_, ay).values - mesh[ay] * spectral_gradient(field_, ax).values)
    difference = lz - m * hbar * np.asarray(field_.values)
    return math.sqrt(float(np.sum(np.abs(difference) ** 2)) * field_.grid.cell_volume)


def _angular_osmotic_rms(psi_S: ComplexField, axes: tuple[int, int]) -> float:
    """sqrt of the integral of (d_theta rho / rho)^2 rho over the system plane."""
    ax, ay = axes
    grid = psi_S.grid
    rho = np.abs(psi_S.values) ** 2
    density = ScalarField(grid, rho)
    mesh = grid.mesh()
    d_theta = mesh[ax] * spectral_gradient(density, ay).values - mesh[ay] * spectral_gradient(density, ax).values
    mask = rho > 1e-12 * float(np.max(rho))
    integrand = np.where(mask, d_theta**2 / np.where(mask, rho, 1.0), 0.0)
    return math.sqrt(float(np.sum(integrand)) * grid.cell_volume)


def _pointer_osmotic_rms(pointer: ComplexField) -> float:
    rho = np.abs(pointer.values) ** 2
    derivative = gradient(ScalarField(pointer.grid, rho), 0, DERIVATIVE_ORDER).values
    mask = rho > 1e-12 * float(np.max(rho))
    integrand = np.where(mask, derivative**2 / np.where(mask, rho, 1.0), 0.0)
    return math.sqrt(float(np.sum(integrand)) * pointer.grid.cell_volume)


@dataclass(frozen=True)
class AngularMomentumReport:
    m_values: tuple[int, ...]
    hbar: float
    shifts: tuple[float, ...]
    packet_centres: tuple[float, ...]
    centre_error: float
    probabilities: tuple[float, ...]
    expected_probabilities: tuple[float, ...]
    lz_residual: float
    lz_ensemble_average: float
    lz_expectation: float
    interaction_quantum_term: float
    schmidt_rank: int
    separated: bool

    @property
    def discrete(self) -> bool:
        """Every branch landed on its multiple of g hbar T."""
        return self.centre_error <= 1e-3

    def to_dict(self) -> dict[str, Any]:
        return {
            "m_values": list(self.m_values),
            "hbar": self.hbar,
            "shifts": list(self.shifts),
            "packet_centres": list(self.packet_centres),
            "centre_error": self.centre_error,
            "discrete": self.discrete,
            "probabilities": list(self.probabilities),
            "expected_probabilities": list(self.expected_probabilities),
            "lz_residual": self.lz_residual,
            "lz_ensemble_average": self.lz_ensemble_average,
            "lz_expectation": self.lz_expectation,
            "interaction_quantum_term": self.interaction_quantum_term,
            "schmidt_rank": self.schmidt_rank,
            "separated": self.separated,
        }


def angular_system_grid(m_values: Sequence[int], radius: float = 1.0, points: int = 64) -> Grid:
    extent = radius * (math.sqrt(max(abs(int(m)) for m in m_values)) + 5.5)
    return Grid.cube(-extent, extent, points, 2)


def angular_momentum_scenario(
    m_values: Sequence[int],
    weights: Sequence[complex],
    coupling: float,
    duration: float,
    pointer: ComplexField | None = None,
    *,
    hbar: float = 1.0,
    radius: float = 1.0,
    grid: Grid | None = None,
) -> tuple[JointState, AngularMomentumReport]:
    """Measure L_z of a superposition of angular harmonics with a von Neumann pointer.

    Without an explicit pointer a Gaussian is used whose width keeps adjacent
    branches twelve widths apart.
    """
    if len(m_values) != len(weights) or not m_values:
        raise ValueError("need one weight per angular number")
    if len(set(int(m) for m in m_values)) != len(m_values):
        raise ValueError("angular numbers must be distinct")
    amplitudes = np.asarray(weights, dtype=complex)
    amplitudes = amplitudes / np.linalg.norm(amplitudes)
    grid = grid or angular_system_grid(m_values, radius)
    eigensystem = angular_harmonics(grid, m_values, radius, hbar)

    if pointer is None:
        spacing = abs(coupling) * hbar * duration
        sigma = spacing / SEPARATION_WIDTHS if spacing > 0 else 1.0
        shifts = [coupling * m * hbar * duration for m in m_values]
        pointer = gaussian_pointer(pointer_grid(shifts, sigma), sigma)
    setup = MeasurementSetup.from_eigensystem(eigensystem, pointer, coupling, duration)

    psi_S = ComplexField(grid, amplitudes @ _stack(eigensystem.fields)).normalized()
    joint = evolve_measurement(psi_S, setup)

    centre0, _ = setup.pointer_moments()
    centres = [_packet_moments(setup.pointer_grid, joint.packets[k])[0] for k in range(len(m_values))]
    spacing = abs(coupling) * hbar * duration
    errors = [abs(c - (centre0 + s)) for c, s in zip(centres, setup.shifts)]
    centre_error = max(errors) / spacing if spacing > 0 else max(errors)

    if joint.separated:
        born = born_probabilities(joint)
        probabilities = tuple(float(p) for p in born.probabilities)
        expected = tuple(float(p) for p in born.coefficient_route)
    else:
        probabilities = ()
        expected = tuple(float(abs(a) ** 2) for a in amplitudes)

    lz = angular_momentum_z(grid)
    state = from_wavefunction(psi_S, hbar)
    interaction_term = (
        abs(coupling) * hbar**2 / 4.0 * _angular_osmotic_rms(psi_S, (0, 1)) * _pointer_osmotic_rms(pointer)
    )
    report = AngularMomentumReport(
        m_values=tuple(int(m) for m in m_values),
        hbar=hbar,
        shifts=tuple(float(s) for s in setup.shifts),
        packet_centres=tuple(centres),
        centre_error=float(centre_error),
        probabilities=probabilities,
        expected_probabilities=expected,
        lz_residual=max(lz_residual(f, int(m), hbar) for f, m in zip(eigensystem.fields, m_values)),
        lz_ensemble_average=float(ensemble_average_closed(lz, state)),
        lz_expectation=float(quantum_expectation(lz, psi_S, hbar).real),
        interaction_quantum_term=float(interaction_term),
        schmidt_rank=schmidt_rank(joint.to_field(), split=grid.dims),
        separated=joint.separated,
    )
    logger.info(
        "Angular momentum measurement: m=%s shifts=%s centre error %.2e rank %d",
        list(report.m_values),
        [round(s, 6) for s in report.shifts],
        report.centre_error,
        report.schmidt_rank,
    )
    return joint, report


def counterfactual_initial_state(psi_S: ComplexField, pointer: ComplexField, hbar: float = 1.0) -> EpistemicState:
    """(rho, S) of psi_S x phi_pointer on the joint grid."""
    grid = Grid.product(psi_S.grid, pointer.grid)
    amplitude = np.multiply.outer(np.asarray(psi_S.values), np.asarray(pointer.values))
    return from_wavefunction(ComplexField(grid, amplitude).normalized(), hbar)


def classical_counterfactual_hj(
    state0: EpistemicState,
    coupling: float,
    duration: float,
    *,
    steps: int = 10,
    axes: tuple[int, int] = (0, 1),
    pointer_axis: int = 2,
) -> tuple[EpistemicState, Trajectories]:
    """Separable-xi outcome: classical Hamilton-Jacobi flow under g (x p_y - y p_x) p_pointer.

    No quantum potential acts, so the pointer moves by g T d_theta S at each
    system point and no discrete packets form.
    """
    grid = state0.grid
    if grid.dims != 3:
        raise ValueError("the counterfactual runs on a (x, y, pointer) grid")
    obs = interaction_observable(grid, coupling, axes, pointer_axis)
    if duration == 0.0:
        _, trajectories, _ = evolve_classical_hj(state0.as_kind("classical"), obs, 1.0, 0.0)
        return state0.as_kind("classical"), trajectories
    state_T, trajectories, _ = evolve_classical_hj(state0.as_kind("classical"), obs, duration / steps, duration)
    return state_T, trajectories


def marginal(state: EpistemicState, axis: int) -> ScalarField:
    """Density of one coordinate with all others integrated out."""
    grid = state.grid
    axis = grid.check_axis(axis)
    others = tuple(a for a in range(grid.dims) if a != axis)
    volume = float(np.prod([grid.spacing[a] for a in others]))
    values = np.sum(state.density.values, axis=others) * volume
    line = Grid.line(grid.lower[axis], grid.upper[axis], grid.points[axis], grid.boundary[axis])
    return ScalarField(line, values)
