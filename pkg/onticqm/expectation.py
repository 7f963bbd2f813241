from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Any, NamedTuple, Sequence

import numpy as np
import sympy

from .epistemic import (
    DEFAULT_CHUNK_SIZE,
    DERIVATIVE_ORDER,
    EpistemicState,
    OnticEnsemble,
    OnticSample,
    XiModel,
    draw_ensemble,
)
from .errors import DomainError, NodeError, ObservableOrderError
from .fields import ComplexField, Grid, ScalarField, gradient, integrate, interpolate

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-12


def _as_array(grid: Grid, value: Any) -> np.ndarray:
    if isinstance(value, ScalarField):
        if value.grid != grid:
            raise ValueError("observable component lives on another grid")
        return np.asarray(value.values, dtype=float)
    return np.broadcast_to(np.asarray(value, dtype=float), grid.shape).astype(float)


@dataclass(frozen=True, eq=False)
class QuadraticObservable:
    """O(p, q) = 1/2 g^ij (p_i - A_i)(p_j - A_j) + b^i p_i + V.

    Quantum ordering is the sandwich 1/2 (p - A)_i g^ij (p - A)_j plus the
    symmetric 1/2 (b p + p b) for the linear part.
    """

    grid: Grid
    metric: np.ndarray = field(repr=False)
    gauge: np.ndarray = field(repr=False)
    linear: np.ndarray = field(repr=False)
    potential: np.ndarray = field(repr=False)
    label: str = "custom"

    def __post_init__(self) -> None:
        dims = self.grid.dims
        shape = self.grid.shape
        metric = np.broadcast_to(np.asarray(self.metric, dtype=float), (dims, dims, *shape)).copy()
        gauge = np.broadcast_to(np.asarray(self.gauge, dtype=float), (dims, *shape)).copy()
        linear = np.broadcast_to(np.asarray(self.linear, dtype=float), (dims, *shape)).copy()
        potential = np.broadcast_to(np.asarray(self.potential, dtype=float), shape).copy()
        for name, arr in (("metric", metric), ("gauge", gauge), ("linear", linear), ("potential", potential)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"observable {self.label!r} has non-finite {name}")
            arr.setflags(write=False)
        if np.max(np.abs(metric - np.swapaxes(metric, 0, 1)), initial=0.0) > SYMMETRY_TOLERANCE:
            raise ValueError(f"observable {self.label!r} has a non-symmetric metric")
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "gauge", gauge)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "potential", potential)

    @classmethod
    def build(
        cls,
        grid: Grid,
        *,
        metric: Sequence[Sequence[Any]] | np.ndarray | None = None,
        gauge: Sequence[Any] | np.ndarray | None = None,
        linear: Sequence[Any] | np.ndarray | None = None,
        potential: Any = 0.0,
        label: str = "custom",
    ) -> QuadraticObservable:
        dims = grid.dims
        shape = grid.shape

        def _vector(raw: Any) -> np.ndarray:
            if raw is None:
                return np.zeros((dims, *shape))
            return np.stack([_as_array(grid, raw[i]) for i in range(dims)])

        if metric is None:
            g = np.zeros((dims, dims, *shape))
        else:
            g = np.stack([np.stack([_as_array(grid, metric[i][j]) for j in range(dims)]) for i in range(dims)])
        return cls(
            grid=grid,
            metric=g,
            gauge=_vector(gauge),
            linear=_vector(linear),
            potential=_as_array(grid, potential),
            label=label,
        )


def position(grid: Grid, axis: int = 0) -> QuadraticObservable:
    axis = grid.check_axis(axis)
    return QuadraticObservable.build(grid, potential=grid.mesh()[axis], label=f"q{axis}")


def momentum(grid: Grid, axis: int = 0) -> QuadraticObservable:
    axis = grid.check_axis(axis)
    b = [0.0] * grid.dims
    b[axis] = 1.0
    return QuadraticObservable.build(grid, linear=b, label=f"p{axis}")


def kinetic(grid: Grid, masses: float | Sequence[float] = 1.0) -> QuadraticObservable:
    masses = per_axis_masses(grid, masses)
    metric = [[(1.0 / masses[i]) if i == j else 0.0 for j in range(grid.dims)] for i in range(grid.dims)]
    return QuadraticObservable.build(grid, metric=metric, label="kinetic")


def harmonic(grid: Grid, omega: float = 1.0, masses: float | Sequence[float] = 1.0) -> QuadraticObservable:
    masses = per_axis_masses(grid, masses)
    mesh = grid.mesh()
    potential = sum(0.5 * masses[a] * omega**2 * mesh[a] ** 2 for a in range(grid.dims))
    metric = [[(1.0 / masses[i]) if i == j else 0.0 for j in range(grid.dims)] for i in range(grid.dims)]
    return QuadraticObservable.build(grid, metric=metric, potential=potential, label="harmonic")


def angular_momentum_z(grid: Grid, axes: tuple[int, int] = (0, 1)) -> QuadraticObservable:
    """L_z = x p_y - y p_x in the plane spanned by ``axes``."""
    ax, ay = (grid.check_axis(a) for a in axes)
    mesh = grid.mesh()
    b: list[Any] = [0.0] * grid.dims
    b[ax] = -mesh[ay]
    b[ay] = mesh[ax]
    return QuadraticObservable.build(grid, linear=b, label="angular_momentum_z")


def momentum_product(grid: Grid, i: int = 0, j: int = 1) -> QuadraticObservable:
    i = grid.check_axis(i)
    j = grid.check_axis(j)
    metric: list[list[float]] = [[0.0] * grid.dims for _ in range(grid.dims)]
    if i == j:
        metric[i][i] = 2.0
    else:
        metric[i][j] = metric[j][i] = 1.0
    return QuadraticObservable.build(grid, metric=metric, label=f"p{i}p{j}")


def centered_momentum_square(grid: Grid, axis: int = 0, center: float = 0.0) -> QuadraticObservable:
    axis = grid.check_axis(axis)
    metric: list[list[float]] = [[0.0] * grid.dims for _ in range(grid.dims)]
    metric[axis][axis] = 2.0
    gauge = [0.0] * grid.dims
    gauge[axis] = center
    return QuadraticObservable.build(grid, metric=metric, gauge=gauge, label=f"(p{axis}-{center:g})^2")


def from_expression(grid: Grid, expression: str, label: str | None = None) -> QuadraticObservable:
    """Parse a polynomial in momenta p0..p{N-1} with q0..q{N-1}-dependent coefficients."""
    dims = grid.dims
    qs = sympy.symbols(f"q0:{dims}")
    ps = sympy.symbols(f"p0:{dims}")
    names = {str(s): s for s in (*qs, *ps)}
    try:
        expr = sympy.sympify(expression, locals=names)
    except (sympy.SympifyError, TypeError, SyntaxError) as exc:
        raise ValueError(f"cannot parse observable expression {expression!r}") from exc

    unknown = expr.free_symbols - set(qs) - set(ps)
    if unknown:
        raise ValueError(f"observable expression uses unknown symbols {sorted(map(str, unknown))}")
    try:
        poly = sympy.Poly(sympy.expand(expr), *ps)
    except sympy.PolynomialError as exc:
        raise ObservableOrderError(
            f"observable {expression!r} is not polynomial in the momenta", where="expectation.from_expression"
        ) from exc
    if poly.total_degree() > 2:
        raise ObservableOrderError(
            f"observable {expression!r} is of order {poly.total_degree()} in the momenta; at most 2 is supported",
            where="expectation.from_expression",
        )

    mesh = grid.mesh()

    def _evaluate(coeff: sympy.Expr) -> np.ndarray:
        fn = sympy.lambdify(qs, coeff, modules="numpy")
        return np.broadcast_to(np.asarray(fn(*mesh), dtype=float), grid.shape)

    metric = np.zeros((dims, dims, *grid.shape))
    linear = np.zeros((dims, *grid.shape))
    potential = np.zeros(grid.shape)
    for powers, coeff in poly.terms():
        degree = sum(powers)
        values = _evaluate(coeff)
        if degree == 0:
            potential = potential + values
            continue
        hot = [a for a, k in enumerate(powers) if k]
        if degree == 1:
            linear[hot[0]] += values
        elif len(hot) == 1:
            metric[hot[0], hot[0]] += 2.0 * values
        else:
            i, j = hot
            metric[i, j] += values
            metric[j, i] += values
    return QuadraticObservable(
        grid=grid,
        metric=metric,
        gauge=np.zeros((dims, *grid.shape)),
        linear=linear,
        potential=potential,
        label=label or expression,
    )


def per_axis_masses(grid: Grid, masses: float | Sequence[float]) -> tuple[float, ...]:
    if isinstance(masses, (int, float)):
        values = (float(masses),) * grid.dims
    else:
        values = tuple(float(m) for m in masses)
    if len(values) != grid.dims or any(not m > 0 for m in values):
        raise ValueError("need one positive mass per axis")
    return values


def _classical_value(
    metric: np.ndarray,
    gauge: np.ndarray,
    linear: np.ndarray,
    potential: np.ndarray,
    p: np.ndarray,
) -> np.ndarray:
    # leading axis of metric/gauge/linear/p runs over degrees of freedom
    shifted = p - gauge
    quad = 0.5 * np.einsum("ij...,i...,j...->...", metric, shifted, shifted)
    return quad + np.einsum("i...,i...->...", linear, p) + potential


def evaluate(obs: QuadraticObservable, sample: OnticSample) -> float:
    grid = obs.grid
    q = np.asarray(sample.q, dtype=float).reshape(1, grid.dims)
    if not grid.contains(q)[0]:
        raise DomainError(f"sample position {q[0].tolist()} lies outside the grid", where="expectation.evaluate")

    def _at(arr: np.ndarray) -> float:
        return float(interpolate(ScalarField(grid, arr), q)[0])

    dims = grid.dims
    metric = np.array([[_at(obs.metric[i, j]) for j in range(dims)] for i in range(dims)])
    gauge = np.array([_at(obs.gauge[i]) for i in range(dims)])
    linear = np.array([_at(obs.linear[i]) for i in range(dims)])
    potential = np.array(_at(obs.potential))
    p = np.asarray(sample.p, dtype=float).reshape(dims)
    return float(_classical_value(metric, gauge, linear, potential, p))


def evaluate_ensemble(obs: QuadraticObservable, ensemble: OnticEnsemble) -> np.ndarray:
    """Vectorized evaluate for ensembles drawn on the observable's grid points."""
    dims = obs.grid.dims
    idx = ensemble.index
    metric = obs.metric.reshape(dims, dims, -1)[:, :, idx]
    gauge = obs.gauge.reshape(dims, -1)[:, idx]
    linear = obs.linear.reshape(dims, -1)[:, idx]
    potential = obs.potential.reshape(-1)[idx]
    return _classical_value(metric, gauge, linear, potential, ensemble.p.T)


class Estimate(NamedTuple):
    value: float
    stderr: float


def mean_and_stderr(values: np.ndarray) -> Estimate:
    n = int(values.shape[0])
    if n < 2:
        raise ValueError("need at least two samples for a standard error")
    mean = math.fsum(values) / n
    variance = math.fsum((values - mean) ** 2) / (n - 1)
    return Estimate(mean, math.sqrt(variance / n))


def ensemble_average_mc(
    obs: QuadraticObservable,
    state: EpistemicState,
    model: XiModel,
    n: int,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
    order: int = DERIVATIVE_ORDER,
) -> Estimate:
    if n < 2:
        raise ValueError("Monte Carlo average needs n >= 2")
    if obs.grid != state.grid:
        raise ValueError("observable and state live on different grids")
    ensemble = draw_ensemble(state, model, n, chunk_size=chunk_size, workers=workers, order=order)
    return mean_and_stderr(evaluate_ensemble(obs, ensemble))


def _momentum_fields(state: EpistemicState, order: int) -> tuple[np.ndarray, np.ndarray]:
    dims = state.grid.dims
    drift = np.stack([state.phase_gradient(a, order) for a in range(dims)])
    osmotic = np.stack([state.osmotic(a, order) for a in range(dims)])
    return drift, osmotic


def _node_guard(state: EpistemicState, exclude_nodes: bool, op: str, order: int) -> None:
    if not exclude_nodes:
        state.check_nodes(order=order, op=op)


def quantum_term(
    obs: QuadraticObservable,
    state: EpistemicState,
    hbar: float | None = None,
    *,
    order: int = DERIVATIVE_ORDER,
    exclude_nodes: bool = True,
) -> float:
    """Integral of (hbar^2/8) g^ij (d_i rho/rho)(d_j rho/rho) rho: the xi-generated part."""
    hbar = state.hbar if hbar is None else hbar
    _node_guard(state, exclude_nodes, "expectation.quantum_term", order)
    _, osmotic = _momentum_fields(state, order)
    density = state.density.values
    term = (hbar**2 / 8.0) * np.einsum("ij...,i...,j...->...", obs.metric, osmotic, osmotic) * density
    return integrate(ScalarField(state.grid, term))


def ensemble_average_closed(
    obs: QuadraticObservable,
    state: EpistemicState,
    hbar: float | None = None,
    *,
    order: int = DERIVATIVE_ORDER,
    exclude_nodes: bool = True,
) -> float:
    """Closed-form average after integrating out xi (first two moments only)."""
    if obs.grid != state.grid:
        raise ValueError("observable and state live on different grids")
    hbar = state.hbar if hbar is None else hbar
    _node_guard(state, exclude_nodes, "expectation.ensemble_average_closed", order)
    drift, _ = _momentum_fields(state, order)
    density = state.density.values
    classical = _classical_value(obs.metric, obs.gauge, obs.linear, obs.potential, drift) * density
    value = integrate(ScalarField(state.grid, classical))
    if state.kind == "quantum":
        value += quantum_term(obs, state, hbar, order=order)
    return value


def apply_operator(obs: QuadraticObservable, psi: ComplexField, hbar: float, order: int = DERIVATIVE_ORDER) -> ComplexField:
    """O psi in the position representation with p -> -i hbar d."""
    grid = psi.grid
    dims = grid.dims

    def _d(values: np.ndarray, axis: int) -> np.ndarray:
        return gradient(ComplexField(grid, values), axis, order).values

    values = psi.values
    shifted = [-1j * hbar * _d(values, j) - obs.gauge[j] * values for j in range(dims)]
    result = obs.potential * values
    for i in range(dims):
        weighted = sum(obs.metric[i, j] * shifted[j] for j in range(dims))
        if np.any(weighted):
            result = result + 0.5 * (-1j * hbar * _d(weighted, i) - obs.gauge[i] * weighted)
        if np.any(obs.linear[i]):
            b = obs.linear[i]
            result = result - 0.5j * hbar * (b * _d(values, i) + _d(b * values, i))
    return ComplexField(grid, result)


def quantum_expectation(
    obs: QuadraticObservable,
    psi: ComplexField,
    hbar: float = 1.0,
    *,
    order: int = DERIVATIVE_ORDER,
) -> complex:
    """<psi|O|psi> by quadrature; the imaginary part is the discretization residue."""
    if obs.grid != psi.grid:
        raise ValueError("observable and wave function live on different grids")
    return psi.inner(apply_operator(obs, psi, hbar, order))


class Uncertainty(NamedTuple):
    sigma_q: float
    sigma_p: float
    product: float


class McUncertainty(NamedTuple):
    sigma_q: float
    sigma_p: float
    product: float
    stderr: float


class UncertaintyChain(NamedTuple):
    sigma_q2: float
    fisher: float
    sigma_p2: float
    hbar: float

    @property
    def position_bound(self) -> float:
        return self.sigma_q2 * self.fisher

    def holds(self, tolerance: float = 1e-9) -> bool:
        lower = self.hbar**2 / 4.0
        return self.position_bound >= lower - tolerance and self.sigma_p2 >= self.fisher - tolerance


def position_spread(state: EpistemicState, axis: int = 0) -> tuple[float, float]:
    grid = state.grid
    q = grid.mesh()[grid.check_axis(axis)]
    rho = state.density.values
    mean = integrate(ScalarField(grid, q * rho))
    variance = integrate(ScalarField(grid, (q - mean) ** 2 * rho))
    return mean, variance


def uncertainty_product(
    state: EpistemicState,
    model: XiModel | None = None,
    axis: int = 0,
    *,
    order: int = DERIVATIVE_ORDER,
) -> Uncertainty:
    hbar = model.hbar if model is not None else state.hbar
    grid = state.grid
    _, var_q = position_spread(state, axis)
    mean_p = ensemble_average_closed(momentum(grid, axis), state, hbar, order=order)
    var_p = ensemble_average_closed(centered_momentum_square(grid, axis, mean_p), state, hbar, order=order)
    sigma_q = math.sqrt(var_q)
    sigma_p = math.sqrt(max(var_p, 0.0))
    return Uncertainty(sigma_q, sigma_p, sigma_q * sigma_p)


def uncertainty_product_mc(
    state: EpistemicState,
    model: XiModel,
    n: int,
    axis: int = 0,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
    order: int = DERIVATIVE_ORDER,
) -> McUncertainty:
    grid = state.grid
    _, var_q = position_spread(state, axis)
    mean_p = ensemble_average_closed(momentum(grid, axis), state, model.hbar, order=order)
    var_p = ensemble_average_mc(
        centered_momentum_square(grid, axis, mean_p),
        state,
        model,
        n,
        chunk_size=chunk_size,
        workers=workers,
        order=order,
    )
    sigma_q = math.sqrt(var_q)
    sigma_p = math.sqrt(max(var_p.value, 0.0))
    stderr = sigma_q * var_p.stderr / (2.0 * sigma_p) if sigma_p > 0 else float("inf")
    return McUncertainty(sigma_q, sigma_p, sigma_q * sigma_p, stderr)


def uncertainty_chain(
    state: EpistemicState,
    hbar: float | None = None,
    axis: int = 0,
    *,
    order: int = DERIVATIVE_ORDER,
) -> UncertaintyChain:
    """sigma_q^2, F = integral of ((hbar/2) d rho/rho)^2 rho, and sigma_p^2."""
    hbar = state.hbar if hbar is None else hbar
    grid = state.grid
    _, var_q = position_spread(state, axis)
    osmotic = state.osmotic(axis, order)
    fisher = integrate(ScalarField(grid, (0.5 * hbar * osmotic) ** 2 * state.density.values))
    mean_p = ensemble_average_closed(momentum(grid, axis), state, hbar, order=order)
    var_p = ensemble_average_closed(centered_momentum_square(grid, axis, mean_p), state, hbar, order=order)
    return UncertaintyChain(var_q, fisher, var_p, hbar)


def require_node_free(state: EpistemicState, op: str) -> None:
    """Strict node check for solvers that take log rho everywhere, tails included."""
    nodes = state.node_mask()
    if np.any(nodes):
        raise NodeError(f"density falls below the node floor at {int(np.count_nonzero(nodes))} grid points", where=op)
