from __future__ import annotations

from dataclasses import replace
import logging
import math
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .dynamics import Hamiltonian
from .epistemic import EpistemicState, from_wavefunction, load_state
from .errors import ConfigError
from .expectation import (
    QuadraticObservable,
    angular_momentum_z,
    centered_momentum_square,
    from_expression,
    harmonic,
    kinetic,
    momentum,
    momentum_product,
    position,
)
from .fields import ComplexField, Grid
from .measurement import harmonic_modes

logger = logging.getLogger(__name__)


def build_grid(raw: Mapping[str, Any]) -> Grid:
    """Grid from a scenario block; scalar bounds are repeated over ``dims`` axes."""
    dims = int(raw.get("dims", len(raw["points"]) if isinstance(raw.get("points"), list) else 1))

    def _axes(key: str, default: Any = None) -> list[Any]:
        value = raw.get(key, default)
        if value is None:
            raise ConfigError(f"grid needs '{key}'")
        return list(value) if isinstance(value, (list, tuple)) else [value] * dims

    try:
        return Grid(
            lower=tuple(_axes("lower")),
            upper=tuple(_axes("upper")),
            points=tuple(_axes("points")),
            boundary=tuple(_axes("boundary", "vanishing")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc


def _per_axis(value: float | Sequence[float], dims: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (dims,))
    return np.array(arr)


def gaussian_wave(
    grid: Grid,
    center: float | Sequence[float] = 0.0,
    sigma: float | Sequence[float] = 1.0,
    momentum_: float | Sequence[float] = 0.0,
    hbar: float = 1.0,
) -> ComplexField:
    """Product Gaussian with |psi|^2 of standard deviation ``sigma`` per axis and mean momentum ``momentum_``."""
    center = _per_axis(center, grid.dims)
    sigma = _per_axis(sigma, grid.dims)
    k = _per_axis(momentum_, grid.dims) / hbar
    mesh = grid.mesh()
    exponent = sum(-((mesh[a] - center[a]) ** 2) / (4.0 * sigma[a] ** 2) + 1j * k[a] * mesh[a] for a in range(grid.dims))
    return ComplexField(grid, np.exp(exponent)).normalized()


def box_state(grid: Grid, n: int = 1) -> ComplexField:
    """Level ``n`` of the particle in the box spanned by a 1D vanishing grid."""
    if grid.dims != 1 or grid.boundary[0] != "vanishing":
        raise ConfigError("box states need a 1D grid with vanishing walls")
    x = grid.axis_coordinates(0)
    length = grid.upper[0] - grid.lower[0]
    return ComplexField(grid, np.sqrt(2.0 / length) * np.sin(n * np.pi * (x - grid.lower[0]) / length))


def plane_wave(grid: Grid, wavenumber: float | Sequence[float], hbar: float = 1.0) -> EpistemicState:
    """Uniform density with S = hbar k . q on a periodic grid.

    k L / 2 pi must be an integer on every axis so that exp(iS/hbar) is
    single valued; the phase then wraps and the state records its winding.
    """
    if any(b != "periodic" for b in grid.boundary):
        raise ConfigError("plane waves need a fully periodic grid")
    k = _per_axis(wavenumber, grid.dims)
    windings = []
    for axis in range(grid.dims):
        turns = k[axis] * (grid.upper[axis] - grid.lower[axis]) / (2.0 * math.pi)
        if abs(turns - round(turns)) > 1e-9:
            raise ConfigError(f"plane wave k={k[axis]:g} does not fit the periodic box on axis {axis}")
        windings.append(int(round(turns)))
    mesh = grid.mesh()
    phase = hbar * sum(k[a] * mesh[a] for a in range(grid.dims))
    state = EpistemicState.from_arrays(grid, np.ones(grid.shape), phase, hbar=hbar)
    return replace(state, winding=next((w for w in windings if w), 0))


def entangled_gaussian(
    grid: Grid,
    a: float = 0.5,
    b: float = 2.0,
    momenta: Sequence[float] = (0.0, 0.0),
    hbar: float = 1.0,
) -> ComplexField:
    """Two-particle packet rho ~ exp(-(q1 - q2)^2 / 2a^2 - (q1 + q2)^2 / 2b^2)."""
    if grid.dims != 2:
        raise ConfigError("the entangled Gaussian lives on a 2D grid")
    q1, q2 = grid.mesh()
    rho = np.exp(-((q1 - q2) ** 2) / (2.0 * a * a) - ((q1 + q2) ** 2) / (2.0 * b * b))
    phase = (momenta[0] * q1 + momenta[1] * q2) / hbar
    return ComplexField(grid, np.sqrt(rho) * np.exp(1j * phase)).normalized()


def coherent_state(
    grid: Grid,
    q0: float = 0.0,
    p0: float = 0.0,
    omega: float = 1.0,
    mass: float = 1.0,
    hbar: float = 1.0,
) -> ComplexField:
    sigma = math.sqrt(hbar / (2.0 * mass * omega))
    return gaussian_wave(grid, q0, sigma, p0, hbar)


def harmonic_level(grid: Grid, n: int = 0, omega: float = 1.0, mass: float = 1.0, hbar: float = 1.0) -> ComplexField:
    return harmonic_modes(grid, n + 1, omega, mass, hbar).fields[n].normalized()


def random_smooth_state(
    grid: Grid,
    rng: np.random.Generator,
    *,
    modes: int = 4,
    hbar: float = 1.0,
    tail: float = 7.0,
) -> EpistemicState:
    """Node-free state: a Gaussian envelope reaching ``tail`` widths at the walls, modulated by low Fourier modes."""
    if grid.dims != 1:
        raise ValueError("random smooth states are one dimensional")
    x = grid.axis_coordinates(0)
    lower, upper = grid.lower[0], grid.upper[0]
    centre = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower)
    width = half / tail
    u = (x - centre) / half
    log_rho = -0.5 * ((x - centre) / width) ** 2
    phase = rng.uniform(-1.0, 1.0) * x
    for k in range(1, modes + 1):
        log_rho = log_rho + rng.normal(0.0, 0.4 / k) * np.cos(k * np.pi * u) + rng.normal(0.0, 0.4 / k) * np.sin(k * np.pi * u)
        phase = phase + rng.normal(0.0, 0.5 / k) * np.sin(k * np.pi * u + rng.uniform(0.0, 2.0 * np.pi))
    return EpistemicState.from_arrays(grid, np.exp(log_rho - log_rho.max()), hbar * phase, hbar=hbar)


def random_observable(grid: Grid, rng: np.random.Generator) -> QuadraticObservable:
    """Smooth random O = 1/2 g (p - A)^2 + b p + V with g bounded away from zero."""
    if grid.dims != 1:
        raise ValueError("random observables are one dimensional")
    x = grid.axis_coordinates(0)
    scale = 0.5 * (grid.upper[0] - grid.lower[0])
    u = x / scale
    c = rng.normal(size=8)
    metric = 1.0 + 0.5 * np.tanh(c[0] * u + c[1])
    gauge = 0.5 * c[2] * np.sin(np.pi * u + c[3])
    linear = 0.5 * c[4] * np.cos(np.pi * u)
    potential = 0.5 * c[5] * x + 0.1 * abs(c[6]) * x * x + 0.2 * c[7]
    return QuadraticObservable.build(
        grid,
        metric=[[metric]],
        gauge=[gauge],
        linear=[linear],
        potential=potential,
        label="random",
    )


WaveBuilder = Callable[[Grid, Mapping[str, Any], float], ComplexField]

_WAVE_FAMILIES: dict[str, WaveBuilder] = {
    "gaussian": lambda grid, p, hbar: gaussian_wave(
        grid, p.get("center", 0.0), p.get("sigma", 1.0), p.get("momentum", 0.0), hbar
    ),
    "box": lambda grid, p, hbar: box_state(grid, int(p.get("n", 1))),
    "entangled_gaussian": lambda grid, p, hbar: entangled_gaussian(
        grid, float(p.get("a", 0.5)), float(p.get("b", 2.0)), tuple(p.get("momenta", (0.0, 0.0))), hbar
    ),
    "coherent": lambda grid, p, hbar: coherent_state(
        grid, float(p.get("q0", 0.0)), float(p.get("p0", 0.0)), float(p.get("omega", 1.0)), float(p.get("mass", 1.0)), hbar
    ),
    "harmonic": lambda grid, p, hbar: harmonic_level(
        grid, int(p.get("n", 0)), float(p.get("omega", 1.0)), float(p.get("mass", 1.0)), hbar
    ),
}

STATE_FAMILIES = (*_WAVE_FAMILIES, "plane_wave", "file")


def build_wavefunction(spec: Mapping[str, Any], grid: Grid, hbar: float) -> ComplexField:
    family = spec.get("family")
    builder = _WAVE_FAMILIES.get(str(family))
    if builder is None:
        raise ConfigError(f"state family {family!r} has no wave function; expected one of {tuple(_WAVE_FAMILIES)}")
    return builder(grid, spec, hbar)


def build_state(spec: Mapping[str, Any], grid: Grid, hbar: float) -> EpistemicState:
    """Epistemic state for a named family; ``kind: classical`` reinterprets S as S_C."""
    family = spec.get("family")
    if family == "plane_wave":
        state = plane_wave(grid, spec.get("wavenumber", 1.0), hbar)
    elif family == "file":
        directory = Path(str(spec.get("path", "")))
        state = load_state(directory, str(spec.get("name", "state"))).with_hbar(hbar)
        if state.grid != grid:
            raise ConfigError(f"state file {directory} lives on another grid")
    else:
        state = from_wavefunction(build_wavefunction(spec, grid, hbar), hbar)
    kind = spec.get("kind", "quantum")
    return state if kind == state.kind else state.as_kind(str(kind))


_OBSERVABLES: dict[str, Callable[[Grid, Mapping[str, Any]], QuadraticObservable]] = {
    "position": lambda grid, p: position(grid, int(p.get("axis", 0))),
    "momentum": lambda grid, p: momentum(grid, int(p.get("axis", 0))),
    "kinetic": lambda grid, p: kinetic(grid, p.get("mass", 1.0)),
    "harmonic": lambda grid, p: harmonic(grid, float(p.get("omega", 1.0)), p.get("mass", 1.0)),
    "angular_momentum_z": lambda grid, p: angular_momentum_z(grid, tuple(p.get("axes", (0, 1)))),
    "momentum_product": lambda grid, p: momentum_product(grid, *p.get("axes", (0, 1))),
    "momentum_square": lambda grid, p: centered_momentum_square(grid, int(p.get("axis", 0)), float(p.get("center", 0.0))),
}

OBSERVABLE_FAMILIES = (*_OBSERVABLES, "expression")


def build_observable(spec: str | Mapping[str, Any], grid: Grid) -> QuadraticObservable:
    """A bare name, ``{"name": ..., params}`` or ``{"expression": "..."}``."""
    if isinstance(spec, str):
        spec = {"name": spec}
    if "expression" in spec:
        return from_expression(grid, str(spec["expression"]), spec.get("label"))
    name = str(spec.get("name"))
    factory = _OBSERVABLES.get(name)
    if factory is None:
        raise ConfigError(f"unknown observable {name!r}; expected one of {OBSERVABLE_FAMILIES}")
    return factory(grid, spec)


def build_hamiltonian(spec: Mapping[str, Any], grid: Grid) -> Hamiltonian:
    """``potential`` is ``free``, ``harmonic`` (with omega) or a sympy expression in q0..q{N-1}."""
    mass = spec.get("mass", 1.0)
    potential = spec.get("potential", "free")
    if potential == "free":
        values: Any = 0.0
    elif potential == "harmonic":
        values = harmonic(grid, float(spec.get("omega", 1.0)), mass).potential
    else:
        values = from_expression(grid, str(potential)).potential
    return Hamiltonian.build(grid, masses=mass, potential=values)
