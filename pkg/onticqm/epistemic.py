from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import griddata

from .errors import NodeError, NonNormalizable
from .fields import ComplexField, Grid, ScalarField, gradient, read_field, spectral_gradient, write_field

logger = logging.getLogger(__name__)

XI_LAWS = ("two_point", "gaussian")
STATE_KINDS = ("classical", "quantum")
NODE_EPSILON = 1e-12
NORMALIZATION_TOLERANCE = 1e-8
DEFAULT_CHUNK_SIZE = 65536
DERIVATIVE_ORDER = 4

T = TypeVar("T")


@dataclass(frozen=True)
class XiModel:
    """Law of the global variable xi: mean 0, variance hbar**2."""

    hbar: float = 1.0
    law: str = "two_point"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.hbar > 0:
            raise ValueError("XiModel.hbar must be positive")
        if self.law not in XI_LAWS:
            raise ValueError(f"Unknown xi law {self.law!r}; expected one of {XI_LAWS}")


def spawn_generators(entropy: int | Sequence[int], count: int) -> list[np.random.Generator]:
    """``count`` independent generators spawned from one SeedSequence."""
    if isinstance(entropy, (int, np.integer)):
        entropy = int(entropy)
    else:
        entropy = [int(e) for e in entropy]
    return [np.random.default_rng(ss) for ss in np.random.SeedSequence(entropy).spawn(count)]


def chunk_streams(seed: int, chunk: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (position, xi) generators for one chunk of samples."""
    position, xi = spawn_generators([seed, chunk], 2)
    return position, xi


def map_chunks(
    fn: Callable[[int, int], T],
    n: int,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> list[T]:
    """Run ``fn(chunk_index, chunk_len)`` over fixed-size chunks, results in chunk order."""
    if n <= 0:
        return []
    count = math.ceil(n / chunk_size)
    chunks = [(c, min(chunk_size, n - c * chunk_size)) for c in range(count)]
    if workers <= 1 or count == 1:
        return [fn(c, size) for c, size in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: fn(*item), chunks))


def draw_xi(rng: np.random.Generator, model: XiModel, n: int) -> np.ndarray:
    if model.law == "two_point":
        return model.hbar * (2.0 * rng.integers(0, 2, size=n) - 1.0)
    return rng.normal(0.0, model.hbar, size=n)


def sample_xi(
    model: XiModel,
    n: int,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> np.ndarray:
    if n < 0:
        raise ValueError("sample count must be non-negative")

    def _chunk(chunk: int, size: int) -> np.ndarray:
        _, xi_rng = chunk_streams(model.seed, chunk)
        return draw_xi(xi_rng, model, size)

    parts = map_chunks(_chunk, n, chunk_size=chunk_size, workers=workers)
    return np.concatenate(parts) if parts else np.empty(0)


@dataclass(frozen=True, eq=False)
class EpistemicState:
    """Epistemic state (rho, S) on a grid; S plays S_C or S_Q depending on ``kind``."""

    density: ScalarField
    phase: ScalarField
    hbar: float = 1.0
    kind: str = "quantum"
    phase_mask: np.ndarray | None = field(default=None, repr=False, compare=False)
    winding: int = 0

    def __post_init__(self) -> None:
        if self.density.grid != self.phase.grid:
            raise ValueError("density and phase live on different grids")
        if self.kind not in STATE_KINDS:
            raise ValueError(f"Unknown state kind {self.kind!r}")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        rho = self.density.values
        if np.any(rho < 0):
            raise ValueError("density must be non-negative")
        total = float(np.sum(rho) * self.grid.cell_volume)
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"density integrates to {total:.12g}, expected 1")

    @classmethod
    def from_arrays(
        cls,
        grid: Grid,
        rho: np.ndarray,
        phase: np.ndarray | float = 0.0,
        *,
        hbar: float = 1.0,
        kind: str = "quantum",
    ) -> EpistemicState:
        """Build a state, normalizing ``rho`` on the grid."""
        rho = np.broadcast_to(np.asarray(rho, dtype=float), grid.shape)
        total = float(np.sum(rho) * grid.cell_volume)
        if not total > 0 or not math.isfinite(total):
            raise NonNormalizable("density has no finite positive mass", where="epistemic.from_arrays")
        return cls(
            density=ScalarField(grid, rho / total),
            phase=ScalarField(grid, np.broadcast_to(np.asarray(phase, dtype=float), grid.shape)),
            hbar=hbar,
            kind=kind,
        )

    @classmethod
    def from_functions(
        cls,
        grid: Grid,
        rho: Callable[..., np.ndarray],
        phase: Callable[..., np.ndarray] | None = None,
        *,
        hbar: float = 1.0,
        kind: str = "quantum",
    ) -> EpistemicState:
        mesh = grid.mesh()
        return cls.from_arrays(
            grid,
            rho(*mesh),
            0.0 if phase is None else phase(*mesh),
            hbar=hbar,
            kind=kind,
        )

    @property
    def grid(self) -> Grid:
        return self.density.grid

    def with_hbar(self, hbar: float) -> EpistemicState:
        return EpistemicState(self.density, self.phase, hbar, self.kind, self.phase_mask, self.winding)

    def as_kind(self, kind: str) -> EpistemicState:
        return EpistemicState(self.density, self.phase, self.hbar, kind, self.phase_mask, self.winding)

    def node_mask(self) -> np.ndarray:
        rho = self.density.values
        return rho <= NODE_EPSILON * float(np.max(rho))

    def interior_node_mask(self) -> np.ndarray:
        """Nodes with support on both sides along some axis; tails of the density are excluded."""
        nodes = self.node_mask()
        interior = np.zeros_like(nodes)
        for axis in range(self.grid.dims):
            filled = np.moveaxis(~nodes, axis, 0)
            before = np.logical_or.accumulate(filled, axis=0)
            after = np.logical_or.accumulate(filled[::-1], axis=0)[::-1]
            interior |= np.moveaxis(before & after, 0, axis)
        return nodes & interior

    def density_gradient(self, axis: int, order: int = DERIVATIVE_ORDER) -> np.ndarray:
        return gradient(self.density, axis, order).values

    def osmotic(self, axis: int, order: int = DERIVATIVE_ORDER) -> np.ndarray:
        """d_axis rho / rho, set to zero on node points."""
        rho = self.density.values
        nodes = self.node_mask()
        safe = np.where(nodes, 1.0, rho)
        return np.where(nodes, 0.0, self.density_gradient(axis, order) / safe)

    def has_branch_cut(self) -> bool:
        return self.winding != 0 or _has_phase_jumps(self.phase.values, self.hbar)

    def phase_gradient(self, axis: int, order: int = DERIVATIVE_ORDER) -> np.ndarray:
        """d_axis S; differentiates exp(iS/hbar) when S carries a branch cut.

        On a periodic axis the cut is handled spectrally, which is exact for
        phases that wind an integer number of times.
        """
        if not self.has_branch_cut():
            return gradient(self.phase, axis, order).values
        unit = ComplexField(self.grid, np.exp(1j * self.phase.values / self.hbar))
        if self.grid.boundary[self.grid.check_axis(axis)] == "periodic":
            derivative = spectral_gradient(unit, axis).values
        else:
            derivative = gradient(unit, axis, order).values
        return self.hbar * np.imag(np.conj(unit.values) * derivative)

    def check_nodes(self, where: np.ndarray | None = None, order: int = DERIVATIVE_ORDER, op: str = "") -> None:
        """Raise NodeError where rho vanishes but its gradient does not."""
        nodes = self.node_mask()
        if where is not None:
            nodes = nodes & where
        if not np.any(nodes):
            return
        for axis in range(self.grid.dims):
            steep = nodes & (self.density_gradient(axis, order) != 0.0)
            if np.any(steep):
                index = np.unravel_index(int(np.argmax(steep)), self.grid.shape)
                raise NodeError(
                    f"density vanishes with nonzero gradient at grid index {tuple(int(i) for i in index)}",
                    where=op or "epistemic.momentum_field",
                )


def _has_phase_jumps(phase: np.ndarray, hbar: float) -> bool:
    for axis in range(phase.ndim):
        if phase.shape[axis] > 1 and np.any(np.abs(np.diff(phase, axis=axis)) > np.pi * hbar):
            return True
    return False


@dataclass(frozen=True, eq=False)
class OnticSample:
    q: np.ndarray
    xi: float
    p: np.ndarray


@dataclass(frozen=True, eq=False)
class OnticEnsemble:
    """Columnar ensemble of ontic samples; indexes like a sequence of OnticSample."""

    q: np.ndarray
    xi: np.ndarray
    p: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return int(self.xi.shape[0])

    def __getitem__(self, k: int) -> OnticSample:
        return OnticSample(q=self.q[k], xi=float(self.xi[k]), p=self.p[k])

    def __iter__(self) -> Iterator[OnticSample]:
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def empty(cls, dims: int) -> OnticEnsemble:
        return cls(
            q=np.empty((0, dims)),
            xi=np.empty(0),
            p=np.empty((0, dims)),
            index=np.empty(0, dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, parts: Sequence[OnticEnsemble], dims: int) -> OnticEnsemble:
        if not parts:
            return cls.empty(dims)
        return cls(
            q=np.concatenate([p.q for p in parts]),
            xi=np.concatenate([p.xi for p in parts]),
            p=np.concatenate([p.p for p in parts]),
            index=np.concatenate([p.index for p in parts]),
        )


def momentum_field(
    state: EpistemicState,
    xi: float,
    *,
    where: np.ndarray | None = None,
    order: int = DERIVATIVE_ORDER,
) -> tuple[ScalarField, ...]:
    """p_i(q; xi) = d_i S + (xi/2) d_i rho / rho for quantum states, d_i S for classical ones."""
    grid = state.grid
    components = []
    if state.kind == "quantum":
        state.check_nodes(where, order)
    for axis in range(grid.dims):
        p = state.phase_gradient(axis, order)
        if state.kind == "quantum":
            p = p + 0.5 * xi * state.osmotic(axis, order)
        components.append(ScalarField(grid, p))
    return tuple(components)


def sample_positions(state: EpistemicState, rng: np.random.Generator, n: int) -> np.ndarray:
    """Flat grid indices drawn with probability rho * dq (cell-centred samples)."""
    rho = state.density.values.reshape(-1)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if state.grid.dims == 1:
        cdf = np.cumsum(rho)
        u = rng.random(n) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), rho.size - 1).astype(np.int64)

    envelope = float(np.max(rho))
    accepted: list[np.ndarray] = []
    remaining = n
    while remaining > 0:
        batch = max(2 * remaining, 1024)
        proposal = rng.integers(0, rho.size, size=batch)
        keep = proposal[rng.random(batch) * envelope < rho[proposal]]
        accepted.append(keep[:remaining])
        remaining -= min(remaining, keep.size)
    return np.concatenate(accepted).astype(np.int64)


@dataclass(frozen=True, eq=False)
class _MomentumTables:
    drift: np.ndarray
    half_osmotic: np.ndarray | None
    points: np.ndarray


def _momentum_tables(state: EpistemicState, order: int) -> _MomentumTables:
    grid = state.grid
    drift = np.stack([state.phase_gradient(a, order).reshape(-1) for a in range(grid.dims)], axis=1)
    half = None
    if state.kind == "quantum":
        half = 0.5 * np.stack([state.osmotic(a, order).reshape(-1) for a in range(grid.dims)], axis=1)
    points = np.stack([m.reshape(-1) for m in grid.mesh()], axis=1)
    return _MomentumTables(drift=drift, half_osmotic=half, points=points)


def draw_ensemble(
    state: EpistemicState,
    model: XiModel,
    n: int,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
    order: int = DERIVATIVE_ORDER,
) -> OnticEnsemble:
    """Draw (q, xi, p) with P(xi, q) = mu(xi) rho(q) and p from the restricted momentum law."""
    if n < 0:
        raise ValueError("sample count must be non-negative")
    grid = state.grid
    tables = _momentum_tables(state, order)
    nodes = state.node_mask().reshape(-1)
    steep = np.zeros_like(nodes)
    if state.kind == "quantum" and np.any(nodes):
        for axis in range(grid.dims):
            steep |= nodes & (state.density_gradient(axis, order).reshape(-1) != 0.0)

    def _chunk(chunk: int, size: int) -> OnticEnsemble:
        position_rng, xi_rng = chunk_streams(model.seed, chunk)
        index = sample_positions(state, position_rng, size)
        if np.any(steep[index]):
            bad = np.unravel_index(int(index[np.argmax(steep[index])]), grid.shape)
            raise NodeError(
                f"sampled a node with nonzero density gradient at {tuple(int(i) for i in bad)}",
                where="epistemic.draw_ensemble",
            )
        xi = draw_xi(xi_rng, model, size)
        p = tables.drift[index]
        if tables.half_osmotic is not None:
            p = p + xi[:, None] * tables.half_osmotic[index]
        return OnticEnsemble(q=tables.points[index], xi=xi, p=p, index=index)

    parts = map_chunks(_chunk, n, chunk_size=chunk_size, workers=workers)
    ensemble = OnticEnsemble.concatenate(parts, grid.dims)
    logger.debug("Drew %d ontic samples on grid %s", len(ensemble), grid.points)
    return ensemble


def _line_integrals(components: Sequence[ScalarField]) -> np.ndarray:
    grid = components[0].grid
    potential = np.zeros(grid.shape)
    for axis, comp in enumerate(components):
        values = np.asarray(comp.values)
        # integrate along `axis` on the hyperplane where all later axes sit at index 0
        index: list[slice | int] = [slice(None)] * grid.dims
        for later in range(axis + 1, grid.dims):
            index[later] = 0
        line = values[tuple(index)]
        x = grid.axis_coordinates(axis)
        integral = cumulative_trapezoid(line, x, axis=axis, initial=0.0)
        for later in range(axis + 1, grid.dims):
            integral = np.expand_dims(integral, axis=later)
        potential = potential + integral
    return potential


def solve_density_for_field(
    f: ScalarField | Sequence[ScalarField],
    grid: Grid | None = None,
    *,
    hbar: float = 1.0,
) -> EpistemicState:
    """Density permitted for the momentum field p = xi * f with constant S.

    The restriction gives d rho / rho = 2 f, hence rho ~ exp(2 * integral of f).
    """
    components = [f] if isinstance(f, ScalarField) else list(f)
    grid = grid or components[0].grid
    if len(components) != grid.dims or any(c.grid != grid for c in components):
        raise ValueError("need one field component per axis on the given grid")

    for axis, comp in enumerate(components):
        if grid.boundary[axis] != "periodic":
            continue
        values = np.moveaxis(np.asarray(comp.values), axis, 0)
        circulation = float(np.max(np.abs(np.sum(values, axis=0)))) * grid.spacing[axis]
        scale = float(np.max(np.abs(values))) * (grid.upper[axis] - grid.lower[axis])
        if circulation > 1e-9 * max(scale, 1.0):
            raise NonNormalizable(
                f"field has nonzero circulation {circulation:.3g} around periodic axis {axis}",
                where="epistemic.solve_density_for_field",
            )

    log_rho = 2.0 * _line_integrals(components)
    if not np.all(np.isfinite(log_rho)):
        raise NonNormalizable("exponent is not finite on the grid", where="epistemic.solve_density_for_field")

    peak = np.unravel_index(int(np.argmax(log_rho)), grid.shape)
    for axis in range(grid.dims):
        if grid.boundary[axis] != "vanishing":
            continue
        edge = peak[axis]
        if edge not in (0, grid.points[axis] - 1):
            continue
        outward = -1.0 if edge == 0 else 1.0
        if outward * components[axis].values[peak] > 0:
            raise NonNormalizable(
                f"density still grows at the edge of axis {axis}; the domain truncates it",
                where="epistemic.solve_density_for_field",
            )

    rho = np.exp(log_rho - float(np.max(log_rho)))
    return EpistemicState.from_arrays(grid, rho, 0.0, hbar=hbar, kind="quantum")


def to_wavefunction(state: EpistemicState) -> ComplexField:
    if state.kind != "quantum":
        raise ValueError("only quantum states map to wave functions")
    rho = state.density.values
    return ComplexField(state.grid, np.sqrt(rho) * np.exp(1j * state.phase.values / state.hbar))


def _perimeter_winding(angle: np.ndarray) -> int:
    n0, n1 = angle.shape
    a0, b0 = n0 // 4, (3 * n0) // 4
    a1, b1 = n1 // 4, (3 * n1) // 4
    loop = np.concatenate(
        (
            angle[a0:b0, a1],
            angle[b0, a1:b1],
            angle[b0:a0:-1, b1],
            angle[a0, b1:a1:-1],
            angle[a0:a0 + 1, a1],
        )
    )
    steps = np.angle(np.exp(1j * np.diff(loop)))
    return int(round(float(np.sum(steps)) / (2.0 * np.pi)))


def _loop_winding(angle: np.ndarray, axis: int, anchor: tuple[int, ...]) -> int:
    index = list(anchor)
    index[axis] = slice(None)
    line = angle[tuple(index)]
    closed = np.append(line, line[0])
    steps = np.angle(np.exp(1j * np.diff(closed)))
    return int(round(float(np.sum(steps)) / (2.0 * np.pi)))


def from_wavefunction(psi: ComplexField, hbar: float = 1.0) -> EpistemicState:
    """Invert psi = sqrt(rho) exp(iS/hbar).

    S is unwrapped by axis sweeps from the first grid point. Node points get
    S interpolated from their neighbours and are flagged in ``phase_mask``;
    on a line, masked tails continue S linearly.
    """
    grid = psi.grid
    norm = psi.norm()
    if abs(norm - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValueError(f"wave function norm is {norm:.12g}, expected 1")

    values = psi.values
    rho = np.abs(values) ** 2
    mask = rho <= NODE_EPSILON * float(np.max(rho))
    angle = np.angle(values)

    unwrapped = angle
    for axis in reversed(range(grid.dims)):
        unwrapped = np.unwrap(unwrapped, axis=axis)

    if np.any(mask) and not np.all(mask):
        if grid.dims == 1:
            x = grid.axis_coordinates(0)
            unwrapped = unwrapped.copy()
            unwrapped[mask] = np.interp(x[mask], x[~mask], unwrapped[~mask])
            kept = np.flatnonzero(~mask)
            if kept.size >= 2:
                # tails continue with the edge slope so that d S stays smooth across the mask
                for end, inner, tail in ((kept[0], kept[1], x < x[kept[0]]), (kept[-1], kept[-2], x > x[kept[-1]])):
                    slope = (unwrapped[end] - unwrapped[inner]) / (x[end] - x[inner])
                    unwrapped[tail] = unwrapped[end] + slope * (x[tail] - x[end])
        else:
            points = np.stack([m[~mask] for m in grid.mesh()], axis=1)
            targets = np.stack([m[mask] for m in grid.mesh()], axis=1)
            unwrapped = unwrapped.copy()
            unwrapped[mask] = griddata(points, unwrapped[~mask], targets, method="nearest")

    winding = 0
    anchor = np.unravel_index(int(np.argmax(rho)), grid.shape)
    if grid.dims == 2:
        winding = _perimeter_winding(angle)
    elif grid.dims == 1 and grid.boundary[0] == "periodic":
        winding = _loop_winding(angle, 0, tuple(int(i) for i in anchor))

    total = float(np.sum(rho) * grid.cell_volume)
    return EpistemicState(
        density=ScalarField(grid, rho / total),
        phase=ScalarField(grid, hbar * unwrapped),
        hbar=hbar,
        kind="quantum",
        phase_mask=mask,
        winding=winding,
    )


def save_state(directory: str | Path, state: EpistemicState, name: str = "state") -> Path:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    write_field(target / f"{name}_density.csv", state.density)
    write_field(target / f"{name}_phase.csv", state.phase)
    meta = {"kind": state.kind, "hbar": state.hbar, "winding": state.winding}
    meta_path = target / f"{name}.json"
    meta_path.write_text(json.dumps(meta, ensure_ascii=False, indent=2), encoding="utf-8")
    return meta_path


def load_state(directory: str | Path, name: str = "state") -> EpistemicState:
    source = Path(directory)
    meta = json.loads((source / f"{name}.json").read_text(encoding="utf-8"))
    density = read_field(source / f"{name}_density.csv")
    phase = read_field(source / f"{name}_phase.csv")
    if not isinstance(density, ScalarField) or not isinstance(phase, ScalarField):
        raise ValueError("state files must hold real fields")
    total = float(np.sum(density.values) * density.grid.cell_volume)
    return EpistemicState(
        density=ScalarField(density.grid, density.values / total),
        phase=phase,
        hbar=float(meta["hbar"]),
        kind=str(meta["kind"]),
        winding=int(meta.get("winding", 0)),
    )
