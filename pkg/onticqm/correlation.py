from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Any, NamedTuple

import numpy as np

from .epistemic import (
    DEFAULT_CHUNK_SIZE,
    DERIVATIVE_ORDER,
    EpistemicState,
    XiModel,
    chunk_streams,
    draw_xi,
    map_chunks,
    sample_positions,
)
from .expectation import ensemble_average_closed, mean_and_stderr, momentum_product
from .fields import ComplexField, ScalarField, integrate, laplacian_like

logger = logging.getLogger(__name__)

XI_MODES = ("nonseparable", "separable")
CORRELATION_METHODS = ("closed", "mc")
SCHMIDT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class XiStructure:
    """How xi is shared between degrees of freedom.

    ``nonseparable``: one draw per sample acts on every axis.
    ``separable``: every axis gets its own independent draw from ``model``'s law.
    """

    mode: str = "nonseparable"
    model: XiModel = field(default_factory=XiModel)

    def __post_init__(self) -> None:
        if self.mode not in XI_MODES:
            raise ValueError(f"Unknown xi mode {self.mode!r}; expected one of {XI_MODES}")

    @classmethod
    def nonseparable(cls, model: XiModel | None = None) -> XiStructure:
        return cls("nonseparable", model or XiModel())

    @classmethod
    def separable(cls, model: XiModel | None = None) -> XiStructure:
        return cls("separable", model or XiModel())

    def draw(self, rng: np.random.Generator, n: int, dims: int) -> np.ndarray:
        """(n, dims) array of xi values seen by each axis."""
        if self.mode == "nonseparable":
            return np.repeat(draw_xi(rng, self.model, n)[:, None], dims, axis=1)
        return draw_xi(rng, self.model, n * dims).reshape(n, dims)


class CorrelationResult(NamedTuple):
    value: float
    stderr: float
    method: str
    mode: str

    def to_dict(self) -> dict[str, Any]:
        return self._asdict()


def _pair(state: EpistemicState, axes: tuple[int, int]) -> tuple[int, int]:
    i, j = (state.grid.check_axis(a) for a in axes)
    if i == j:
        raise ValueError("momentum correlation needs two different axes")
    return i, j


def _require_interior_node_free(state: EpistemicState, op: str, order: int) -> None:
    state.check_nodes(where=state.interior_node_mask(), order=order, op=op)


def _separable_closed(state: EpistemicState, axes: tuple[int, int], order: int) -> float:
    i, j = axes
    drift = state.phase_gradient(i, order) * state.phase_gradient(j, order)
    return integrate(ScalarField(state.grid, drift * state.density.values))


def momentum_correlation(
    state: EpistemicState,
    structure: XiStructure | None = None,
    method: str = "closed",
    n: int = 0,
    *,
    axes: tuple[int, int] = (0, 1),
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
    order: int = DERIVATIVE_ORDER,
) -> CorrelationResult:
    """Ensemble average of p_i p_j under a shared or a per-axis xi.

    With a shared xi the cross term (xi^2/4)(d_i rho/rho)(d_j rho/rho)
    survives and the average is <psi|p_i p_j|psi>; with independent draws
    it averages away and only the S-gradient integral remains.
    """
    op = "correlation.momentum_correlation"
    structure = structure or XiStructure()
    if method not in CORRELATION_METHODS:
        raise ValueError(f"Unknown correlation method {method!r}; expected one of {CORRELATION_METHODS}")
    axes = _pair(state, axes)
    _require_interior_node_free(state, op, order)
    hbar = structure.model.hbar

    if method == "closed":
        if structure.mode == "nonseparable" and state.kind == "quantum":
            obs = momentum_product(state.grid, *axes)
            value = ensemble_average_closed(obs, state, hbar, order=order)
        else:
            value = _separable_closed(state, axes, order)
        return CorrelationResult(float(value), 0.0, method, structure.mode)

    if n < 2:
        raise ValueError("Monte Carlo correlation needs n >= 2")
    i, j = axes
    drift = np.stack([state.phase_gradient(a, order).reshape(-1) for a in axes], axis=1)
    half_osmotic = np.zeros_like(drift)
    if state.kind == "quantum":
        half_osmotic = 0.5 * np.stack([state.osmotic(a, order).reshape(-1) for a in axes], axis=1)

    def _chunk(chunk: int, size: int) -> np.ndarray:
        position_rng, xi_rng = chunk_streams(structure.model.seed, chunk)
        index = sample_positions(state, position_rng, size)
        xi = structure.draw(xi_rng, size, 2)
        p = drift[index] + xi * half_osmotic[index]
        return p[:, 0] * p[:, 1]

    parts = map_chunks(_chunk, n, chunk_size=chunk_size, workers=workers)
    estimate = mean_and_stderr(np.concatenate(parts))
    logger.info(
        "Momentum correlation p%d p%d (%s xi, %s law): %.6g +- %.2g from %d samples",
        i,
        j,
        structure.mode,
        structure.model.law,
        estimate.value,
        estimate.stderr,
        n,
    )
    return CorrelationResult(estimate.value, estimate.stderr, method, structure.mode)


class CorrectionForms(NamedTuple):
    osmotic: float
    amplitude: float

    @property
    def discrepancy(self) -> float:
        return abs(self.osmotic - self.amplitude)


def correction_forms(
    state: EpistemicState,
    hbar: float | None = None,
    *,
    axes: tuple[int, int] = (0, 1),
    order: int = DERIVATIVE_ORDER,
) -> CorrectionForms:
    """Both quadratures of the quantum correction to <p_i p_j>.

    ``osmotic``: integral of hbar^2 (d_i rho)(d_j rho) / (4 rho).
    ``amplitude``: -hbar^2 times the integral of R d_i d_j R with R = sqrt(rho).
    """
    op = "correlation.quantum_correction"
    i, j = _pair(state, axes)
    _require_interior_node_free(state, op, order)
    hbar = state.hbar if hbar is None else hbar
    grid = state.grid
    rho = state.density.values
    osmotic = hbar**2 / 4.0 * state.osmotic(i, order) * state.osmotic(j, order) * rho
    amplitude = ScalarField(grid, np.sqrt(rho))
    mixed = laplacian_like(amplitude, i, j, order).values
    return CorrectionForms(
        osmotic=integrate(ScalarField(grid, osmotic)),
        amplitude=-(hbar**2) * integrate(ScalarField(grid, amplitude.values * mixed)),
    )


def quantum_correction(
    state: EpistemicState,
    hbar: float | None = None,
    *,
    axes: tuple[int, int] = (0, 1),
    order: int = DERIVATIVE_ORDER,
) -> float:
    """Nonseparable minus separable correlation."""
    forms = correction_forms(state, hbar, axes=axes, order=order)
    logger.debug("Quantum correction forms: %.10g vs %.10g", forms.osmotic, forms.amplitude)
    return forms.osmotic


def schmidt_rank(psi: ComplexField, threshold: float = SCHMIDT_THRESHOLD, split: int | None = None) -> int:
    """Number of singular values of Psi(first axes, last axes) above ``threshold`` x the largest.

    ``split`` is the count of leading axes in the first factor; it defaults to
    half the grid dimension.
    """
    dims = psi.grid.dims
    split = dims // 2 if split is None else split
    if not 0 < split < dims:
        raise ValueError(f"split must lie in 1..{dims - 1}, got {split}")
    shape = psi.grid.shape
    rows = int(math.prod(shape[:split]))
    singular = np.linalg.svd(np.asarray(psi.values).reshape(rows, -1), compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int(np.count_nonzero(singular > threshold * singular[0]))
