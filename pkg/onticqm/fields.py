from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DomainError

BOUNDARIES = ("periodic", "vanishing")
MIN_POINTS = 4


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on a box in configuration space.

    Point k of an axis sits at ``lower + (k + 1/2) * spacing``, so a
    vanishing-boundary axis never samples its walls.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]
    boundary: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "points", tuple(int(v) for v in self.points))
        object.__setattr__(self, "boundary", tuple(str(v) for v in self.boundary))

        dims = len(self.points)
        if dims == 0:
            raise ValueError("Grid needs at least one axis")
        if not (len(self.lower) == len(self.upper) == len(self.boundary) == dims):
            raise ValueError("Grid axis specifications have different lengths")
        for axis in range(dims):
            if self.points[axis] < MIN_POINTS:
                raise ValueError(f"Grid axis {axis} needs at least {MIN_POINTS} points")
            if not self.upper[axis] > self.lower[axis]:
                raise ValueError(f"Grid axis {axis} has empty extent")
            if self.boundary[axis] not in BOUNDARIES:
                raise ValueError(f"Grid axis {axis} has unknown boundary {self.boundary[axis]!r}")

    @classmethod
    def line(cls, lower: float, upper: float, points: int, boundary: str = "vanishing") -> Grid:
        return cls(lower=(lower,), upper=(upper,), points=(points,), boundary=(boundary,))

    @classmethod
    def cube(
        cls,
        lower: float,
        upper: float,
        points: int,
        dims: int,
        boundary: str = "vanishing",
    ) -> Grid:
        return cls(
            lower=(lower,) * dims,
            upper=(upper,) * dims,
            points=(points,) * dims,
            boundary=(boundary,) * dims,
        )

    @classmethod
    def product(cls, *grids: Grid) -> Grid:
        return cls(
            lower=tuple(v for g in grids for v in g.lower),
            upper=tuple(v for g in grids for v in g.upper),
            points=tuple(v for g in grids for v in g.points),
            boundary=tuple(v for g in grids for v in g.boundary),
        )

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Grid:
        return cls(
            lower=tuple(raw["lower"]),
            upper=tuple(raw["upper"]),
            points=tuple(raw["points"]),
            boundary=tuple(raw["boundary"]),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points": list(self.points),
            "boundary": list(self.boundary),
        }

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((u - l) / n for l, u, n in zip(self.lower, self.upper, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def check_axis(self, axis: int) -> int:
        if not isinstance(axis, (int, np.integer)) or not 0 <= axis < self.dims:
            raise IndexError(f"axis {axis} out of range for {self.dims}-dimensional grid")
        return int(axis)

    def axis_coordinates(self, axis: int) -> np.ndarray:
        axis = self.check_axis(axis)
        h = self.spacing[axis]
        return self.lower[axis] + (np.arange(self.points[axis]) + 0.5) * h

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*(self.axis_coordinates(a) for a in range(self.dims)), indexing="ij"))

    def coordinate(self, axis: int) -> ScalarField:
        return ScalarField(self, self.mesh()[self.check_axis(axis)])

    def refine(self, factor: int = 2) -> Grid:
        return Grid(
            lower=self.lower,
            upper=self.upper,
            points=tuple(n * factor for n in self.points),
            boundary=self.boundary,
        )

    def wrap(self, points: np.ndarray) -> np.ndarray:
        """Map coordinates on periodic axes back into [lower, upper)."""
        pts = np.array(np.atleast_2d(points), dtype=float)
        for axis, boundary in enumerate(self.boundary):
            if boundary == "periodic":
                length = self.upper[axis] - self.lower[axis]
                pts[:, axis] = self.lower[axis] + np.mod(pts[:, axis] - self.lower[axis], length)
        return pts

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        return np.all((pts >= lower) & (pts <= upper), axis=1)


def _finite_values(grid: Grid, values: Any, dtype: type) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.size != grid.size:
        raise ValueError(f"Field has {arr.size} values, grid has {grid.size} points")
    arr = arr.reshape(grid.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("Field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _finite_values(self.grid, self.values, np.float64))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> ScalarField:
        return cls(grid, np.broadcast_to(fn(*grid.mesh()), grid.shape))

    @classmethod
    def constant(cls, grid: Grid, value: float = 0.0) -> ScalarField:
        return cls(grid, np.full(grid.shape, float(value)))


@dataclass(frozen=True, eq=False)
class ComplexField:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _finite_values(self.grid, self.values, np.complex128))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> ComplexField:
        return cls(grid, np.broadcast_to(fn(*grid.mesh()), grid.shape))

    def norm(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume)

    def normalized(self) -> ComplexField:
        return ComplexField(self.grid, self.values / np.sqrt(self.norm()))

    def inner(self, other: ComplexField) -> complex:
        """Quadrature of conj(self) * other."""
        if other.grid != self.grid:
            raise ValueError("Fields live on different grids")
        return complex(np.vdot(self.values, other.values) * self.grid.cell_volume)


AnyField = Union[ScalarField, ComplexField]


def _first_derivative(values: np.ndarray, h: float, boundary: str, order: int) -> np.ndarray:
    # axis 0 of `values` is the differentiation axis
    f = values
    if boundary == "periodic":
        if order == 2:
            return (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * h)
        near = np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)
        far = np.roll(f, -2, axis=0) - np.roll(f, 2, axis=0)
        return (8.0 * near - far) / (12.0 * h)

    out = np.empty_like(f)
    if order == 2:
        out[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
        out[0] = (4.0 * (f[1] - f[0]) - (f[2] - f[0])) / (2.0 * h)
        out[-1] = -(4.0 * (f[-2] - f[-1]) - (f[-3] - f[-1])) / (2.0 * h)
        return out

    out[2:-2] = (8.0 * (f[3:-1] - f[1:-3]) - (f[4:] - f[:-4])) / (12.0 * h)
    for sign, i0, i1, step in ((1.0, 0, 1, 1), (-1.0, -1, -2, -1)):
        f0, f1 = f[i0], f[i1]
        f2, f3, f4 = f[i0 + 2 * step], f[i0 + 3 * step], f[i0 + 4 * step]
        out[i0] = sign * (48.0 * (f1 - f0) - 36.0 * (f2 - f0) + 16.0 * (f3 - f0) - 3.0 * (f4 - f0)) / (12.0 * h)
        out[i1] = sign * (-3.0 * (f0 - f1) + 18.0 * (f2 - f1) - 6.0 * (f3 - f1) + (f4 - f1)) / (12.0 * h)
    return out


def _second_derivative(values: np.ndarray, h: float, boundary: str, order: int) -> np.ndarray:
    f = values
    h2 = h * h
    if boundary == "periodic":
        near = (np.roll(f, -1, axis=0) - f) + (np.roll(f, 1, axis=0) - f)
        if order == 2:
            return near / h2
        far = (np.roll(f, -2, axis=0) - f) + (np.roll(f, 2, axis=0) - f)
        return (16.0 * near - far) / (12.0 * h2)

    out = np.empty_like(f)
    if order == 2:
        out[1:-1] = ((f[2:] - f[1:-1]) + (f[:-2] - f[1:-1])) / h2
        for i0, step in ((0, 1), (-1, -1)):
            f0 = f[i0]
            out[i0] = (-5.0 * (f[i0 + step] - f0) + 4.0 * (f[i0 + 2 * step] - f0) - (f[i0 + 3 * step] - f0)) / h2
        return out

    mid = f[2:-2]
    out[2:-2] = (16.0 * ((f[3:-1] - mid) + (f[1:-3] - mid)) - ((f[4:] - mid) + (f[:-4] - mid))) / (12.0 * h2)
    for i0, i1, step in ((0, 1, 1), (-1, -2, -1)):
        g = [f[i0 + k * step] for k in range(6)]
        out[i0] = (
            -154.0 * (g[1] - g[0])
            + 214.0 * (g[2] - g[0])
            - 156.0 * (g[3] - g[0])
            + 61.0 * (g[4] - g[0])
            - 10.0 * (g[5] - g[0])
        ) / (12.0 * h2)
        out[i1] = (
            10.0 * (g[0] - g[1])
            - 4.0 * (g[2] - g[1])
            + 14.0 * (g[3] - g[1])
            - 6.0 * (g[4] - g[1])
            + (g[5] - g[1])
        ) / (12.0 * h2)
    return out


def _check_order(grid: Grid, axis: int, order: int, minimum: int) -> None:
    if order not in (2, 4):
        raise ValueError(f"stencil order must be 2 or 4, got {order}")
    if order == 4 and grid.points[axis] < minimum:
        raise ValueError(f"order-4 stencils need at least {minimum} points on axis {axis}")


def _along_axis(
    f: AnyField,
    axis: int,
    kernel: Callable[[np.ndarray, float, str, int], np.ndarray],
    order: int,
) -> np.ndarray:
    grid = f.grid
    moved = np.moveaxis(np.asarray(f.values), axis, 0)
    result = kernel(moved, grid.spacing[axis], grid.boundary[axis], order)
    return np.moveaxis(result, 0, axis)


def _same_kind(f: AnyField, values: np.ndarray) -> AnyField:
    return type(f)(f.grid, values)


def gradient(f: AnyField, axis: int, order: int = 2) -> AnyField:
    """Central finite difference of ``f`` along ``axis``.

    Periodic axes wrap; vanishing axes switch to one-sided stencils of the
    same order at the two edge cells.
    """
    axis = f.grid.check_axis(axis)
    _check_order(f.grid, axis, order, minimum=5)
    return _same_kind(f, _along_axis(f, axis, _first_derivative, order))


def laplacian_like(f: AnyField, i: int, j: int, order: int = 2) -> AnyField:
    """Second derivative d_i d_j f, symmetric in (i, j)."""
    i = f.grid.check_axis(i)
    j = f.grid.check_axis(j)
    if i == j:
        _check_order(f.grid, i, order, minimum=6)
        return _same_kind(f, _along_axis(f, i, _second_derivative, order))
    first, second = sorted((i, j))
    return gradient(gradient(f, second, order), first, order)


def integrate(f: AnyField) -> float | complex:
    total = np.sum(f.values) * f.grid.cell_volume
    if isinstance(f, ComplexField):
        return complex(total)
    return float(total)


def spectral_gradient(f: AnyField, axis: int) -> AnyField:
    """FFT derivative treating ``axis`` as periodic; used internally by solvers."""
    grid = f.grid
    axis = grid.check_axis(axis)
    n = grid.points[axis]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=grid.spacing[axis])
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * grid.dims
    shape[axis] = n
    spectrum = np.fft.fft(f.values, axis=axis) * (1j * k.reshape(shape))
    result = np.fft.ifft(spectrum, axis=axis)
    if isinstance(f, ScalarField):
        return ScalarField(grid, result.real)
    return ComplexField(grid, result)


def richardson(coarse: float, fine: float, order: int = 2) -> float:
    """Extrapolate two estimates taken on grids with spacing h and h/2."""
    factor = 2.0**order
    return (factor * fine - coarse) / (factor - 1.0)


def interpolator(grid: Grid, values: np.ndarray, *, clip: bool = False) -> Callable[[np.ndarray], np.ndarray]:
    """Multilinear interpolant of ``values`` over ``grid``.

    ``values`` has the grid shape, optionally followed by component axes, so
    several fields can share one interpolant. Periodic coordinates are
    wrapped. Points outside a vanishing axis raise DomainError unless
    ``clip`` is set, in which case they are pulled back onto the wall.
    """
    values = np.asarray(values)
    if values.shape[: grid.dims] != grid.shape:
        raise ValueError("values do not match the grid shape")
    axes = []
    for axis in range(grid.dims):
        coords = grid.axis_coordinates(axis)
        if grid.boundary[axis] == "periodic":
            h = grid.spacing[axis]
            coords = np.concatenate(([coords[0] - h], coords, [coords[-1] + h]))
            pad = [(0, 0)] * values.ndim
            pad[axis] = (1, 1)
            values = np.pad(values, pad, mode="wrap")
        axes.append(coords)
    table = RegularGridInterpolator(tuple(axes), values, method="linear", bounds_error=False, fill_value=None)

    def _evaluate(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != grid.dims:
            raise ValueError(f"points must have {grid.dims} columns")
        pts = grid.wrap(pts)
        if clip:
            pts = np.clip(pts, grid.lower, grid.upper)
        else:
            inside = grid.contains(pts)
            if not np.all(inside):
                bad = pts[~inside][0]
                raise DomainError(f"point {bad.tolist()} lies outside the grid domain", where="fields.interpolate")
        return table(pts)

    return _evaluate


def interpolate(f: AnyField, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``f`` at ``points`` of shape (n, dims)."""
    return interpolator(f.grid, f.values)(points)


def _header(f: AnyField) -> dict[str, Any]:
    return {
        "kind": "complex" if isinstance(f, ComplexField) else "real",
        "dims": f.grid.dims,
        **f.grid.to_dict(),
    }


def write_field(path: str | Path, f: AnyField) -> Path:
    """Write a field as ``.csv`` (header comment + rows) or ``.bin`` (header line + raw values)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(_header(f))
    flat = np.asarray(f.values).reshape(-1)

    if target.suffix == ".bin":
        dtype = "<c16" if isinstance(f, ComplexField) else "<f8"
        with target.open("wb") as fh:
            fh.write(header.encode("utf-8") + b"\n")
            fh.write(flat.astype(dtype).tobytes())
        return target

    if isinstance(f, ComplexField):
        rows = np.column_stack((flat.real, flat.imag))
        columns = "real,imag"
    else:
        rows = flat.reshape(-1, 1)
        columns = "value"
    np.savetxt(target, rows, delimiter=",", header=f"{header}\n{columns}", comments="# ", fmt="%.17g")
    return target


def read_field(path: str | Path) -> AnyField:
    source = Path(path)
    if source.suffix == ".bin":
        with source.open("rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
        dtype = "<c16" if header["kind"] == "complex" else "<f8"
        flat = np.frombuffer(raw, dtype=dtype)
    else:
        with source.open("r", encoding="utf-8") as fh:
            first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"Field file {source} has no header line")
        header = json.loads(first.lstrip("#").strip())
        table = np.loadtxt(source, delimiter=",", comments="#", ndmin=2)
        flat = table[:, 0] + 1j * table[:, 1] if header["kind"] == "complex" else table[:, 0]

    grid = Grid.from_dict(header)
    if header["kind"] == "complex":
        return ComplexField(grid, flat)
    return ScalarField(grid, flat)
