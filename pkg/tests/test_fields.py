"""Grids, stencils, quadrature, interpolation and field files."""

import numpy as np
import pytest

from onticqm.errors import DomainError
from onticqm.fields import (
    ComplexField,
    Grid,
    ScalarField,
    gradient,
    integrate,
    interpolate,
    laplacian_like,
    read_field,
    richardson,
    spectral_gradient,
    write_field,
)


def _sine_error(points: int, order: int) -> float:
    grid = Grid.line(0.0, 2.0 * np.pi, points, boundary="periodic")
    f = ScalarField.from_function(grid, np.sin)
    x = grid.axis_coordinates(0)
    return float(np.max(np.abs(gradient(f, 0, order).values - np.cos(x))))


class TestGrid:
    def test_points_are_cell_centred(self):
        grid = Grid.line(0.0, 1.0, 4)
        np.testing.assert_allclose(grid.axis_coordinates(0), [0.125, 0.375, 0.625, 0.875])
        assert grid.spacing == (0.25,)
        assert grid.cell_volume == pytest.approx(0.25)

    def test_cube_and_product_agree(self):
        line = Grid.line(-1.0, 1.0, 8)
        assert Grid.cube(-1.0, 1.0, 8, 2) == Grid.product(line, line)
        assert Grid.cube(-1.0, 1.0, 8, 3).shape == (8, 8, 8)

    def test_refine_keeps_box(self):
        grid = Grid.line(-2.0, 3.0, 10, boundary="periodic").refine(2)
        assert grid.points == (20,)
        assert grid.lower == (-2.0,) and grid.upper == (3.0,)
        assert grid.boundary == ("periodic",)

    def test_dict_round_trip(self):
        grid = Grid.cube(-1.0, 1.0, 6, 2, boundary="periodic")
        assert Grid.from_dict(grid.to_dict()) == grid

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lower": (0.0,), "upper": (1.0,), "points": (3,), "boundary": ("vanishing",)},
            {"lower": (1.0,), "upper": (1.0,), "points": (8,), "boundary": ("vanishing",)},
            {"lower": (0.0,), "upper": (1.0,), "points": (8,), "boundary": ("reflecting",)},
            {"lower": (0.0, 0.0), "upper": (1.0,), "points": (8,), "boundary": ("vanishing",)},
        ],
    )
    def test_invalid_grids_rejected(self, kwargs):
        with pytest.raises(ValueError):
            Grid(**kwargs)

    def test_wrap_only_touches_periodic_axes(self):
        grid = Grid(lower=(0.0, 0.0), upper=(1.0, 1.0), points=(8, 8), boundary=("periodic", "vanishing"))
        wrapped = grid.wrap(np.array([[1.25, 1.25]]))
        np.testing.assert_allclose(wrapped, [[0.25, 1.25]])


class TestFields:
    def test_non_finite_values_rejected(self):
        grid = Grid.line(0.0, 1.0, 8)
        values = np.zeros(8)
        values[3] = np.nan
        with pytest.raises(ValueError):
            ScalarField(grid, values)

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            ScalarField(Grid.line(0.0, 1.0, 8), np.zeros(9))

    def test_values_are_read_only(self):
        f = ScalarField.constant(Grid.line(0.0, 1.0, 8), 2.0)
        with pytest.raises(ValueError):
            f.values[0] = 1.0

    def test_norm_and_inner(self):
        grid = Grid.line(-10.0, 10.0, 512)
        psi = ComplexField.from_function(grid, lambda x: np.exp(-(x**2) / 4.0 + 2j * x)).normalized()
        assert psi.norm() == pytest.approx(1.0, abs=1e-12)
        assert psi.inner(psi) == pytest.approx(1.0 + 0.0j, abs=1e-12)

    def test_gaussian_quadrature(self):
        grid = Grid.line(-10.0, 10.0, 512)
        f = ScalarField.from_function(grid, lambda x: np.exp(-(x**2) / 2.0) / np.sqrt(2.0 * np.pi))
        assert integrate(f) == pytest.approx(1.0, abs=1e-10)


class TestStencils:
    @pytest.mark.parametrize("order", [2, 4])
    @pytest.mark.parametrize("boundary", ["vanishing", "periodic"])
    def test_gradient_of_constant_is_exactly_zero(self, order, boundary):
        grid = Grid.cube(-1.0, 1.0, 12, 2, boundary=boundary)
        f = ScalarField.constant(grid, 3.7)
        for axis in range(2):
            assert np.all(gradient(f, axis, order).values == 0.0)

    def test_fourth_order_is_exact_on_cubics(self):
        grid = Grid.line(-1.0, 1.0, 16)
        x = grid.axis_coordinates(0)
        f = ScalarField(grid, x**3 - 2.0 * x)
        np.testing.assert_allclose(gradient(f, 0, 4).values, 3.0 * x**2 - 2.0, atol=1e-10)

    def test_second_derivative_edges_exact_on_quartics(self):
        grid = Grid.line(-1.0, 1.0, 16)
        x = grid.axis_coordinates(0)
        f = ScalarField(grid, x**4)
        np.testing.assert_allclose(laplacian_like(f, 0, 0, 4).values, 12.0 * x**2, atol=1e-9)

    def test_mixed_derivative(self):
        grid = Grid.cube(-1.0, 1.0, 10, 2)
        x, y = grid.mesh()
        f = ScalarField(grid, x * y)
        np.testing.assert_allclose(laplacian_like(f, 0, 1, 4).values, 1.0, atol=1e-10)
        np.testing.assert_allclose(laplacian_like(f, 1, 0, 4).values, 1.0, atol=1e-10)

    @pytest.mark.parametrize("order, expected", [(2, 4.0), (4, 16.0)])
    def test_convergence_order(self, order, expected):
        ratio = _sine_error(64, order) / _sine_error(128, order)
        assert expected * 0.8 < ratio < expected * 1.2

    def test_unsupported_order(self):
        f = ScalarField.constant(Grid.line(0.0, 1.0, 8))
        with pytest.raises(ValueError):
            gradient(f, 0, 6)

    def test_spectral_gradient_of_sine(self):
        grid = Grid.line(0.0, 2.0 * np.pi, 64, boundary="periodic")
        f = ScalarField.from_function(grid, lambda x: np.sin(3.0 * x))
        x = grid.axis_coordinates(0)
        np.testing.assert_allclose(spectral_gradient(f, 0).values, 3.0 * np.cos(3.0 * x), atol=1e-10)

    def test_richardson_removes_leading_term(self):
        assert richardson(1.04, 1.01, 2) == pytest.approx(1.0)
        assert richardson(1.0 + 16e-4, 1.0 + 1e-4, 4) == pytest.approx(1.0)


class TestInterpolation:
    def test_linear_fields_are_exact(self):
        grid = Grid.line(0.0, 1.0, 10)
        f = ScalarField.from_function(grid, lambda x: 2.0 * x + 1.0)
        np.testing.assert_allclose(interpolate(f, np.array([[0.5], [0.01], [0.99]])), [2.0, 1.02, 2.98], atol=1e-12)

    def test_outside_vanishing_domain(self):
        f = ScalarField.constant(Grid.line(0.0, 1.0, 10), 1.0)
        with pytest.raises(DomainError):
            interpolate(f, np.array([[1.5]]))

    def test_periodic_coordinates_wrap(self):
        grid = Grid.line(0.0, 2.0 * np.pi, 256, boundary="periodic")
        f = ScalarField.from_function(grid, np.sin)
        inside, outside = interpolate(f, np.array([[1.0], [1.0 + 2.0 * np.pi]]))
        assert outside == pytest.approx(inside, abs=1e-12)


class TestFieldFiles:
    @pytest.mark.parametrize("suffix", [".csv", ".bin"])
    def test_complex_field_survives_disk(self, tmp_path, suffix):
        grid = Grid.cube(-1.0, 1.0, 6, 2, boundary="periodic")
        x, y = grid.mesh()
        f = ComplexField(grid, np.exp(1j * x) * (1.0 + y))
        back = read_field(write_field(tmp_path / f"psi{suffix}", f))
        assert isinstance(back, ComplexField)
        assert back.grid == grid
        np.testing.assert_array_equal(back.values, f.values)

    def test_csv_without_header(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("1.0\n2.0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_field(path)
