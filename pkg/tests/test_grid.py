import numpy as np
import pytest

from qholo.errors import NonFiniteField
from qholo.grid import (
    ComplexField,
    Direction,
    GridSpec,
    fft2,
    fft2_unitary,
    ifft2,
    sample_vacuum,
)
from qholo.modes import ModeBasis, project


class TestGridSpec:
    """GridSpec construction and derived quantities."""

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            GridSpec(12, 16, 1e-6, 1e-6, 4, 1e-6)

    def test_rejects_tiny_grid(self):
        with pytest.raises(ValueError):
            GridSpec(4, 4, 1e-6, 1e-6, 4, 1e-6)

    def test_rejects_non_positive_pitch(self):
        with pytest.raises(ValueError):
            GridSpec(16, 16, 0.0, 1e-6, 4, 1e-6)
        with pytest.raises(ValueError):
            GridSpec(16, 16, 1e-6, 1e-6, 0, 1e-6)

    def test_length_and_axis(self):
        grid = GridSpec(16, 8, 2e-6, 3e-6, 5, 10e-6)
        assert grid.length == pytest.approx(50e-6)
        assert grid.x[8] == 0.0
        assert grid.y[4] == 0.0
        assert grid.window == pytest.approx((32e-6, 24e-6))
        assert grid.slice_positions() == pytest.approx((np.arange(5) + 0.5) * 10e-6)

    def test_field_shape_checked(self):
        grid = GridSpec(8, 8, 1e-6, 1e-6, 1, 1e-6)
        with pytest.raises(ValueError):
            ComplexField(np.zeros((8, 16)), grid)

    def test_check_finite(self):
        grid = GridSpec(8, 8, 1e-6, 1e-6, 1, 1e-6)
        values = np.zeros((8, 8), dtype=complex)
        values[2, 3] = np.nan
        with pytest.raises(NonFiniteField):
            ComplexField(values, grid).check_finite()


class TestUnitaryFFT:
    """The unitary 2D FFT."""

    def test_centered_delta(self):
        grid = GridSpec(32, 16, 1e-6, 1e-6, 1, 1e-6)
        values = np.zeros((32, 16), dtype=complex)
        values[16, 8] = 1.0
        spectrum = fft2_unitary(ComplexField(values, grid), "forward").values
        assert np.allclose(np.abs(spectrum), 1 / np.sqrt(32 * 16), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("n", [8, 32, 256])
    def test_parseval_and_round_trip(self, n):
        rng = np.random.default_rng(n)
        values = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        spectrum = fft2(values)
        norm = np.linalg.norm(values)
        assert abs(np.linalg.norm(spectrum) - norm) < 1e-12 * norm
        back = ifft2(spectrum)
        assert np.max(np.abs(back - values)) < 1e-12 * np.max(np.abs(values))

    def test_gaussian_spectrum(self):
        grid = GridSpec(128, 128, 1e-6, 1e-6, 1, 1e-6)
        w = 8 * grid.dx
        x, y = grid.coordinates()
        field = ComplexField(np.exp(-(x ** 2 + y ** 2) / w ** 2), grid)
        spectrum = np.abs(fft2_unitary(field, Direction.forward).values)
        kx, ky = grid.frequencies()
        expected = (
            np.pi * w ** 2 / grid.pixel_area / np.sqrt(grid.nx * grid.ny)
            * np.exp(-(kx ** 2 + ky ** 2) * w ** 2 / 4)
        )
        assert np.unravel_index(np.argmax(spectrum), spectrum.shape) == (0, 0)
        assert np.linalg.norm(spectrum - expected) / np.linalg.norm(expected) < 1e-6

    def test_invalid_direction(self):
        grid = GridSpec(8, 8, 1e-6, 1e-6, 1, 1e-6)
        with pytest.raises(ValueError):
            fft2_unitary(ComplexField(np.zeros((8, 8)), grid), "sideways")


class TestVacuum:
    """Reparameterized vacuum batches."""

    @pytest.fixture
    def grid(self):
        return GridSpec(32, 32, 4e-6, 4e-6, 1, 1e-6)

    def test_same_seed_bit_identical(self, grid):
        a = sample_vacuum(7, 16, grid)
        b = sample_vacuum(7, 16, grid)
        assert np.array_equal(a.signal, b.signal)
        assert np.array_equal(a.idler, b.idler)

    def test_streams_differ(self, grid):
        a = sample_vacuum(7, 4, grid, stream=1)
        b = sample_vacuum(7, 4, grid, stream=2)
        assert not np.array_equal(a.signal, b.signal)

    def test_chunks_match_full_batch(self, grid):
        batch = sample_vacuum(3, 10, grid)
        signal, idler = batch.chunk(4, 7)
        full_signal, full_idler = sample_vacuum(3, 10, grid).chunk(0, 10)
        assert np.array_equal(signal, full_signal[4:7])
        assert np.array_equal(idler, full_idler[4:7])

    def test_thread_count_does_not_change_samples(self, grid):
        serial = sample_vacuum(11, 12, grid, threads=1).chunk(0, 12)
        parallel = sample_vacuum(11, 12, grid, threads=4).chunk(0, 12)
        assert np.array_equal(serial[0], parallel[0])
        assert np.array_equal(serial[1], parallel[1])

    def test_rejects_bad_batch(self, grid):
        with pytest.raises(ValueError):
            sample_vacuum(0, 0, grid)

    @pytest.mark.parametrize("n, dx", [(32, 4e-6), (64, 2e-6)])
    def test_mode_variance_is_grid_independent(self, n, dx):
        grid = GridSpec(n, n, dx, dx, 1, 1e-6)
        batch = sample_vacuum(5, 2000, grid, sigma0_sq=0.5)
        mode = ModeBasis.lg(0, 16e-6, 1064e-9).evaluate(0.0, grid)
        coeffs = project(batch.signal, mode, grid.pixel_area)[:, 0]
        variance = np.mean(np.abs(coeffs) ** 2)
        assert abs(variance - 0.5) < 5 * 0.5 / np.sqrt(2000)
