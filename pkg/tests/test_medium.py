import numpy as np
import pytest

from qholo.errors import (
    AllZeroPump,
    EnergyConservationError,
    PolingResolutionError,
    ShapeMismatch,
)
from qholo.grid import GridSpec
from qholo.medium import (
    HologramParams,
    InteractionParams,
    PumpParams,
    binarize_poling,
    binarize_volume,
    build_drive,
    build_hologram,
    build_pump,
    clip_unit,
    effective_coupling,
    first_harmonic,
    hologram_volume,
)
from qholo.modes import ModeBasis

TWO_OVER_PI = 2 / np.pi


def interaction(**kwargs):
    values = dict(
        lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
        n_p=2.23, n_s=2.16, n_i=2.16, kappa=1.0,
    )
    values.update(kwargs)
    return InteractionParams(**values)


@pytest.fixture
def grid():
    return GridSpec(64, 64, 2e-6, 2e-6, 4, 50e-6)


class TestInteractionParams:
    """Wavelength bookkeeping and the poling period."""

    def test_period_derived_for_perfect_matching(self):
        params = interaction()
        mismatch = params.k_p - params.k_s - params.k_i
        assert params.delta_k == 0.0
        assert params.poling_period == pytest.approx(2 * np.pi / mismatch)

    def test_residual_mismatch_from_given_period(self):
        params = interaction(poling_period=8e-6)
        mismatch = params.k_p - params.k_s - params.k_i
        assert params.delta_k == pytest.approx(mismatch - 2 * np.pi / 8e-6)

    def test_period_and_mismatch_exclusive(self):
        with pytest.raises(ValueError):
            interaction(poling_period=8e-6, delta_k=0.0)

    def test_energy_conservation(self):
        with pytest.raises(EnergyConservationError):
            interaction(lambda_i=1000e-9)

    def test_negative_coupling_rejected(self):
        with pytest.raises(ValueError):
            interaction(kappa=-1.0)

    def test_zero_coupling_allowed(self):
        assert interaction(kappa=0.0).kappa == 0.0


class TestPump:
    def test_power_normalization(self, grid):
        basis = ModeBasis.lg(1, 16e-6, 532e-9, 2.23)
        pump = PumpParams(basis, [0.3 + 0.1j, 1.0, -0.5j], power=2e-3)
        field = build_pump(pump, 0.0, grid)
        assert field.power() == pytest.approx(2e-3, rel=1e-10)

    def test_scale_invariance(self, grid):
        basis = ModeBasis.lg(1, 16e-6, 532e-9, 2.23)
        a = build_pump(PumpParams(basis, [0.0, 1.0, 0.5], power=1e-3), 0.0, grid)
        b = build_pump(PumpParams(basis, [0.0, 3.0, 1.5], power=1e-3), 0.0, grid)
        assert np.allclose(a.values, b.values, rtol=0, atol=1e-12 * np.max(np.abs(a.values)))

    def test_all_zero_pump(self, grid):
        basis = ModeBasis.lg(0, 16e-6, 532e-9, 2.23)
        with pytest.raises(AllZeroPump):
            build_pump(PumpParams(basis, [0.0], power=1e-3), 0.0, grid)

    def test_coefficient_shape(self):
        basis = ModeBasis.lg(1, 16e-6, 532e-9)
        with pytest.raises(ShapeMismatch):
            PumpParams(basis, [1.0, 0.0], power=1e-3)


class TestHologram:
    @pytest.fixture
    def basis(self):
        return ModeBasis.lg(1, 1.0, 1064e-9, 2.16)

    def test_clip_keeps_unit_disk(self):
        u = np.array([0.5, 2.0 + 0.0j, -3j, 0.6 + 0.8j])
        clipped = clip_unit(u)
        assert np.all(np.abs(clipped) <= 1.0 + 1e-15)
        assert clipped[0] == 0.5
        assert clipped[1] == pytest.approx(1.0)
        assert clipped[2] == pytest.approx(-1j)

    def test_wide_fundamental_gives_uniform_crystal(self, basis, grid):
        raw = np.zeros((1, basis.size), dtype=complex)
        raw[0, basis.fundamental_index()] = 0.5
        values = build_hologram(HologramParams(basis, 1, raw), 0, grid).values
        assert np.allclose(values, 0.5, atol=1e-6)

    def test_oversized_coefficients_are_clipped(self, basis, grid):
        raw = np.zeros((1, basis.size), dtype=complex)
        raw[0, basis.fundamental_index()] = 2.0
        values = build_hologram(HologramParams(basis, 1, raw), 0, grid).values
        assert np.max(np.abs(values)) <= 1.0 + 1e-12
        assert np.allclose(np.abs(values), 1.0)

    def test_segments(self, basis, grid):
        raw = np.zeros((2, basis.size), dtype=complex)
        raw[0, basis.fundamental_index()] = 0.25
        raw[1, basis.fundamental_index()] = -0.75j
        hologram = HologramParams(basis, 2, raw)
        assert [hologram.segment_of(j, 4) for j in range(4)] == [0, 0, 1, 1]
        volume = hologram_volume(hologram, grid)
        assert volume.shape == (64, 64, 4)
        assert np.allclose(volume[:, :, 1], 0.25, atol=1e-6)
        assert np.allclose(volume[:, :, 2], -0.75j, atol=1e-6)

    def test_segments_must_divide_slices(self, basis):
        hologram = HologramParams(basis, 3, np.zeros((3, basis.size)))
        with pytest.raises(ShapeMismatch):
            hologram.segment_of(0, 4)


class TestDrive:
    def test_carrier_only_with_mismatch(self, grid):
        values = np.ones((64, 64), dtype=complex)
        matched = interaction()
        assert effective_coupling(values, 1, matched, grid) is values
        detuned = interaction(poling_period=matched.poling_period * 1.01)
        out = effective_coupling(values, 1, detuned, grid)
        assert np.allclose(out, np.exp(-1j * detuned.delta_k * grid.slice_z(1)))

    def test_drive_scales_with_coupling(self, grid):
        pump = PumpParams(ModeBasis.lg(0, 16e-6, 532e-9, 2.23), [1.0], power=1e-3)
        crystal = ModeBasis.lg(0, 1.0, 1064e-9, 2.16)
        hologram = HologramParams(crystal, 1, [[1.0]])
        one = build_drive(pump, hologram, interaction(kappa=1.0), grid)
        two = build_drive(pump, hologram, interaction(kappa=2.0), grid)
        assert one.shape == (4, 64, 64)
        assert np.allclose(two, 2 * one)
        assert not np.any(build_drive(pump, hologram, interaction(kappa=0.0), grid))


class TestBinarize:
    """Duty-cycle and phase encoding of the poling pattern."""

    PERIOD = 8e-6

    def binarize(self, value, nz, dz, subsamples):
        grid = GridSpec(8, 8, 1e-6, 1e-6, nz, dz)
        volume = np.full((8, 8, nz), value, dtype=complex)
        params = interaction(poling_period=self.PERIOD)
        return binarize_volume(volume, params, grid, subsamples_per_period=subsamples)

    def test_full_modulation(self):
        poling = self.binarize(1.0, 2, 8 * self.PERIOD, 64)
        assert poling.subsamples_per_slice == 512
        assert poling.signs.dtype == np.int8
        assert set(np.unique(poling.signs)) == {-1, 1}
        harmonic = first_harmonic(poling)
        assert harmonic.shape == (8, 8, 2)
        assert np.max(np.abs(harmonic - TWO_OVER_PI)) / TWO_OVER_PI < 1e-3

    def test_quarter_period_phase_shift(self):
        reference = self.binarize(1.0, 2, 8 * self.PERIOD, 64)
        shifted = self.binarize(1j, 2, 8 * self.PERIOD, 64)
        assert np.array_equal(shifted.signs, np.roll(reference.signs, -16, axis=2))
        harmonic = first_harmonic(shifted)
        assert np.max(np.abs(harmonic - 1j * TWO_OVER_PI)) / TWO_OVER_PI < 1e-3

    def test_half_modulation_duty_cycle(self):
        poling = self.binarize(0.5, 2, 2 * self.PERIOD, 2048)
        harmonic = first_harmonic(poling)
        assert np.max(np.abs(harmonic - 0.5 * TWO_OVER_PI)) / TWO_OVER_PI < 1e-3

    def test_too_few_subsamples(self):
        with pytest.raises(PolingResolutionError):
            self.binarize(1.0, 2, 8 * self.PERIOD, 8)

    def test_coarse_fabrication_pitch(self):
        grid = GridSpec(8, 8, 1e-6, 1e-6, 2, 8 * self.PERIOD)
        params = interaction(poling_period=self.PERIOD)
        volume = np.ones((8, 8, 2), dtype=complex)
        with pytest.raises(PolingResolutionError):
            binarize_volume(volume, params, grid, resolution=4e-6)

    def test_metadata(self):
        poling = self.binarize(1.0, 2, 8 * self.PERIOD, 64)
        meta = poling.metadata()
        assert meta["dims"] == {"nx": 8, "ny": 8, "nz": 1024}
        assert meta["dtype"] == "int8"
        assert meta["pitch"]["dz"] == pytest.approx(self.PERIOD / 64)

    def test_binarize_poling_from_parameters(self):
        grid = GridSpec(8, 8, 1e-6, 1e-6, 2, 8 * self.PERIOD)
        params = interaction(poling_period=self.PERIOD)
        basis = ModeBasis.lg(0, 1.0, 532e-9)
        hologram = HologramParams(basis, 2, [[0.9], [0.4j]])
        poling = binarize_poling(hologram, params, grid)
        direct = binarize_volume(hologram_volume(hologram, grid), params, grid)
        assert np.array_equal(poling.signs, direct.signs)
        assert poling.subsamples_per_slice == 512
