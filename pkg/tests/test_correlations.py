import numpy as np
import pytest
from scipy.optimize import curve_fit

from qholo.correlations import (
    CorrelationMatrix,
    compute_P,
    compute_P_backward,
    estimate_moments,
    fidelity,
    fourth_moment_probability,
    moments_backward,
    moments_from_coefficients,
    normalize_probability,
    perturbative_jsa,
)
from qholo.errors import DegenerateP, ShapeMismatch
from qholo.grid import GridSpec, sample_vacuum
from qholo.medium import HologramParams, InteractionParams, PumpParams
from qholo.modes import ModeBasis, project
from qholo.pipeline import SPDCObjective
from qholo.propagator import FieldPair


def vacuum_coefficients(rng, batch, size):
    """Complex Gaussian coefficients with variance 1/2, as projected vacuum."""
    return 0.5 * (rng.standard_normal((batch, size)) + 1j * rng.standard_normal((batch, size)))


def squeezed_coefficients(r, batch, seed=0):
    """Single-mode-pair two-mode squeezed vacuum in the symmetric-ordering picture."""
    rng = np.random.default_rng(seed)
    a = vacuum_coefficients(rng, batch, 1)
    b = vacuum_coefficients(rng, batch, 1)
    c_s = np.cosh(r) * a + 1j * np.sinh(r) * np.conj(b)
    c_i = np.cosh(r) * b + 1j * np.sinh(r) * np.conj(a)
    return c_s, c_i


class TestMoments:
    """Moment estimation from detection coefficients."""

    def test_squeezed_vacuum_statistics(self):
        r = 0.5
        c_s, c_i = squeezed_coefficients(r, 20000)
        moments = moments_from_coefficients(c_s, c_i)
        n = np.sinh(r) ** 2
        assert moments.N_s[0] == pytest.approx(n, abs=0.03)
        assert moments.N_i[0] == pytest.approx(n, abs=0.03)
        assert np.abs(moments.phi[0, 0]) ** 2 == pytest.approx(n * (n + 1), abs=0.03)
        assert abs(moments.exchange[0, 0]) < 0.03

    def test_vacuum_has_no_occupation(self):
        rng = np.random.default_rng(1)
        moments = moments_from_coefficients(
            vacuum_coefficients(rng, 20000, 3), vacuum_coefficients(rng, 20000, 2)
        )
        assert np.all(np.abs(moments.N_s) < 0.03)
        assert moments.phi.shape == (3, 2)
        assert moments.G1_s.shape == (3, 3)

    def test_needs_two_samples(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            moments_from_coefficients(
                vacuum_coefficients(rng, 1, 2), vacuum_coefficients(rng, 1, 2)
            )

    def test_debias_removes_finite_batch_bias(self):
        rng = np.random.default_rng(3)
        biased, debiased = [], []
        for _ in range(200):
            c_s, c_i = vacuum_coefficients(rng, 8, 1), vacuum_coefficients(rng, 8, 1)
            biased.append(moments_from_coefficients(c_s, c_i).pair_power[0, 0])
            debiased.append(moments_from_coefficients(c_s, c_i, debias=True).pair_power[0, 0])
        assert np.mean(biased) > 0.02
        assert abs(np.mean(debiased)) < abs(np.mean(biased)) / 3

    @pytest.mark.parametrize("debias", [False, True])
    def test_backward_matches_finite_differences(self, debias):
        rng = np.random.default_rng(4)
        c_s = 2 * vacuum_coefficients(rng, 5, 3)
        c_i = 2 * vacuum_coefficients(rng, 5, 2)
        w_s, w_i = rng.standard_normal(3), rng.standard_normal(2)
        w_pair = rng.standard_normal((3, 2))

        def objective(cs, ci):
            m = moments_from_coefficients(cs, ci, debias=debias)
            return np.sum(w_s * m.N_s) + np.sum(w_i * m.N_i) + np.sum(w_pair * m.pair_power)

        moments = moments_from_coefficients(c_s, c_i, debias=debias)
        g_s, g_i = moments_backward(w_s, w_i, w_pair, c_s, c_i, moments, debias)
        step = 1e-6
        for analytic, which in ((g_s, 0), (g_i, 1)):
            base = (c_s, c_i)[which]
            numeric = np.zeros_like(base)
            for index in np.ndindex(base.shape):
                for direction in (1.0, 1j):
                    plus, minus = base.copy(), base.copy()
                    plus[index] += step * direction
                    minus[index] -= step * direction
                    args_p = (plus, c_i) if which == 0 else (c_s, plus)
                    args_m = (minus, c_i) if which == 0 else (c_s, minus)
                    slope = (objective(*args_p) - objective(*args_m)) / (2 * step)
                    numeric[index] += slope * direction
            assert np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic) < 1e-6

    def test_fourth_moment_estimator_on_squeezed_vacuum(self):
        r = 0.5
        c_s, c_i = squeezed_coefficients(r, 20000, seed=5)
        raw = fourth_moment_probability(c_s, c_i)
        n = np.sinh(r) ** 2
        # <n_s n_i> = |Phi|^2 + N_s N_i for a Gaussian state
        expected = n * (n + 1) + n * n
        assert raw[0, 0] == pytest.approx(expected, abs=0.05)

    def test_estimate_moments_projects_at_exit_face(self):
        grid = GridSpec(16, 16, 8e-6, 8e-6, 2, 50e-6)
        basis = ModeBasis.lg(1, 20e-6, 1064e-9, 2.16)
        signal, idler = sample_vacuum(3, 6, grid).chunk(0, 6)
        moments = estimate_moments(FieldPair(signal, idler, grid.length, grid), basis, basis)
        modes = basis.evaluate(grid.length, grid)
        expected = moments_from_coefficients(
            project(signal, modes, grid.pixel_area), project(idler, modes, grid.pixel_area)
        )
        assert np.allclose(moments.N_s, expected.N_s, rtol=1e-12)
        assert np.allclose(moments.phi, expected.phi, rtol=1e-12)


class TestProbability:
    def test_normalized_to_unit_sum(self):
        raw = np.array([[0.2, 0.1], [0.3, 0.4]])
        P = normalize_probability(raw, ["a", "b"], ["c", "d"])
        assert np.sum(P.P) == pytest.approx(1.0)
        assert P.floored_mass == 0.0
        assert P.rows()[0] == {"signal": "a", "c": pytest.approx(0.2), "d": pytest.approx(0.1)}

    def test_negative_entries_are_floored(self):
        raw = np.array([[1.0, -0.5], [0.5, 1.0]])
        P = normalize_probability(raw)
        assert np.all(P.P >= 0)
        assert P.P[0, 1] == 0.0
        assert np.sum(P.P) == pytest.approx(1.0)
        assert P.floored_mass == pytest.approx(0.2)

    @pytest.mark.parametrize("raw", [np.zeros((2, 2)), -np.ones((2, 2)), np.full((2, 2), np.nan)])
    def test_degenerate(self, raw):
        with pytest.raises(DegenerateP):
            normalize_probability(raw)

    def test_invariant_under_common_scaling(self):
        c_s, c_i = squeezed_coefficients(0.7, 500, seed=6)
        moments = moments_from_coefficients(c_s, c_i)
        assert np.allclose(compute_P(moments).P, compute_P(moments.scaled(3.0)).P, rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        raw = rng.uniform(0.1, 1.0, (3, 3))
        weights = rng.standard_normal((3, 3))
        P = normalize_probability(raw).P
        analytic = compute_P_backward(weights, raw, P)
        numeric = np.zeros_like(raw)
        step = 1e-7
        for index in np.ndindex(raw.shape):
            plus, minus = raw.copy(), raw.copy()
            plus[index] += step
            minus[index] -= step
            numeric[index] = (
                np.sum(weights * normalize_probability(plus).P)
                - np.sum(weights * normalize_probability(minus).P)
            ) / (2 * step)
        assert np.allclose(numeric, analytic, rtol=1e-6, atol=1e-9)


class TestFidelity:
    def test_identical(self):
        P = np.array([[0.5, 0.0], [0.0, 0.5]])
        assert fidelity(P, P) == pytest.approx(1.0)

    def test_disjoint(self):
        assert fidelity(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 0.0

    def test_uniform_against_single_cell(self):
        uniform = CorrelationMatrix(np.full((2, 2), 0.25))
        single = CorrelationMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert fidelity(uniform, single) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fidelity(np.ones((2, 2)) / 4, np.ones((3, 3)) / 9)


def weak_coupling_setup(kappa):
    grid = GridSpec(32, 32, 4e-6, 4e-6, 4, 250e-6)
    params = InteractionParams(
        lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
        n_p=2.23, n_s=2.16, n_i=2.16, kappa=kappa,
    )
    pump = PumpParams(ModeBasis.lg(0, 16e-6, 532e-9, 2.23), [1.0], power=1e-3)
    hologram = HologramParams(ModeBasis.lg(0, 1.0, 1064e-9, 2.16), 1, [[1.0]])
    basis_s = ModeBasis.lg(2, 16e-6, 1064e-9, 2.16)
    basis_i = ModeBasis.lg(2, 16e-6, 1064e-9, 2.16)
    return grid, params, pump, hologram, basis_s, basis_i


def monte_carlo_coefficients(grid, params, pump, hologram, basis_s, basis_i, vacuum, threads=1):
    objective = SPDCObjective(
        grid, params, pump.basis, pump.power, hologram.basis, hologram.n_seg, basis_s, basis_i,
        chunk_size=500, threads=threads,
    )
    return objective.forward_batch(objective.drive(pump, hologram), vacuum)


def bootstrap_pair_power(c_s, c_i, blocks=50, draws=400, seed=0):
    """|Phi|^2 of a batch and of block-bootstrap resamples of it, shapes (K, K) and (draws, K, K)."""
    per_block = c_s.shape[0] // blocks
    c_s = c_s[: blocks * per_block].reshape(blocks, per_block, -1)
    c_i = c_i[: blocks * per_block].reshape(blocks, per_block, -1)
    block_phi = np.einsum("bsm,bsn->bmn", c_s, c_i) / per_block
    picks = np.random.default_rng(seed).integers(0, blocks, size=(draws, blocks))
    replicates = block_phi[picks].mean(axis=1)
    return np.abs(block_phi.mean(axis=0)) ** 2, np.abs(replicates) ** 2


class TestPerturbativeOracle:
    def test_oam_conservation(self):
        grid, params, pump, hologram, basis_s, basis_i = weak_coupling_setup(0.4)
        jsa = perturbative_jsa(pump, hologram, params, basis_s, basis_i, grid)
        l_s = np.array([m.indices[1] for m in basis_s.modes])
        l_i = np.array([m.indices[1] for m in basis_i.modes])
        allowed = (l_s[:, None] + l_i[None, :]) == 0
        mass = np.abs(jsa) ** 2
        assert np.sum(mass[~allowed]) < 1e-5 * np.sum(mass)
        assert np.sum(mass[allowed]) > 0

    def test_linear_in_coupling(self):
        amplitudes = []
        for kappa in (0.4, 0.8):
            grid, params, pump, hologram, basis_s, basis_i = weak_coupling_setup(kappa)
            amplitudes.append(perturbative_jsa(pump, hologram, params, basis_s, basis_i, grid))
        assert np.allclose(amplitudes[1], 2 * amplitudes[0], rtol=1e-12)

    def test_linear_in_pump_amplitude(self):
        grid, params, pump, hologram, basis_s, basis_i = weak_coupling_setup(0.4)
        pump = PumpParams(pump.basis, [0.7 - 0.2j], power=1e-3)
        scaled = PumpParams(pump.basis, [-1.5j * (0.7 - 0.2j)], power=1e-3)
        base = perturbative_jsa(pump, hologram, params, basis_s, basis_i, grid, normalize_pump=False)
        response = perturbative_jsa(
            scaled, hologram, params, basis_s, basis_i, grid, normalize_pump=False
        )
        assert np.max(np.abs(base)) > 0
        assert np.allclose(response, -1.5j * base, rtol=1e-12, atol=1e-14 * np.max(np.abs(base)))

    def test_normalized_pump_ignores_amplitude(self):
        grid, params, pump, hologram, basis_s, basis_i = weak_coupling_setup(0.4)
        doubled = PumpParams(pump.basis, [2.0], power=1e-3)
        base = perturbative_jsa(pump, hologram, params, basis_s, basis_i, grid)
        same = perturbative_jsa(doubled, hologram, params, basis_s, basis_i, grid)
        assert np.allclose(same, base, rtol=1e-12, atol=1e-14 * np.max(np.abs(base)))

    @pytest.mark.slow
    def test_monte_carlo_agrees_at_low_gain(self):
        grid, params, pump, hologram, basis_s, basis_i = weak_coupling_setup(0.06)
        jsa = perturbative_jsa(pump, hologram, params, basis_s, basis_i, grid)
        # Born occupations stay below 0.01
        assert np.max(np.sum(np.abs(jsa) ** 2, axis=1)) < 0.01
        c_s, c_i = monte_carlo_coefficients(
            grid, params, pump, hologram, basis_s, basis_i, sample_vacuum(11, 10000, grid)
        )
        power, replicates = bootstrap_pair_power(c_s, c_i)
        measured = power / np.sum(power)
        spread = np.std(replicates / np.sum(replicates, axis=(1, 2), keepdims=True), axis=0)
        expected = np.abs(jsa) ** 2 / np.sum(np.abs(jsa) ** 2)
        assert np.all(np.abs(measured - expected) < 5 * spread)

    @pytest.mark.slow
    def test_monte_carlo_P_conserves_oam(self):
        grid = GridSpec(32, 32, 4e-6, 4e-6, 2, 100e-6)
        params = InteractionParams(
            lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
            n_p=2.23, n_s=2.16, n_i=2.16, kappa=1.1,
        )
        # narrow pump: one dominant Schmidt pair and few accidental coincidences
        pump = PumpParams(ModeBasis.lg(0, 5e-6, 532e-9, 2.23), [1.0], power=1e-3)
        hologram = HologramParams(ModeBasis.lg(0, 1.0, 1064e-9, 2.16), 1, [[1.0]])
        basis = ModeBasis.lg(2, 20e-6, 1064e-9, 2.16)
        c_s, c_i = monte_carlo_coefficients(
            grid, params, pump, hologram, basis, basis, sample_vacuum(23, 10 ** 6, grid),
            threads=8,
        )
        P = compute_P(moments_from_coefficients(c_s, c_i), basis.labels, basis.labels).P
        l = np.array([m.indices[1] for m in basis.modes])
        allowed = (l[:, None] + l[None, :]) == 0
        assert np.sum(P[~allowed]) < 0.005
        assert P[l == 0][:, l == 0].item() > 0.9


class TestPhaseMatching:
    def test_pair_amplitude_follows_sinc_squared(self):
        grid = GridSpec(32, 32, 4e-6, 4e-6, 40, 2.5e-6)
        length = grid.length
        pump = PumpParams(ModeBasis.lg(0, 16e-6, 532e-9, 2.23), [1.0], power=1e-3)
        hologram = HologramParams(ModeBasis.lg(0, 1.0, 1064e-9, 2.16), 1, [[1.0]])
        basis = ModeBasis.lg(0, 16e-6, 1064e-9, 2.16)
        mismatch = np.linspace(-4 * np.pi, 4 * np.pi, 41) / length
        power = []
        for delta_k in mismatch:
            params = InteractionParams(
                lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
                n_p=2.23, n_s=2.16, n_i=2.16, kappa=0.1, delta_k=delta_k,
            )
            jsa = perturbative_jsa(pump, hologram, params, basis, basis, grid)
            power.append(abs(jsa[0, 0]) ** 2)
        power = np.array(power)

        def model(dk, amplitude, center):
            return amplitude * np.sinc((dk - center) * length / (2 * np.pi)) ** 2

        (amplitude, center), _ = curve_fit(model, mismatch, power, p0=(power.max(), 0.0))
        residual = power - model(mismatch, amplitude, center)
        r_squared = 1 - np.sum(residual ** 2) / np.sum((power - power.mean()) ** 2)
        assert r_squared > 0.999
        assert abs(center) * length < 0.5

    @pytest.mark.slow
    def test_monte_carlo_pair_power_follows_sinc_squared(self):
        grid = GridSpec(32, 32, 4e-6, 4e-6, 10, 10e-6)
        length = grid.length
        pump = PumpParams(ModeBasis.lg(0, 16e-6, 532e-9, 2.23), [1.0], power=1e-3)
        hologram = HologramParams(ModeBasis.lg(0, 1.0, 1064e-9, 2.16), 1, [[1.0]])
        basis = ModeBasis.lg(0, 16e-6, 1064e-9, 2.16)
        vacuum = sample_vacuum(17, 8000, grid)
        # stays clear of the sinc zeros, where only the 1/B floor of |Phi|^2 remains
        mismatch = np.linspace(-1.6 * np.pi, 1.6 * np.pi, 9) / length
        power, sigma = [], []
        for delta_k in mismatch:
            params = InteractionParams(
                lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
                n_p=2.23, n_s=2.16, n_i=2.16, kappa=1.0, delta_k=delta_k,
            )
            c_s, c_i = monte_carlo_coefficients(grid, params, pump, hologram, basis, basis, vacuum)
            value, replicates = bootstrap_pair_power(c_s, c_i)
            power.append(value[0, 0])
            sigma.append(np.std(replicates[:, 0, 0]))
        power, sigma = np.array(power), np.array(sigma)

        def model(dk, amplitude, center):
            return amplitude * np.sinc((dk - center) * length / (2 * np.pi)) ** 2

        (amplitude, center), _ = curve_fit(
            model, mismatch, power, p0=(power.max(), 0.0), sigma=sigma, absolute_sigma=True
        )
        residual = power - model(mismatch, amplitude, center)
        assert np.all(np.abs(residual) < 5 * sigma)
        assert abs(center) * length < 0.5
