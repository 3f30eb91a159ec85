"""
The physical interaction built from the learned parameters: pump field,
crystal hologram, quasi-phase-matching bookkeeping and binarization of the
hologram into a poling pattern.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import (
    AllZeroPump,
    EnergyConservationError,
    PolingResolutionError,
    ShapeMismatch,
)
from .grid import ComplexField, GridSpec
from .modes import ModeBasis, gram_matrix

logger = logging.getLogger(__name__)

ENERGY_TOLERANCE = 1e-6
MIN_SUBSAMPLES = 16
DUTY_CYCLE_CONVENTION = "d = asin(|A|)/pi; +1 where cos(2 pi z / period + arg A) > cos(pi d)"


@dataclass
class InteractionParams:
    """
    Three-wave mixing parameters.

    Give either the poling period or the residual mismatch delta_k; the
    other is derived from k_p - k_s - k_i. With neither, the period is
    chosen for perfect first-order quasi-phase-matching.
    """

    lambda_p: float
    lambda_s: float
    lambda_i: float
    n_p: float
    n_s: float
    n_i: float
    kappa: float
    poling_period: Optional[float] = None
    delta_k: Optional[float] = None

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "lambda_i", "n_p", "n_s", "n_i"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kappa < 0:
            raise ValueError(f"coupling kappa must be non-negative, got {self.kappa}")
        inv_p = 1.0 / self.lambda_p
        if abs(inv_p - 1.0 / self.lambda_s - 1.0 / self.lambda_i) >= ENERGY_TOLERANCE * inv_p:
            raise EnergyConservationError(
                f"energy conservation violated: 1/{self.lambda_p:.6g} != "
                f"1/{self.lambda_s:.6g} + 1/{self.lambda_i:.6g}"
            )
        mismatch = self.k_p - self.k_s - self.k_i
        if self.poling_period is not None and self.delta_k is not None:
            raise ValueError("give either poling_period or delta_k, not both")
        if self.poling_period is None:
            self.delta_k = 0.0 if self.delta_k is None else float(self.delta_k)
            grating = mismatch - self.delta_k
            if not grating > 0:
                raise ValueError(
                    f"no positive poling period reaches delta_k = {self.delta_k:.6g} 1/m"
                )
            self.poling_period = 2 * np.pi / grating
        else:
            if not self.poling_period > 0:
                raise ValueError(f"poling period must be positive, got {self.poling_period}")
            self.delta_k = mismatch - 2 * np.pi / self.poling_period

    @property
    def k_p(self) -> float:
        return 2 * np.pi * self.n_p / self.lambda_p

    @property
    def k_s(self) -> float:
        return 2 * np.pi * self.n_s / self.lambda_s

    @property
    def k_i(self) -> float:
        return 2 * np.pi * self.n_i / self.lambda_i

    def to_dict(self) -> Dict:
        return {
            "lambda_p": self.lambda_p,
            "lambda_s": self.lambda_s,
            "lambda_i": self.lambda_i,
            "n_p": self.n_p,
            "n_s": self.n_s,
            "n_i": self.n_i,
            "kappa": self.kappa,
            "poling_period": self.poling_period,
            "delta_k": self.delta_k,
        }


@dataclass
class PumpParams:
    basis: ModeBasis
    coeffs: np.ndarray
    power: float
    trainable: bool = True

    def __post_init__(self):
        self.coeffs = np.array(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape != (self.basis.size,):
            raise ShapeMismatch(
                f"pump coefficients have shape {self.coeffs.shape}, expected ({self.basis.size},)"
            )
        if not self.power > 0:
            raise ValueError(f"pump power must be positive, got {self.power}")

    def with_coeffs(self, coeffs: np.ndarray) -> "PumpParams":
        return PumpParams(self.basis, coeffs, self.power, self.trainable)


@dataclass
class HologramParams:
    basis: ModeBasis
    n_seg: int
    raw_coeffs: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.raw_coeffs = np.array(self.raw_coeffs, dtype=np.complex128)
        if self.n_seg < 1:
            raise ValueError(f"n_seg must be at least 1, got {self.n_seg}")
        if self.raw_coeffs.shape != (self.n_seg, self.basis.size):
            raise ShapeMismatch(
                f"hologram coefficients have shape {self.raw_coeffs.shape}, "
                f"expected ({self.n_seg}, {self.basis.size})"
            )

    def with_coeffs(self, raw_coeffs: np.ndarray) -> "HologramParams":
        return HologramParams(self.basis, self.n_seg, raw_coeffs, self.trainable)

    def segment_of(self, slice_index: int, nz: int) -> int:
        """Segment holding a given slice; segments span nz / n_seg slices each."""
        if nz % self.n_seg:
            raise ShapeMismatch(f"n_seg = {self.n_seg} does not divide nz = {nz}")
        return slice_index // (nz // self.n_seg)


def pump_normalization(pump: PumpParams, grid: GridSpec, gram: np.ndarray = None) -> float:
    """Scale s making the synthesized pump carry exactly pump.power at z = 0."""
    if not np.any(pump.coeffs):
        raise AllZeroPump("pump coefficients are all zero")
    if gram is None:
        gram = gram_matrix(pump.basis, grid, 0.0)
    quad = float(np.real(np.vdot(pump.coeffs, gram @ pump.coeffs)))
    return float(np.sqrt(pump.power / quad))


def build_pump(pump: PumpParams, z: float, grid: GridSpec) -> ComplexField:
    """E_p(z) = s * sum_k theta_k M_k(z), with s fixed at z = 0."""
    scale = pump_normalization(pump, grid)
    modes = pump.basis.evaluate(z, grid)
    return ComplexField(np.tensordot(scale * pump.coeffs, modes, axes=(0, 0)), grid)


def synthesis_stack(basis: ModeBasis, grid: GridSpec) -> np.ndarray:
    """
    Transverse crystal synthesis functions: basis modes at z = 0 scaled so the
    fundamental has unit peak. A waist far wider than the window gives a
    uniform crystal.
    """
    return basis.evaluate(0.0, grid, check=False) * (basis.waist * np.sqrt(np.pi / 2))


def clip_unit(u: np.ndarray) -> np.ndarray:
    """Pointwise projective clip u / max(1, |u|)."""
    return u / np.maximum(1.0, np.abs(u))


def build_hologram(hologram: HologramParams, slice_index: int, grid: GridSpec,
                   stack: np.ndarray = None) -> ComplexField:
    """Clipped modulation A(x, y) of the segment holding `slice_index`."""
    if not 0 <= slice_index < grid.nz:
        raise IndexError(f"slice {slice_index} outside 0..{grid.nz - 1}")
    if stack is None:
        stack = synthesis_stack(hologram.basis, grid)
    seg = hologram.segment_of(slice_index, grid.nz)
    u = np.tensordot(hologram.raw_coeffs[seg], stack, axes=(0, 0))
    return ComplexField(clip_unit(u), grid)


def hologram_volume(hologram: HologramParams, grid: GridSpec) -> np.ndarray:
    """A(x, y, z) for every slice, shape (nx, ny, nz)."""
    stack = synthesis_stack(hologram.basis, grid)
    segments = [clip_unit(np.tensordot(row, stack, axes=(0, 0))) for row in hologram.raw_coeffs]
    volume = np.empty((grid.nx, grid.ny, grid.nz), dtype=np.complex128)
    for j in range(grid.nz):
        volume[:, :, j] = segments[hologram.segment_of(j, grid.nz)]
    return volume


def carrier(params: InteractionParams, z: float) -> complex:
    return np.exp(-1j * params.delta_k * z)


def effective_coupling(A, slice_index: int, params: InteractionParams, grid: GridSpec = None):
    """
    A(x, y, z_j) exp(-i delta_k z_j): the slowly varying modulation left after the
    first-order QPM carrier is absorbed. Returned unchanged when delta_k is zero.
    """
    values = A.values if isinstance(A, ComplexField) else A
    if params.delta_k == 0:
        out = values
    else:
        if grid is None:
            if not isinstance(A, ComplexField):
                raise ValueError("a grid is required to place the slice")
            grid = A.grid
        out = values * carrier(params, grid.slice_z(slice_index))
    if isinstance(A, ComplexField):
        return ComplexField(out, A.grid)
    return out


def build_drive(pump: PumpParams, hologram: HologramParams, params: InteractionParams,
                grid: GridSpec) -> np.ndarray:
    """Per-slice drive D_j = kappa A_eff(z_j) E_p(z_j) at the slice mid-planes, shape (nz, nx, ny)."""
    theta = pump_normalization(pump, grid) * pump.coeffs
    stack = synthesis_stack(hologram.basis, grid)
    segments = [clip_unit(np.tensordot(row, stack, axes=(0, 0))) for row in hologram.raw_coeffs]
    drive = np.empty((grid.nz, grid.nx, grid.ny), dtype=np.complex128)
    for j in range(grid.nz):
        modes = pump.basis.evaluate(grid.slice_z(j), grid)
        pump_field = np.tensordot(theta, modes, axes=(0, 0))
        a_eff = effective_coupling(segments[hologram.segment_of(j, grid.nz)], j, params, grid)
        drive[j] = (a_eff * pump_field) * params.kappa
    return drive


@dataclass
class PolingVolume:
    """Binary poling pattern s(x, y, z) in {+1, -1} on a sub-sampled z axis."""

    signs: np.ndarray
    grid: GridSpec
    poling_period: float
    dz_sub: float
    subsamples_per_slice: int

    @property
    def nz_sub(self) -> int:
        return self.signs.shape[2]

    def z_positions(self) -> np.ndarray:
        return (np.arange(self.nz_sub) + 0.5) * self.dz_sub

    def metadata(self) -> Dict:
        return {
            "dims": {"nx": self.grid.nx, "ny": self.grid.ny, "nz": self.nz_sub},
            "pitch": {"dx": self.grid.dx, "dy": self.grid.dy, "dz": self.dz_sub},
            "units": "m",
            "dtype": "int8",
            "byte_order": "little",
            "order": "x fastest, then y, then z",
            "poling_period": self.poling_period,
            "subsamples_per_slice": self.subsamples_per_slice,
            "duty_cycle_convention": DUTY_CYCLE_CONVENTION,
        }


def subsample_pitch(dz: float, period: float, subsamples_per_period: int,
                    resolution: float = None) -> int:
    """Number of z sub-samples per slice, keeping the slice boundaries on the sample grid."""
    if resolution is not None:
        return max(1, int(np.ceil(dz / resolution * (1 - 1e-12))))
    return int(np.ceil(dz * subsamples_per_period / period * (1 - 1e-12)))


def binarize_volume(volume: np.ndarray, params: InteractionParams, grid: GridSpec,
                    subsamples_per_period: int = 64, resolution: float = None) -> PolingVolume:
    """
    Binarize a continuous hologram volume A (nx, ny, nz).

    The duty cycle d = asin(|A|)/pi and the phase arg A place the sign flips so
    the first harmonic at 2 pi / period equals (2/pi) |A| exp(i arg A).
    `resolution` optionally fixes the fabrication pitch along z.
    """
    if subsamples_per_period < MIN_SUBSAMPLES:
        raise PolingResolutionError(
            f"need at least {MIN_SUBSAMPLES} sub-samples per poling period, got {subsamples_per_period}"
        )
    if volume.shape != (grid.nx, grid.ny, grid.nz):
        raise ShapeMismatch(
            f"hologram volume has shape {volume.shape}, expected ({grid.nx}, {grid.ny}, {grid.nz})"
        )
    period = params.poling_period
    per_slice = subsample_pitch(grid.dz, period, subsamples_per_period, resolution)
    dz_sub = grid.dz / per_slice
    if period < 4 * dz_sub:
        raise PolingResolutionError(
            f"poling period {period:.4g} m is shorter than 4 sub-samples of {dz_sub:.4g} m"
        )
    if period < MIN_SUBSAMPLES * dz_sub:
        logger.warning(
            f"Only {period / dz_sub:.1f} sub-samples per poling period; first harmonic will be coarse"
        )

    magnitude = np.minimum(np.abs(volume), 1.0)
    # cos(pi d) with d = asin(|A|) / pi
    threshold = np.sqrt(1.0 - magnitude ** 2)
    phase = np.angle(volume)
    wave = 2 * np.pi / period
    signs = np.empty((grid.nx, grid.ny, grid.nz * per_slice), dtype=np.int8)
    for j in range(grid.nz):
        z = (j * per_slice + np.arange(per_slice) + 0.5) * dz_sub
        theta = wave * z[None, None, :] + phase[:, :, j, None]
        block = np.where(np.cos(theta) > threshold[:, :, j, None], 1, -1)
        signs[:, :, j * per_slice:(j + 1) * per_slice] = block
    logger.info(
        f"Binarized hologram: {grid.nz} slices x {per_slice} sub-samples, dz_sub = {dz_sub:.4g} m"
    )
    return PolingVolume(signs, grid, period, dz_sub, per_slice)


def binarize_poling(hologram: HologramParams, params: InteractionParams, grid: GridSpec,
                    subsamples_per_period: int = 64, resolution: float = None) -> PolingVolume:
    """Binarize the hologram of a parameter set into a fabricable poling pattern."""
    return binarize_volume(
        hologram_volume(hologram, grid), params, grid, subsamples_per_period, resolution
    )


def first_harmonic(poling: PolingVolume, harmonics: int = 7) -> np.ndarray:
    """
    Per-slice complex amplitude of the poling pattern at 2 pi / period, shape (nx, ny, nz).

    Each slice is fitted with the harmonics -H..H of the poling wave by least
    squares, so a slice holding a non-integer number of periods does not leak
    the conjugate or higher harmonics into the first one. Slices shorter than
    a period fall back to the plain projection.
    """
    wave = 2 * np.pi / poling.poling_period
    per_slice = poling.subsamples_per_slice
    z = poling.z_positions()
    nx, ny, _ = poling.signs.shape
    slices = poling.signs.reshape(nx, ny, -1, per_slice).astype(float)
    periods = per_slice * poling.dz_sub / poling.poling_period
    order = min(harmonics, (per_slice - 1) // 2, int(periods))
    out = np.empty((nx, ny, slices.shape[2]), dtype=np.complex128)
    for j in range(slices.shape[2]):
        zj = z[j * per_slice:(j + 1) * per_slice]
        if order < 1:
            weights = np.exp(-1j * wave * zj) / per_slice
        else:
            orders = np.arange(-order, order + 1)
            design = np.exp(1j * wave * np.outer(zj, orders))
            weights = np.linalg.pinv(design)[order + 1]
        out[:, :, j] = slices[:, :, j, :] @ weights
    return out
