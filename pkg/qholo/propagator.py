"""
Split-step Fourier integration of the coupled signal/idler equations.

Each slice is a symmetric Strang step: diffraction over dz/2, the exact local
two-mode squeezing update over dz with the drive evaluated at the slice
mid-plane, then diffraction over dz/2 again.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .adjoint import Tape, couple
from .errors import NonFiniteField
from .grid import GridSpec, fft2, ifft2
from .medium import HologramParams, InteractionParams, PumpParams, build_drive

logger = logging.getLogger(__name__)

SCHEME = "strang"


@dataclass
class FieldPair:
    """Signal and idler envelopes; arrays may carry leading batch axes."""

    signal: np.ndarray
    idler: np.ndarray
    z: float
    grid: GridSpec

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.complex128)
        self.idler = np.asarray(self.idler, dtype=np.complex128)
        if self.signal.shape != self.idler.shape:
            raise ValueError(
                f"signal shape {self.signal.shape} differs from idler shape {self.idler.shape}"
            )

    @classmethod
    def from_stacked(cls, pair: np.ndarray, z: float, grid: GridSpec) -> "FieldPair":
        return cls(pair[0], pair[1], z, grid)

    def stacked(self) -> np.ndarray:
        return np.stack([self.signal, self.idler])

    def flux_difference(self) -> np.ndarray:
        """D = integral of |A_s|^2 - |A_i|^2, one value per realization."""
        diff = np.abs(self.signal) ** 2 - np.abs(self.idler) ** 2
        return diff.sum(axis=(-2, -1)) * self.grid.pixel_area

    def total_flux(self) -> np.ndarray:
        total = np.abs(self.signal) ** 2 + np.abs(self.idler) ** 2
        return total.sum(axis=(-2, -1)) * self.grid.pixel_area


def diffraction_phase(grid: GridSpec, params: InteractionParams, step: float) -> np.ndarray:
    """Spectral multipliers exp(-i k_perp^2 step / 2k_j) for signal and idler, shape (2, nx, ny)."""
    k2 = grid.transverse_k2()
    return np.stack([
        np.exp(-1j * k2 * step / (2 * params.k_s)),
        np.exp(-1j * k2 * step / (2 * params.k_i)),
    ])


def _broadcast_phase(phase: np.ndarray, ndim: int) -> np.ndarray:
    return phase.reshape((2,) + (1,) * (ndim - 3) + phase.shape[1:])


def diffract(pair: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return ifft2(fft2(pair) * _broadcast_phase(phase, pair.ndim))


def diffraction_half_step(pair: FieldPair, half_dz: float, params: InteractionParams) -> FieldPair:
    """Paraxial free-space step of both envelopes over `half_dz`; exactly norm preserving."""
    if half_dz == 0:
        return FieldPair(pair.signal.copy(), pair.idler.copy(), pair.z, pair.grid)
    phase = diffraction_phase(pair.grid, params, half_dz)
    out = diffract(pair.stacked(), phase)
    return FieldPair.from_stacked(out, pair.z + half_dz, pair.grid)


def coupling_step(pair: FieldPair, pump_slice, coupling_slice, kappa: float, dz: float) -> FieldPair:
    """Exact cosh/sinh two-mode squeezing update with local gain kappa |A_eff E_p|."""
    if kappa == 0 or dz == 0:
        return FieldPair(pair.signal.copy(), pair.idler.copy(), pair.z, pair.grid)
    pump_values = getattr(pump_slice, "values", pump_slice)
    coupling_values = getattr(coupling_slice, "values", coupling_slice)
    drive = (coupling_values * pump_values) * kappa
    return FieldPair.from_stacked(couple(pair.stacked(), drive, dz), pair.z, pair.grid)


def free_space(values: np.ndarray, distance: float, wavenumber: float, grid: GridSpec) -> np.ndarray:
    """Propagate one envelope of wavenumber k over `distance` in a single spectral step."""
    k2 = grid.transverse_k2()
    return ifft2(fft2(values) * np.exp(-1j * k2 * distance / (2 * wavenumber)))


@dataclass
class PropagationRecord:
    """
    Per-slice checkpoints of one forward run.

    checkpoints[j] is the stacked (signal, idler) pair entering slice j; the
    adjoint replays one slice at a time from these.
    """

    checkpoints: List[np.ndarray]
    drive: np.ndarray
    propagator: "SplitStepPropagator"
    scheme: str = SCHEME

    def slice_tape(self, j: int) -> Tuple[Tape, int, int, int]:
        """Re-run slice j on a fresh tape; returns (tape, pair_ref, drive_ref, out_ref)."""
        tape = Tape()
        pair_ref = tape.leaf(self.checkpoints[j])
        drive_ref = tape.leaf(self.drive[j])
        out_ref = self.propagator.record_slice(tape, pair_ref, drive_ref)
        return tape, pair_ref, drive_ref, out_ref

    def replay(self) -> np.ndarray:
        """Recompute the output pair from the first checkpoint."""
        pair = self.checkpoints[0]
        for j in range(len(self.checkpoints)):
            pair = self.propagator.step(pair, self.drive[j])
        return pair

    def backward(self, cotangent: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pull the output cotangent back through every slice; returns (g_seed, g_drive)."""
        g_drive = np.zeros_like(self.drive)
        for j in reversed(range(len(self.checkpoints))):
            tape, pair_ref, drive_ref, out_ref = self.slice_tape(j)
            grads = tape.backward({out_ref: cotangent})
            cotangent = grads[pair_ref]
            g_drive[j] = grads[drive_ref]
        return cotangent, g_drive


class SplitStepPropagator:
    """Strang split-step integrator for a fixed grid and set of interaction parameters."""

    def __init__(self, grid: GridSpec, params: InteractionParams):
        self.grid = grid
        self.params = params
        self.half_phase = diffraction_phase(grid, params, grid.dz / 2)

    def step(self, pair: np.ndarray, drive: np.ndarray) -> np.ndarray:
        pair = diffract(pair, self.half_phase)
        pair = couple(pair, drive, self.grid.dz)
        return diffract(pair, self.half_phase)

    def record_slice(self, tape: Tape, pair_ref: int, drive_ref: int) -> int:
        """Record one Strang slice on a tape using the same arithmetic as `step`."""
        phase = _broadcast_phase(self.half_phase, np.ndim(tape.value(pair_ref)))
        ref = tape.record("fft2", pair_ref)
        ref = tape.record("mul_const", ref, const=phase)
        ref = tape.record("ifft2", ref)
        ref = tape.record("coupling", ref, drive_ref, h=self.grid.dz)
        ref = tape.record("fft2", ref)
        ref = tape.record("mul_const", ref, const=phase)
        return tape.record("ifft2", ref)

    def run(self, pair: np.ndarray, drive: np.ndarray,
            record: bool = False) -> Tuple[np.ndarray, Optional[PropagationRecord]]:
        """Propagate a stacked pair through every slice of `drive`."""
        checkpoints = []
        for j in range(self.grid.nz):
            if record:
                checkpoints.append(pair)
            pair = self.step(pair, drive[j])
        if not np.all(np.isfinite(pair)):
            raise NonFiniteField(
                "propagated field overflowed; check the coupling kappa and pump power"
            )
        if record:
            return pair, PropagationRecord(checkpoints, drive, self)
        return pair, None


def propagate(seed_pair: FieldPair, pump: PumpParams, hologram: HologramParams,
              params: InteractionParams, grid: GridSpec,
              record: bool = True) -> Tuple[FieldPair, Optional[PropagationRecord]]:
    """Propagate a seed pair from z = 0 to z = L through the hologram driven by the pump."""
    if not (np.all(np.isfinite(seed_pair.signal)) and np.all(np.isfinite(seed_pair.idler))):
        raise NonFiniteField("seed fields contain NaN or Inf values")
    drive = build_drive(pump, hologram, params, grid)
    propagator = SplitStepPropagator(grid, params)
    out, rec = propagator.run(seed_pair.stacked(), drive, record=record)
    logger.debug(f"Propagated {grid.nz} slices of {grid.dz:.4g} m ({SCHEME} splitting)")
    return FieldPair.from_stacked(out, grid.length, grid), rec
