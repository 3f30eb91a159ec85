"""
End-to-end differentiable forward model.

Parameters (pump coefficients theta, hologram coefficients phi) are mapped to
the per-slice drive on a Tape. The Monte Carlo part (propagation of a frozen
vacuum batch, projection, moment estimation, P and the loss) is one composite
primitive, "spdc_batch_loss", whose adjoint re-runs each chunk of the batch
from per-slice checkpoints instead of storing every intermediate field.

Work is split into fixed chunks of the batch that run on a thread pool and
are reduced in chunk order, so results do not depend on the thread count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .adjoint import ParamGradient, Tape, defprimitive, grad
from .correlations import (
    CorrelationMatrix,
    Estimator,
    MomentSet,
    compute_P,
    compute_P_backward,
    fidelity,
    fourth_moment_probability,
    moments_backward,
    moments_from_coefficients,
    normalize_probability,
    raw_pair_probability,
)
from .errors import DegenerateP, ShapeMismatch, UnsupportedPrimitive
from .grid import DEFAULT_SIGMA0_SQ, GridSpec, VacuumBatch, sample_rng, sample_vacuum
from .medium import HologramParams, InteractionParams, PumpParams, carrier, synthesis_stack
from .modes import ModeBasis, gram_matrix, project, project_adjoint
from .propagator import SplitStepPropagator
from .targets import LossWeights, TargetKind, TargetSpec, loss, loss_gradient, make_target

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 16
EVAL_STREAM = 2 ** 62
HOLOGRAM_INIT_STREAM = 2 ** 62 + 1
HOLOGRAM_INIT_STD = 0.1


@dataclass
class Evaluation:
    """Forward result on one vacuum batch."""

    P: CorrelationMatrix
    moments: MomentSet
    raw: np.ndarray
    loss: Optional[float] = None
    fidelity: Optional[float] = None

    @property
    def batch_size(self) -> int:
        return self.moments.batch_size


class SPDCObjective:
    """
    The forward model for a fixed grid, interaction, set of bases and target.

    Everything that does not depend on the learned parameters (pump modes at
    the slice mid-planes, the pump Gram matrix, crystal synthesis functions,
    QPM carriers, detection modes at z = L) is evaluated once here.
    """

    def __init__(self, grid: GridSpec, params: InteractionParams, pump_basis: ModeBasis,
                 pump_power: float, holo_basis: ModeBasis, n_seg: int, basis_s: ModeBasis,
                 basis_i: ModeBasis, target: Optional[CorrelationMatrix] = None,
                 weights: LossWeights = None, sigma0_sq: float = DEFAULT_SIGMA0_SQ,
                 estimator: Estimator = Estimator.gaussian, debias: bool = False,
                 chunk_size: int = DEFAULT_CHUNK_SIZE, threads: int = 1):
        if grid.nz % n_seg:
            raise ShapeMismatch(f"n_seg = {n_seg} does not divide nz = {grid.nz}")
        if chunk_size < 1:
            raise ValueError(f"chunk size must be at least 1, got {chunk_size}")
        if threads < 1:
            raise ValueError(f"thread count must be at least 1, got {threads}")
        self.grid = grid
        self.params = params
        self.pump_basis = pump_basis
        self.pump_power = float(pump_power)
        self.holo_basis = holo_basis
        self.n_seg = n_seg
        self.basis_s = basis_s
        self.basis_i = basis_i
        self.target = target
        self.weights = weights or LossWeights()
        self.sigma0_sq = float(sigma0_sq)
        self.estimator = Estimator.from_str(estimator) if isinstance(estimator, str) else estimator
        self.debias = bool(debias)
        self.chunk_size = int(chunk_size)
        self.threads = int(threads)

        self.gram = gram_matrix(pump_basis, grid, 0.0)
        self.pump_stacks = [pump_basis.evaluate(z, grid) for z in grid.slice_positions()]
        self.synthesis = synthesis_stack(holo_basis, grid)
        self.carriers = [carrier(params, z) for z in grid.slice_positions()]
        self.modes_s = basis_s.evaluate(grid.length, grid)
        self.modes_i = basis_i.evaluate(grid.length, grid)
        self.segment_length = grid.nz // n_seg
        self.propagator = SplitStepPropagator(grid, params)

    # Parameter -> drive

    def record_drive(self, tape: Tape, theta_ref: int, phi_ref: int) -> List[int]:
        """Record D_j = kappa A_eff(z_j) E_p(z_j) for every slice; returns one reference per slice."""
        theta = tape.record("normalize_power", theta_ref, gram=self.gram, power=self.pump_power)
        segments = []
        for s in range(self.n_seg):
            u = tape.record("synthesize", phi_ref, stack=self.synthesis, row=s)
            segments.append(tape.record("clip", u))
        drives = []
        for j in range(self.grid.nz):
            pump_field = tape.record("synthesize", theta, stack=self.pump_stacks[j])
            a_eff = segments[j // self.segment_length]
            if self.params.delta_k != 0:
                a_eff = tape.record("mul_const", a_eff, const=self.carriers[j])
            d = tape.record("multiply", a_eff, pump_field)
            drives.append(tape.record("mul_const", d, const=self.params.kappa))
        return drives

    def drive(self, pump: PumpParams, hologram: HologramParams) -> np.ndarray:
        """Per-slice drive (nz, nx, ny) for fixed parameters."""
        tape = Tape()
        theta = tape.leaf(pump.coeffs, requires_grad=False)
        phi = tape.leaf(hologram.raw_coeffs, requires_grad=False)
        return np.stack([tape.value(ref) for ref in self.record_drive(tape, theta, phi)])

    # Batched Monte Carlo

    def _chunks(self, batch_size: int) -> List[Tuple[int, int]]:
        return [
            (start, min(start + self.chunk_size, batch_size))
            for start in range(0, batch_size, self.chunk_size)
        ]

    def _map_chunks(self, fn: Callable, batch_size: int) -> list:
        chunks = self._chunks(batch_size)
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                return list(executor.map(lambda c: fn(*c), chunks))
        return [fn(*c) for c in chunks]

    def _seed_pair(self, vacuum: VacuumBatch, start: int, stop: int) -> np.ndarray:
        signal, idler = vacuum.chunk(start, stop)
        return np.stack([signal, idler])

    def project_outputs(self, pair: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dA = self.grid.pixel_area
        return project(pair[0], self.modes_s, dA), project(pair[1], self.modes_i, dA)

    def forward_batch(self, drive: np.ndarray, vacuum: VacuumBatch) -> Tuple[np.ndarray, np.ndarray]:
        """Propagate every vacuum sample and return detection coefficients (c_s, c_i), each (B, K)."""
        if not np.any(drive):
            raise DegenerateP(
                "drive is identically zero (kappa = 0 or an empty hologram); no pairs are generated"
            )

        def run(start, stop):
            out, _ = self.propagator.run(self._seed_pair(vacuum, start, stop), drive)
            return self.project_outputs(out)

        parts = self._map_chunks(run, vacuum.batch_size)
        c_s = np.concatenate([p[0] for p in parts])
        c_i = np.concatenate([p[1] for p in parts])
        return c_s, c_i

    def backward_batch(self, drive: np.ndarray, vacuum: VacuumBatch, g_c_s: np.ndarray,
                       g_c_i: np.ndarray) -> np.ndarray:
        """Adjoint of `forward_batch` with respect to the drive."""
        dA = self.grid.pixel_area

        def run(start, stop):
            _, record = self.propagator.run(self._seed_pair(vacuum, start, stop), drive, record=True)
            cotangent = np.stack([
                project_adjoint(g_c_s[start:stop], self.modes_s, dA),
                project_adjoint(g_c_i[start:stop], self.modes_i, dA),
            ])
            _, g_drive = record.backward(cotangent)
            return g_drive

        total = np.zeros_like(drive)
        for g_drive in self._map_chunks(run, vacuum.batch_size):
            total = total + g_drive
        return total

    def estimate(self, c_s: np.ndarray, c_i: np.ndarray) -> Tuple[MomentSet, np.ndarray, CorrelationMatrix]:
        """Moments, raw pair probability and normalized P from detection coefficients."""
        moments = moments_from_coefficients(c_s, c_i, self.sigma0_sq, self.debias)
        labels_s, labels_i = self.basis_s.labels, self.basis_i.labels
        if self.estimator == Estimator.fourth_moment:
            raw = fourth_moment_probability(c_s, c_i, self.sigma0_sq)
            return moments, raw, normalize_probability(raw, labels_s, labels_i)
        P = compute_P(moments, labels_s, labels_i)
        return moments, raw_pair_probability(moments), P

    # Loss

    def batch_loss(self, drive: np.ndarray, vacuum: VacuumBatch):
        if self.target is None:
            raise ValueError("a target is required to evaluate the loss")
        c_s, c_i = self.forward_batch(drive, vacuum)
        moments, raw, P = self.estimate(c_s, c_i)
        value = loss(P, self.target, self.weights)
        return value, (c_s, c_i, moments, raw, P)

    def batch_loss_backward(self, g: float, residual, drive: np.ndarray,
                            vacuum: VacuumBatch) -> np.ndarray:
        if self.estimator == Estimator.fourth_moment:
            raise UnsupportedPrimitive("the fourth-moment estimator is forward only")
        c_s, c_i, moments, raw, P = residual
        g_P = g * loss_gradient(P, self.target, self.weights)
        g_raw = compute_P_backward(g_P, raw, P.P)
        g_N_s = g_raw @ moments.N_i
        g_N_i = g_raw.T @ moments.N_s
        g_c_s, g_c_i = moments_backward(g_N_s, g_N_i, g_raw, c_s, c_i, moments, self.debias)
        return self.backward_batch(drive, vacuum, g_c_s, g_c_i)

    def record(self, tape: Tape, theta_ref: int, phi_ref: int, vacuum: VacuumBatch) -> int:
        drives = self.record_drive(tape, theta_ref, phi_ref)
        return tape.record("spdc_batch_loss", *drives, objective=self, vacuum=vacuum)

    def loss_fn(self, vacuum: VacuumBatch) -> Callable:
        """Tape-recording loss over a frozen batch, in the form `grad` expects."""
        return lambda tape, theta, phi: self.record(tape, theta, phi, vacuum)

    def loss_and_grad(self, pump: PumpParams, hologram: HologramParams,
                      vacuum: VacuumBatch) -> Tuple[float, ParamGradient, CorrelationMatrix]:
        tape = Tape()
        value, gradient = grad(self.loss_fn(vacuum), pump, hologram, tape)
        P = tape.entries[-1].residual[4]
        return value, gradient, P

    def evaluate(self, pump: PumpParams, hologram: HologramParams,
                 vacuum: VacuumBatch) -> Evaluation:
        """Forward-only estimate of P (and the loss when a target is set)."""
        c_s, c_i = self.forward_batch(self.drive(pump, hologram), vacuum)
        moments, raw, P = self.estimate(c_s, c_i)
        result = Evaluation(P, moments, raw)
        if self.target is not None:
            result.loss = loss(P, self.target, self.weights)
            result.fidelity = fidelity(P, self.target)
        logger.debug(f"Evaluated P on {vacuum.batch_size} samples")
        return result


def _batch_loss_forward(*drives, objective: SPDCObjective, vacuum: VacuumBatch):
    return objective.batch_loss(np.stack(drives), vacuum)


def _batch_loss_vjp(g, residual, *drives, objective: SPDCObjective, vacuum: VacuumBatch):
    g_drive = objective.batch_loss_backward(float(np.real(g)), residual, np.stack(drives), vacuum)
    return tuple(g_drive)


defprimitive("spdc_batch_loss", forward=_batch_loss_forward, vjp=_batch_loss_vjp)


def initial_pump(basis: ModeBasis, power: float, trainable: bool = True) -> PumpParams:
    """Pure fundamental mode."""
    coeffs = np.zeros(basis.size, dtype=np.complex128)
    coeffs[basis.fundamental_index()] = 1.0
    return PumpParams(basis, coeffs, power, trainable)


def initial_hologram(basis: ModeBasis, n_seg: int, seed: int, init: str = "noise",
                     trainable: bool = True, std: float = HOLOGRAM_INIT_STD) -> HologramParams:
    """
    Hologram starting point.

    "noise": complex Gaussian coefficients of the given std from a dedicated
    stream of the run seed. "uniform": the fundamental coefficient set to 1 in
    every segment, which with a wide crystal basis gives |A| = 1 everywhere.
    """
    coeffs = np.zeros((n_seg, basis.size), dtype=np.complex128)
    if init == "uniform":
        coeffs[:, basis.fundamental_index()] = 1.0
    elif init == "noise":
        rng = sample_rng(seed, HOLOGRAM_INIT_STREAM, 0)
        draws = rng.standard_normal((2, n_seg, basis.size)) * (std / np.sqrt(2))
        coeffs = draws[0] + 1j * draws[1]
    else:
        raise ValueError(f"Invalid hologram init: {init}")
    return HologramParams(basis, n_seg, coeffs, trainable)


@dataclass
class SmallInstance:
    """A fully specified problem small enough for exhaustive finite differences."""

    objective: SPDCObjective
    pump: PumpParams
    hologram: HologramParams
    vacuum: VacuumBatch

    def loss_fn(self) -> Callable:
        return self.objective.loss_fn(self.vacuum)


def small_instance(seed: int = 0, train_pump: bool = True, train_crystal: bool = True,
                   debias: bool = False) -> SmallInstance:
    """
    16 x 16 grid, nz = 4, two pump modes, a 2 x 2 hologram, B = 2 with fixed
    noise and a nonzero mismatch so the QPM carrier is exercised.
    """
    grid = GridSpec(16, 16, 5e-6, 5e-6, 4, 10e-6)
    params = InteractionParams(
        lambda_p=532e-9, lambda_s=1064e-9, lambda_i=1064e-9,
        n_p=2.23, n_s=2.16, n_i=2.16, kappa=20.0, delta_k=2e4,
    )
    pump_basis = ModeBasis.lg(0, 10e-6, params.lambda_p, params.n_p, max_p=1)
    holo_basis = ModeBasis.hg(1, 12e-6, params.lambda_p, params.n_p)
    basis_s = ModeBasis.lg(1, 12e-6, params.lambda_s, params.n_s)
    basis_i = ModeBasis.lg(1, 12e-6, params.lambda_i, params.n_i)
    target = make_target(TargetSpec(TargetKind.lg_high_order_qubit, l=1), basis_s, basis_i)
    objective = SPDCObjective(
        grid, params, pump_basis, 1e-3, holo_basis, 2, basis_s, basis_i, target, debias=debias,
        chunk_size=1,
    )
    pump = PumpParams(pump_basis, [1.0, 0.4 - 0.3j], 1e-3, train_pump)
    hologram = HologramParams(
        holo_basis, 2, [[0.8 + 0.1j, 0.3 - 0.2j], [0.5 - 0.4j, -0.2 + 0.6j]], train_crystal
    )
    vacuum = sample_vacuum(seed, 2, grid).materialize()
    return SmallInstance(objective, pump, hologram, vacuum)
