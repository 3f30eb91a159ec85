"""
Observables of the propagated fields: mode occupations, first-order
correlations, the pair amplitude and the normalized two-photon probability,
together with an independent first-order perturbative oracle.

The stochastic fields follow the Wigner (symmetric-ordering) correspondence:
each vacuum mode carries complex variance sigma0_sq, and the moments are
corrected back to normal ordering in closed form.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np

from .errors import DegenerateP, ShapeMismatch
from .grid import DEFAULT_SIGMA0_SQ, GridSpec
from .medium import (
    HologramParams,
    InteractionParams,
    PumpParams,
    clip_unit,
    effective_coupling,
    pump_normalization,
    synthesis_stack,
)
from .modes import ModeBasis, project

logger = logging.getLogger(__name__)


class Estimator(str, Enum):
    gaussian = "gaussian"
    fourth_moment = "fourth_moment"

    @classmethod
    def from_str(cls, value: str) -> "Estimator":
        """Convert string to Estimator, case-insensitive."""
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Invalid estimator: {value}")


@dataclass
class MomentSet:
    N_s: np.ndarray
    N_i: np.ndarray
    phi: np.ndarray
    G1_s: np.ndarray
    G1_i: np.ndarray
    batch_size: int
    sigma0_sq: float = DEFAULT_SIGMA0_SQ
    exchange: np.ndarray = None
    pair_power: np.ndarray = None

    def scaled(self, factor: float) -> "MomentSet":
        """All moments multiplied by a common constant."""
        return MomentSet(
            self.N_s * factor, self.N_i * factor, self.phi * factor,
            self.G1_s * factor, self.G1_i * factor, self.batch_size, self.sigma0_sq,
            None if self.exchange is None else self.exchange * factor,
            None if self.pair_power is None else self.pair_power * factor ** 2,
        )


@dataclass
class CorrelationMatrix:
    P: np.ndarray
    labels_s: List[str] = field(default_factory=list)
    labels_i: List[str] = field(default_factory=list)
    floored_mass: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.P.shape

    def rows(self) -> List[Dict]:
        return [
            {"signal": ls, **{li: float(v) for li, v in zip(self.labels_i, row)}}
            for ls, row in zip(self.labels_s, self.P)
        ]


def _g1(coeffs: np.ndarray, sigma0_sq: float) -> np.ndarray:
    batch, size = coeffs.shape
    g1 = np.conj(coeffs).T @ coeffs / batch - sigma0_sq * np.eye(size)
    return 0.5 * (g1 + np.conj(g1.T))


def moments_from_coefficients(c_s: np.ndarray, c_i: np.ndarray,
                              sigma0_sq: float = DEFAULT_SIGMA0_SQ,
                              debias: bool = False) -> MomentSet:
    """
    Moments from per-sample mode coefficients of shape (B, K).

    With `debias`, |Phi|^2 is replaced by (B |Phi|^2 - mean|c_s c_i|^2) / (B - 1),
    which removes the positive 1/B bias of the plain estimate.
    """
    batch = c_s.shape[0]
    if batch < 2:
        raise ValueError(f"at least two samples are needed to estimate moments, got {batch}")
    G1_s = _g1(c_s, sigma0_sq)
    G1_i = _g1(c_i, sigma0_sq)
    phi = c_s.T @ c_i / batch
    exchange = np.conj(c_s).T @ c_i / batch
    pair_power = np.abs(phi) ** 2
    if debias:
        second = (np.abs(c_s).T ** 2) @ (np.abs(c_i) ** 2) / batch
        pair_power = (batch * pair_power - second) / (batch - 1)
    return MomentSet(
        N_s=np.real(np.diag(G1_s)).copy(),
        N_i=np.real(np.diag(G1_i)).copy(),
        phi=phi,
        G1_s=G1_s,
        G1_i=G1_i,
        batch_size=batch,
        sigma0_sq=sigma0_sq,
        exchange=exchange,
        pair_power=pair_power,
    )


def estimate_moments(outputs, basis_s: ModeBasis, basis_i: ModeBasis,
                     sigma0_sq: float = DEFAULT_SIGMA0_SQ, z: float = None,
                     debias: bool = False) -> MomentSet:
    """Project a batch of output pairs (FieldPair with a batch axis) onto the bases and estimate moments."""
    grid = outputs.grid
    z = grid.length if z is None else z
    c_s = project(outputs.signal, basis_s.evaluate(z, grid), grid.pixel_area)
    c_i = project(outputs.idler, basis_i.evaluate(z, grid), grid.pixel_area)
    return moments_from_coefficients(c_s, c_i, sigma0_sq, debias)


def moments_backward(g_N_s: np.ndarray, g_N_i: np.ndarray, g_pair_power: np.ndarray,
                     c_s: np.ndarray, c_i: np.ndarray, moments: MomentSet,
                     debias: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Pull cotangents of (N_s, N_i, |Phi|^2) back to the per-sample coefficients."""
    batch = c_s.shape[0]
    g_phi = 2.0 * g_pair_power * moments.phi
    if debias:
        g_phi = g_phi * batch / (batch - 1)
    g_c_s = (2.0 / batch) * c_s * g_N_s[None, :] + np.conj(c_i) @ g_phi.T / batch
    g_c_i = (2.0 / batch) * c_i * g_N_i[None, :] + np.conj(c_s) @ g_phi / batch
    if debias:
        # d/dc of -mean|c_s(m) c_i(n)|^2 / (B - 1)
        weight = -2.0 / (batch * (batch - 1))
        g_c_s = g_c_s + weight * c_s * ((np.abs(c_i) ** 2) @ g_pair_power.T)
        g_c_i = g_c_i + weight * c_i * ((np.abs(c_s) ** 2) @ g_pair_power)
    return g_c_s, g_c_i


def raw_pair_probability(moments: MomentSet) -> np.ndarray:
    """Gaussian factorization |Phi|^2 + N_s N_i."""
    pair_power = moments.pair_power
    if pair_power is None:
        pair_power = np.abs(moments.phi) ** 2
    return pair_power + np.outer(moments.N_s, moments.N_i)


def fourth_moment_probability(c_s: np.ndarray, c_i: np.ndarray,
                              sigma0_sq: float = DEFAULT_SIGMA0_SQ) -> np.ndarray:
    """Empirical mean of (|c_s|^2 - sigma0_sq)(|c_i|^2 - sigma0_sq); forward only."""
    excess_s = np.abs(c_s) ** 2 - sigma0_sq
    excess_i = np.abs(c_i) ** 2 - sigma0_sq
    return excess_s.T @ excess_i / c_s.shape[0]


def normalize_probability(raw: np.ndarray, labels_s=None, labels_i=None) -> CorrelationMatrix:
    """Floor negative entries at zero and normalize to unit sum."""
    if not np.all(np.isfinite(raw)):
        raise DegenerateP("pair probability contains NaN or Inf values")
    if not np.sum(raw) > 0:
        raise DegenerateP(
            "pair probability has no positive mass; the coupling is zero or the batch is too small"
        )
    floored = np.maximum(raw, 0.0)
    total = float(np.sum(floored))
    floored_mass = float(-np.sum(raw[raw < 0]))
    if floored_mass > 0:
        logger.debug(f"Floored {floored_mass:.3e} of negative estimator mass")
    return CorrelationMatrix(
        floored / total,
        list(labels_s or []),
        list(labels_i or []),
        floored_mass / total,
    )


def compute_P(moments: MomentSet, labels_s=None, labels_i=None) -> CorrelationMatrix:
    """Normalized two-photon probability P(m, n) from the Gaussian moment factorization."""
    if moments.exchange is not None:
        exchange = float(np.max(np.abs(moments.exchange))) if moments.exchange.size else 0.0
        logger.debug(f"Exchange-term self-check: max |<a_s^dag a_i>| = {exchange:.3e}")
    return normalize_probability(raw_pair_probability(moments), labels_s, labels_i)


def compute_P_backward(g_P: np.ndarray, raw: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Cotangent of the raw probability given the cotangent of the normalized one."""
    total = float(np.sum(np.maximum(raw, 0.0)))
    g_floored = (g_P - np.sum(g_P * P)) / total
    return np.where(raw > 0, g_floored, 0.0)


def fidelity(P, target) -> float:
    """Bhattacharyya coefficient sum sqrt(P * P_target)."""
    p = P.P if isinstance(P, CorrelationMatrix) else np.asarray(P)
    t = target.P if isinstance(target, CorrelationMatrix) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeMismatch(f"correlation shapes differ: {p.shape} vs {t.shape}")
    return float(np.sum(np.sqrt(p * t)))


def perturbative_jsa(pump: PumpParams, hologram: HologramParams, params: InteractionParams,
                     basis_s: ModeBasis, basis_i: ModeBasis, grid: GridSpec,
                     normalize_pump: bool = True) -> np.ndarray:
    """
    First Born approximation of <a_s(m) a_i(n)>:
    i kappa sum_j dz integral A_eff E_p conj(M_m) conj(M_n) dA over the slice mid-planes.
    """
    scale = pump_normalization(pump, grid) if normalize_pump else 1.0
    theta = scale * pump.coeffs
    stack = synthesis_stack(hologram.basis, grid)
    segments = [clip_unit(np.tensordot(row, stack, axes=(0, 0))) for row in hologram.raw_coeffs]
    phi = np.zeros((basis_s.size, basis_i.size), dtype=np.complex128)
    for j in range(grid.nz):
        z = grid.slice_z(j)
        pump_field = np.tensordot(theta, pump.basis.evaluate(z, grid), axes=(0, 0))
        a_eff = effective_coupling(segments[hologram.segment_of(j, grid.nz)], j, params, grid)
        source = a_eff * pump_field
        modes_s = basis_s.evaluate(z, grid)
        modes_i = basis_i.evaluate(z, grid)
        overlap = project(np.conj(modes_s) * source[None, :, :], modes_i, grid.pixel_area)
        phi += grid.dz * overlap
    return 1j * params.kappa * phi
