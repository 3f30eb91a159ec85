"""
Target correlation library and the loss used for inverse design.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .correlations import CorrelationMatrix
from .errors import ShapeMismatch
from .modes import ModeBasis, ModeFamily


class TargetKind(str, Enum):
    lg_qudit = "lg_qudit"
    lg_high_order_qubit = "lg_high_order_qubit"
    hg_ququad = "hg_ququad"
    custom = "custom"

    @classmethod
    def from_str(cls, value: str) -> "TargetKind":
        """Convert string to TargetKind, case-insensitive."""
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Invalid target kind: {value}")


@dataclass
class TargetSpec:
    kind: TargetKind
    d: Optional[int] = None
    l: Optional[int] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        """Validate the parameters each kind needs."""
        if isinstance(self.kind, str):
            self.kind = TargetKind.from_str(self.kind)
        if self.kind == TargetKind.lg_qudit:
            if self.d is None or self.d < 2:
                raise ValueError("lg_qudit targets need a dimension d >= 2")
        elif self.kind == TargetKind.lg_high_order_qubit:
            if self.l is None or self.l < 1:
                raise ValueError("lg_high_order_qubit targets need an OAM order l >= 1")
        elif self.kind == TargetKind.custom:
            if self.matrix is None:
                raise ValueError("custom targets need an explicit matrix")
            self.matrix = np.asarray(self.matrix, dtype=float)
            if self.matrix.ndim != 2:
                raise ValueError("custom target matrix must be two-dimensional")
            if np.any(self.matrix < 0) or not np.sum(self.matrix) > 0:
                raise ValueError("custom target matrix must be non-negative with positive sum")

    def cells(self) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
        """(signal mode indices, idler mode indices) of each populated cell."""
        if self.kind == TargetKind.lg_qudit:
            return [((0, l), (0, l)) for l in range(1, self.d + 1)]
        if self.kind == TargetKind.lg_high_order_qubit:
            return [((0, self.l), (0, -self.l)), ((0, -self.l), (0, self.l))]
        if self.kind == TargetKind.hg_ququad:
            return [((n, 0), (n, 0)) for n in range(4)]
        return []

    def family(self) -> Optional[ModeFamily]:
        if self.kind == TargetKind.hg_ququad:
            return ModeFamily.HG
        if self.kind == TargetKind.custom:
            return None
        return ModeFamily.LG

    def to_dict(self) -> Dict:
        result = {"kind": self.kind.value}
        if self.d is not None:
            result["d"] = self.d
        if self.l is not None:
            result["l"] = self.l
        if self.matrix is not None:
            result["matrix"] = self.matrix.tolist()
        return result


def make_target(spec: TargetSpec, basis_s: ModeBasis, basis_i: ModeBasis) -> CorrelationMatrix:
    """
    Target two-photon probability: uniform weight on the correlated cells of the
    target state. Phases of the target ket do not enter P.
    """
    shape = (basis_s.size, basis_i.size)
    if spec.kind == TargetKind.custom:
        if spec.matrix.shape != shape:
            raise ShapeMismatch(f"custom target has shape {spec.matrix.shape}, bases give {shape}")
        P = spec.matrix / np.sum(spec.matrix)
    else:
        P = np.zeros(shape)
        cells = spec.cells()
        for mode_s, mode_i in cells:
            P[basis_s.index(mode_s), basis_i.index(mode_i)] = 1.0 / len(cells)
    return CorrelationMatrix(P, basis_s.labels, basis_i.labels)


@dataclass
class LossWeights:
    l1: float = 1.0
    fidelity: float = 1.0

    def __post_init__(self):
        if self.l1 < 0 or self.fidelity < 0:
            raise ValueError("loss weights must be non-negative")


def _arrays(P, target):
    p = P.P if isinstance(P, CorrelationMatrix) else np.asarray(P, dtype=float)
    t = target.P if isinstance(target, CorrelationMatrix) else np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeMismatch(f"correlation shapes differ: {p.shape} vs {t.shape}")
    return p, t


def loss(P, target, weights: LossWeights = None) -> float:
    """
    w_l1 * sum|P - T| + w_fid * (1 - fidelity(P, T)).

    For normalized P and T the fidelity term equals 0.5 * sum (sqrt(P) - sqrt(T))^2,
    which is how it is evaluated so that P == T gives exactly zero.
    """
    weights = weights or LossWeights()
    p, t = _arrays(P, target)
    l1 = float(np.sum(np.abs(p - t)))
    infidelity = float(0.5 * np.sum((np.sqrt(p) - np.sqrt(t)) ** 2))
    return weights.l1 * l1 + weights.fidelity * infidelity


def loss_gradient(P, target, weights: LossWeights = None) -> np.ndarray:
    """dL/dP; the fidelity derivative is taken as zero on cells where P = 0."""
    weights = weights or LossWeights()
    p, t = _arrays(P, target)
    positive = p > 0
    safe = np.where(positive, p, 1.0)
    d_fid = np.where(positive, 0.5 - 0.5 * np.sqrt(t / safe), 0.0)
    return weights.l1 * np.sign(p - t) + weights.fidelity * d_fid
