"""
Laguerre-Gauss and Hermite-Gauss mode dictionaries with full z-dependence,
plus projection of fields onto mode bases.

Conventions: the envelope obeys dA/dz = (i/2k) laplacian(A) with k = 2 pi n / lambda.
Modes carry exp(+i l phi), curvature phase exp(+i k r^2 / 2R) and Gouy phase
exp(-i (N + 1) atan(z / z_R)); the waist sits at z = 0.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from math import factorial
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.special import eval_genlaguerre, eval_hermite

from .errors import ModeNotInBasis, ShapeMismatch, WindowTooSmall
from .grid import ComplexField, GridSpec

logger = logging.getLogger(__name__)

CONTAINMENT_FACTOR = 6.0


class ModeFamily(str, Enum):
    LG = "LG"
    HG = "HG"

    @classmethod
    def from_str(cls, value: str) -> "ModeFamily":
        """Convert string to ModeFamily, case-insensitive."""
        try:
            return cls(value.upper())
        except ValueError:
            raise ValueError(f"Invalid mode family: {value}")


@dataclass(frozen=True)
class ModeSpec:
    family: ModeFamily
    indices: Tuple[int, int]
    waist: float
    wavelength: float
    n_medium: float = 1.0

    def __post_init__(self):
        """Validate indices and beam parameters."""
        if isinstance(self.family, str):
            object.__setattr__(self, "family", ModeFamily.from_str(self.family))
        a, b = (int(v) for v in self.indices)
        object.__setattr__(self, "indices", (a, b))
        if a < 0:
            raise ValueError(f"radial/first index must be non-negative, got {a}")
        if self.family == ModeFamily.HG and b < 0:
            raise ValueError(f"HG indices must be non-negative, got {self.indices}")
        if not self.waist > 0:
            raise ValueError(f"waist must be positive, got {self.waist}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not self.n_medium > 0:
            raise ValueError(f"refractive index must be positive, got {self.n_medium}")

    @property
    def label(self) -> str:
        a, b = self.indices
        return f"{self.family.value}_{a}_{b}"

    @property
    def order(self) -> int:
        a, b = self.indices
        if self.family == ModeFamily.LG:
            return 2 * a + abs(b)
        return a + b

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi * self.n_medium / self.wavelength

    @property
    def rayleigh_range(self) -> float:
        return np.pi * self.waist ** 2 * self.n_medium / self.wavelength

    def waist_at(self, z: float) -> float:
        """Beam radius w(z)."""
        return self.waist * np.sqrt(1.0 + (z / self.rayleigh_range) ** 2)

    def to_dict(self) -> Dict:
        return {
            "family": self.family.value,
            "indices": list(self.indices),
            "waist": self.waist,
            "wavelength": self.wavelength,
            "n_medium": self.n_medium,
        }


def mode_values(spec: ModeSpec, z: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate the continuum-normalized mode at arbitrary transverse points."""
    z_r = spec.rayleigh_range
    w = spec.waist_at(z)
    inv_r = z / (z ** 2 + z_r ** 2)
    gouy = np.arctan2(z, z_r)
    r2 = x ** 2 + y ** 2
    a, b = spec.indices

    if spec.family == ModeFamily.LG:
        p, l = a, b
        norm = np.sqrt(2.0 * factorial(p) / (np.pi * factorial(p + abs(l)))) / w
        t = 2.0 * r2 / w ** 2
        amplitude = norm * np.sqrt(t) ** abs(l) * eval_genlaguerre(p, abs(l), t) * np.exp(-r2 / w ** 2)
        amplitude = amplitude * np.exp(1j * l * np.arctan2(y, x))
    else:
        n, m = a, b
        norm = np.sqrt(2.0 / np.pi) / w / np.sqrt(2.0 ** n * factorial(n) * 2.0 ** m * factorial(m))
        amplitude = (
            norm
            * eval_hermite(n, np.sqrt(2.0) * x / w)
            * eval_hermite(m, np.sqrt(2.0) * y / w)
            * np.exp(-r2 / w ** 2)
        )

    if z == 0:
        return amplitude.astype(np.complex128)
    phase = 0.5 * spec.wavenumber * r2 * inv_r - (spec.order + 1) * gouy
    return amplitude * np.exp(1j * phase)


def check_containment(spec: ModeSpec, z: float, grid: GridSpec, factor: float = CONTAINMENT_FACTOR):
    """Raise WindowTooSmall unless the grid window spans `factor` mode radii at z."""
    radius = spec.waist_at(z)
    window = min(grid.window)
    if window < factor * radius:
        raise WindowTooSmall(
            f"grid window {window:.4g} m is smaller than {factor:g} x mode radius "
            f"{radius:.4g} m for {spec.label} at z = {z:.4g} m"
        )


def eval_mode(spec: ModeSpec, z: float, grid: GridSpec, check: bool = True) -> ComplexField:
    """Discretize a mode on the grid at propagation distance z."""
    if check:
        check_containment(spec, z, grid)
    x, y = grid.coordinates()
    return ComplexField(mode_values(spec, z, x, y), grid)


@dataclass(frozen=True)
class ModeBasis:
    modes: Tuple[ModeSpec, ...]
    _positions: Dict[Tuple[int, int], int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        """Check that the modes share family, waist and wavelength and are unique."""
        modes = tuple(self.modes)
        object.__setattr__(self, "modes", modes)
        if not modes:
            raise ValueError("mode basis must contain at least one mode")
        first = modes[0]
        for mode in modes[1:]:
            if (mode.family, mode.waist, mode.wavelength, mode.n_medium) != (
                first.family, first.waist, first.wavelength, first.n_medium
            ):
                raise ValueError("all modes in a basis must share family, waist and wavelength")
        positions = {}
        for i, mode in enumerate(modes):
            if mode.indices in positions:
                raise ValueError(f"duplicate mode {mode.label} in basis")
            positions[mode.indices] = i
        object.__setattr__(self, "_positions", positions)

    @classmethod
    def lg(cls, max_l: int, waist: float, wavelength: float, n_medium: float = 1.0,
           max_p: int = 0, l_values: Sequence[int] = None) -> "ModeBasis":
        """LG basis ordered by (l ascending, p ascending)."""
        if l_values is None:
            l_values = range(-max_l, max_l + 1)
        modes = [
            ModeSpec(ModeFamily.LG, (p, l), waist, wavelength, n_medium)
            for l in sorted(l_values)
            for p in range(max_p + 1)
        ]
        return cls(tuple(modes))

    @classmethod
    def hg(cls, max_n: int, waist: float, wavelength: float, n_medium: float = 1.0,
           max_m: int = 0) -> "ModeBasis":
        """HG basis ordered by (n ascending, m ascending)."""
        modes = [
            ModeSpec(ModeFamily.HG, (n, m), waist, wavelength, n_medium)
            for n in range(max_n + 1)
            for m in range(max_m + 1)
        ]
        return cls(tuple(modes))

    @property
    def size(self) -> int:
        return len(self.modes)

    def __len__(self):
        return len(self.modes)

    @property
    def family(self) -> ModeFamily:
        return self.modes[0].family

    @property
    def waist(self) -> float:
        return self.modes[0].waist

    @property
    def wavelength(self) -> float:
        return self.modes[0].wavelength

    @property
    def labels(self) -> List[str]:
        return [mode.label for mode in self.modes]

    def index(self, indices: Union[Tuple[int, int], str]) -> int:
        """Position of a mode given its indices or label."""
        if isinstance(indices, str):
            try:
                return self.labels.index(indices)
            except ValueError:
                raise ModeNotInBasis(f"mode {indices} is not in the basis {self.labels}")
        key = tuple(int(v) for v in indices)
        if key not in self._positions:
            raise ModeNotInBasis(
                f"mode {self.family.value}{key} is not in the basis {self.labels}"
            )
        return self._positions[key]

    def fundamental_index(self) -> int:
        return self.index((0, 0))

    def max_radius(self, z: float) -> float:
        return max(mode.waist_at(z) for mode in self.modes)

    def evaluate(self, z: float, grid: GridSpec, check: bool = True) -> np.ndarray:
        """Stack of every mode at z, shape (K, nx, ny)."""
        return np.stack([eval_mode(mode, z, grid, check=check).values for mode in self.modes])

    def to_dict(self) -> Dict:
        return {
            "family": self.family.value,
            "waist": self.waist,
            "wavelength": self.wavelength,
            "n_medium": self.modes[0].n_medium,
            "order": "l ascending, p ascending" if self.family == ModeFamily.LG
            else "n ascending, m ascending",
            "modes": self.labels,
        }


@dataclass
class CoeffVector:
    basis: ModeBasis
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[-1] != self.basis.size:
            raise ShapeMismatch(
                f"coefficient length {self.values.shape[-1]} does not match basis size {self.basis.size}"
            )

    def as_rows(self) -> List[Dict]:
        return [
            {"mode": label, "re": float(c.real), "im": float(c.imag)}
            for label, c in zip(self.basis.labels, self.values)
        ]


def project(values: np.ndarray, modes: np.ndarray, pixel_area: float) -> np.ndarray:
    """c_k = sum conj(M_k) f dA over the last two axes; batch axes of `values` are kept."""
    return np.tensordot(values, np.conj(modes), axes=([-2, -1], [-2, -1])) * pixel_area


def project_adjoint(cotangent: np.ndarray, modes: np.ndarray, pixel_area: float) -> np.ndarray:
    """Adjoint of `project`: sum_k M_k g_k dA."""
    return np.tensordot(cotangent, modes, axes=([-1], [0])) * pixel_area


def decompose(field: Union[ComplexField, np.ndarray], basis: ModeBasis, z: float,
              grid: GridSpec = None) -> CoeffVector:
    """Project a field onto every mode of the basis evaluated at z."""
    if isinstance(field, ComplexField):
        grid = field.grid
        values = field.values
    else:
        values = np.asarray(field)
        if grid is None:
            raise ValueError("a grid is required when decomposing a bare array")
    modes = basis.evaluate(z, grid)
    return CoeffVector(basis, project(values, modes, grid.pixel_area))


def gram_matrix(basis: ModeBasis, grid: GridSpec, z: float) -> np.ndarray:
    """Grid inner products G_jk = <M_j, M_k>; no containment check is applied."""
    modes = basis.evaluate(z, grid, check=False)
    flat = modes.reshape(basis.size, -1)
    gram = np.conj(flat) @ flat.T * grid.pixel_area
    return 0.5 * (gram + np.conj(gram.T))


def gram_deviation(basis: ModeBasis, grid: GridSpec, z: float) -> float:
    """max |G - I| for the basis on this grid."""
    gram = gram_matrix(basis, grid, z)
    deviation = float(np.max(np.abs(gram - np.eye(basis.size))))
    logger.debug(f"Gram deviation of {basis.family.value} basis at z={z:.4g} m: {deviation:.3e}")
    return deviation
