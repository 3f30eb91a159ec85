"""
Transverse grids, complex fields, the unitary 2D FFT and vacuum sampling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import NonFiniteField

logger = logging.getLogger(__name__)

DEFAULT_SIGMA0_SQ = 0.5


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    dx: float
    dy: float
    nz: int
    dz: float

    def __post_init__(self):
        """Validate pixel counts and pitches."""
        for name in ("nx", "ny"):
            value = getattr(self, name)
            if int(value) != value or value < 8 or not _is_power_of_two(int(value)):
                raise ValueError(f"{name} must be a power of two and at least 8, got {value}")
        if int(self.nz) != self.nz or self.nz < 1:
            raise ValueError(f"nz must be a positive integer, got {self.nz}")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def length(self) -> float:
        """Crystal length L = nz * dz."""
        return self.nz * self.dz

    @property
    def pixel_area(self) -> float:
        return self.dx * self.dy

    @property
    def window(self) -> Tuple[float, float]:
        return self.nx * self.dx, self.ny * self.dy

    @property
    def x(self) -> np.ndarray:
        """Pixel coordinates along x; pixel nx/2 sits on the optical axis."""
        return (np.arange(self.nx) - self.nx // 2) * self.dx

    @property
    def y(self) -> np.ndarray:
        return (np.arange(self.ny) - self.ny // 2) * self.dy

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (X, Y) arrays of shape (nx, ny)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def frequencies(self) -> Tuple[np.ndarray, np.ndarray]:
        """Angular spatial frequencies (KX, KY) matching the unshifted FFT layout."""
        kx = 2 * np.pi * np.fft.fftfreq(self.nx, d=self.dx)
        ky = 2 * np.pi * np.fft.fftfreq(self.ny, d=self.dy)
        return np.meshgrid(kx, ky, indexing="ij")

    def transverse_k2(self) -> np.ndarray:
        kx, ky = self.frequencies()
        return kx ** 2 + ky ** 2

    def slice_z(self, index: int) -> float:
        """Mid-plane position of slice `index`."""
        return (index + 0.5) * self.dz

    def slice_positions(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    def to_dict(self) -> Dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "dx": self.dx,
            "dy": self.dy,
            "nz": self.nz,
            "dz": self.dz,
        }


@dataclass
class ComplexField:
    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[-2:] != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid ({self.grid.nx}, {self.grid.ny})"
            )

    def norm(self) -> float:
        """Discrete L2 norm with dx*dy weights."""
        return float(np.sqrt(self.power()))

    def power(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.pixel_area)

    def inner(self, other: "ComplexField") -> complex:
        """<self, other>, conjugate-linear in self."""
        return complex(np.sum(np.conj(self.values) * other.values) * self.grid.pixel_area)

    def check_finite(self, what: str = "field"):
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteField(f"{what} contains NaN or Inf values")
        return self


class Direction(str, Enum):
    forward = "forward"
    inverse = "inverse"

    @classmethod
    def from_str(cls, value: str) -> "Direction":
        """Convert string to Direction, case-insensitive."""
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Invalid FFT direction: {value}")


def fft2(values: np.ndarray) -> np.ndarray:
    """Unitary forward FFT over the last two axes."""
    return np.fft.fft2(values, axes=(-2, -1), norm="ortho")


def ifft2(values: np.ndarray) -> np.ndarray:
    """Unitary inverse FFT over the last two axes."""
    return np.fft.ifft2(values, axes=(-2, -1), norm="ortho")


def fft2_unitary(field: ComplexField, direction="forward") -> ComplexField:
    """Transform a field with the 1/sqrt(N) normalization in both directions."""
    if isinstance(direction, str):
        direction = Direction.from_str(direction)
    transform = fft2 if direction == Direction.forward else ifft2
    return ComplexField(transform(field.values), field.grid)


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator for one (stream, sample) pair of a run seed."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass
class VacuumBatch:
    """
    Reparameterized random node: B independent (signal, idler) vacuum seeds.

    Samples are generated on demand from per-sample Philox streams, so any
    sub-range of the batch is bit-identical to the same rows of the full batch.
    """

    batch_size: int
    grid: GridSpec
    rng_seed: int
    sigma0_sq: float = DEFAULT_SIGMA0_SQ
    stream: int = 0
    threads: int = 1
    _cache: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.rng_seed < 0 or self.rng_seed >= 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.rng_seed}")
        if not self.sigma0_sq > 0:
            raise ValueError(f"sigma0_sq must be positive, got {self.sigma0_sq}")

    @property
    def pixel_std(self) -> float:
        """Standard deviation of the real (or imaginary) part of one pixel."""
        return float(np.sqrt(self.sigma0_sq / (2 * self.grid.pixel_area)))

    def sample(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        """Return the (signal, idler) seed of one sample."""
        if not 0 <= index < self.batch_size:
            raise IndexError(f"sample {index} outside batch of {self.batch_size}")
        rng = sample_rng(self.rng_seed, self.stream, index)
        draws = rng.standard_normal((4, self.grid.nx, self.grid.ny)) * self.pixel_std
        return draws[0] + 1j * draws[1], draws[2] + 1j * draws[3]

    def chunk(self, start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        """Return signal and idler seeds for samples [start, stop) as (n, nx, ny) arrays."""
        if self._cache is not None:
            return self._cache[0][start:stop], self._cache[1][start:stop]
        indices = range(start, stop)
        if self.threads > 1 and len(indices) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                pairs = list(executor.map(self.sample, indices))
        else:
            pairs = [self.sample(i) for i in indices]
        signal = np.stack([p[0] for p in pairs])
        idler = np.stack([p[1] for p in pairs])
        return signal, idler

    def materialize(self) -> "VacuumBatch":
        """Generate and keep every sample in memory."""
        if self._cache is None:
            self._cache = self.chunk(0, self.batch_size)
        return self

    @property
    def signal(self) -> np.ndarray:
        return self.materialize()._cache[0]

    @property
    def idler(self) -> np.ndarray:
        return self.materialize()._cache[1]

    @property
    def samples(self):
        """List of (signal, idler) ComplexField pairs."""
        return [
            (ComplexField(s, self.grid), ComplexField(i, self.grid))
            for s, i in zip(self.signal, self.idler)
        ]


def sample_vacuum(seed: int, B: int, grid: GridSpec, sigma0_sq: float = DEFAULT_SIGMA0_SQ,
                  stream: int = 0, threads: int = 1) -> VacuumBatch:
    """
    Draw a vacuum batch.

    Each pixel's real and imaginary parts are i.i.d. Gaussian with variance
    sigma0_sq / (2 dx dy), so the projection onto any orthonormal mode has
    complex variance sigma0_sq whatever the grid resolution.
    """
    if B < 1:
        raise ValueError(f"batch size must be at least 1, got {B}")
    logger.debug(f"Vacuum batch: seed={seed} stream={stream} B={B} grid={grid.nx}x{grid.ny}")
    return VacuumBatch(
        batch_size=int(B),
        grid=grid,
        rng_seed=int(seed),
        sigma0_sq=float(sigma0_sq),
        stream=int(stream),
        threads=int(threads),
    )
