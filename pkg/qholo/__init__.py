"""
Quantum holography toolkit (qholo)

Simulation of spatially structured photon pairs from spontaneous parametric
down-conversion in 3D nonlinear photonic crystals, and inverse design of the
pump and crystal hologram that produce a target correlation matrix.
"""

__version__ = "0.1.0"

from qholo.config import RunConfig, parse_config, preflight
from qholo.optimizer import OptConfig, TrainState, train
from qholo.pipeline import SPDCObjective, small_instance

__all__ = [
    "RunConfig",
    "parse_config",
    "preflight",
    "OptConfig",
    "TrainState",
    "train",
    "SPDCObjective",
    "small_instance",
]
