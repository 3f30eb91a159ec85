"""
Inverse-design loop: Adam on the complex pump and hologram coefficients with a
fresh reparameterized vacuum batch per step, parameter-group freezing and
lossless checkpoints.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .adjoint import ParamGradient
from .correlations import CorrelationMatrix
from .errors import ArtifactIOError, ConfigError, NonFiniteField
from .grid import sample_vacuum
from .medium import HologramParams, PumpParams
from .pipeline import EVAL_STREAM, Evaluation, SPDCObjective
from .targets import LossWeights

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class OptConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 500
    batch_size: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    train_pump: bool = True
    train_crystal: bool = True
    checkpoint_every: int = 0
    fixed_noise: bool = False
    log_every: int = 10
    eval_batch_size: int = 1024

    def __post_init__(self):
        """Validate the optimizer settings."""
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be at least 2, got {self.batch_size}")
        if self.eval_batch_size < 2:
            raise ValueError(f"evaluation batch size must be at least 2, got {self.eval_batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint cadence must be non-negative, got {self.checkpoint_every}")
        if self.log_every < 1:
            raise ValueError(f"log cadence must be at least 1, got {self.log_every}")

    def stream_for(self, step: int) -> int:
        """RNG stream of the vacuum batch drawn at a training step."""
        return 0 if self.fixed_noise else step + 1

    def to_dict(self) -> Dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "loss_weights": {"l1": self.weights.l1, "fidelity": self.weights.fidelity},
            "train_pump": self.train_pump,
            "train_crystal": self.train_crystal,
            "checkpoint_every": self.checkpoint_every,
            "fixed_noise": self.fixed_noise,
            "log_every": self.log_every,
            "eval_batch_size": self.eval_batch_size,
        }


@dataclass
class TrainState:
    """
    Everything needed to continue a run bit-exactly.

    Second moments follow the complex packing Re(v) = <Re(g)^2>, Im(v) = <Im(g)^2>.
    """

    theta: np.ndarray
    phi: np.ndarray
    m_theta: np.ndarray
    v_theta: np.ndarray
    m_phi: np.ndarray
    v_phi: np.ndarray
    step: int = 0
    loss_history: List[float] = field(default_factory=list)
    config_hash: str = ""

    @classmethod
    def fresh(cls, pump: PumpParams, hologram: HologramParams, config_hash: str = "") -> "TrainState":
        theta = np.array(pump.coeffs, dtype=np.complex128)
        phi = np.array(hologram.raw_coeffs, dtype=np.complex128)
        return cls(
            theta=theta,
            phi=phi,
            m_theta=np.zeros_like(theta),
            v_theta=np.zeros_like(theta),
            m_phi=np.zeros_like(phi),
            v_phi=np.zeros_like(phi),
            config_hash=config_hash,
        )

    def save(self, path) -> Path:
        path = Path(path)
        try:
            with open(path, "wb") as f:
                np.savez(
                    f,
                    version=np.array(CHECKPOINT_VERSION),
                    config_hash=np.array(self.config_hash),
                    theta=self.theta,
                    phi=self.phi,
                    m_theta=self.m_theta,
                    v_theta=self.v_theta,
                    m_phi=self.m_phi,
                    v_phi=self.v_phi,
                    step=np.array(self.step, dtype=np.int64),
                    loss_history=np.array(self.loss_history, dtype=np.float64),
                )
        except OSError as e:
            raise ArtifactIOError(f"cannot write checkpoint {path}: {e}")
        logger.info(f"Checkpoint written: {path} (step {self.step})")
        return path

    @classmethod
    def load(cls, path) -> "TrainState":
        path = Path(path)
        try:
            with np.load(path) as data:
                version = int(data["version"])
                if version != CHECKPOINT_VERSION:
                    raise ConfigError(
                        f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}"
                    )
                return cls(
                    theta=data["theta"].copy(),
                    phi=data["phi"].copy(),
                    m_theta=data["m_theta"].copy(),
                    v_theta=data["v_theta"].copy(),
                    m_phi=data["m_phi"].copy(),
                    v_phi=data["v_phi"].copy(),
                    step=int(data["step"]),
                    loss_history=[float(v) for v in data["loss_history"]],
                    config_hash=str(data["config_hash"]),
                )
        except (OSError, KeyError, ValueError) as e:
            raise ArtifactIOError(f"cannot read checkpoint {path}: {e}")


def _adam_update(param, m, v, g, lr, beta1, beta2, eps, t):
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * (g.real ** 2 + 1j * g.imag ** 2)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    update = m_hat.real / (np.sqrt(v_hat.real) + eps) + 1j * m_hat.imag / (np.sqrt(v_hat.imag) + eps)
    return param - lr * update, m, v


def adam_step(state: TrainState, grad: ParamGradient, config: OptConfig) -> TrainState:
    """One Adam update on Re/Im parts independently; frozen groups are left untouched."""
    if grad.d_pump.shape != state.theta.shape or grad.d_holo.shape != state.phi.shape:
        raise ValueError("gradient shapes do not match the parameters")
    t = state.step + 1
    hyper = (config.lr, config.beta1, config.beta2, config.eps, t)
    theta, m_theta, v_theta = state.theta, state.m_theta, state.v_theta
    phi, m_phi, v_phi = state.phi, state.m_phi, state.v_phi
    if config.train_pump:
        theta, m_theta, v_theta = _adam_update(theta, m_theta, v_theta, grad.d_pump, *hyper)
    if config.train_crystal:
        phi, m_phi, v_phi = _adam_update(phi, m_phi, v_phi, grad.d_holo, *hyper)
    return replace(
        state,
        theta=theta,
        phi=phi,
        m_theta=m_theta,
        v_theta=v_theta,
        m_phi=m_phi,
        v_phi=v_phi,
        step=t,
        loss_history=list(state.loss_history),
    )


@dataclass
class TrainResult:
    pump: PumpParams
    hologram: HologramParams
    P: CorrelationMatrix
    loss_history: List[float]
    checkpoints: List[Path]
    state: TrainState
    evaluation: Optional[Evaluation] = None

    @property
    def final_loss(self) -> Optional[float]:
        if self.evaluation is not None and self.evaluation.loss is not None:
            return self.evaluation.loss
        return self.loss_history[-1] if self.loss_history else None


def train(objective: SPDCObjective, pump: PumpParams, hologram: HologramParams,
          config: OptConfig, state: TrainState = None, checkpoint_dir=None,
          config_hash: str = "", evaluate: bool = True,
          on_step: Callable[[int, float], None] = None) -> TrainResult:
    """
    Run Adam until `config.iterations` steps have been taken.

    Step t draws a fresh vacuum batch from stream t + 1 of the run seed (stream
    0 throughout with fixed_noise), so the noise depends on (seed, t) only.
    Passing a `state` resumes from its step; the config hash must match.
    """
    pump = replace(pump, trainable=config.train_pump)
    hologram = replace(hologram, trainable=config.train_crystal)
    if state is None:
        state = TrainState.fresh(pump, hologram, config_hash)
    elif config_hash and state.config_hash != config_hash:
        raise ConfigError(
            f"checkpoint was written for config {state.config_hash[:12]}, "
            f"this run uses {config_hash[:12]}"
        )
    checkpoints = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    logger.info(
        f"Training from step {state.step} to {config.iterations}: lr={config.lr}, "
        f"B={config.batch_size}, pump {'on' if config.train_pump else 'frozen'}, "
        f"crystal {'on' if config.train_crystal else 'frozen'}"
    )
    P = None
    while state.step < config.iterations:
        step = state.step
        current_pump = pump.with_coeffs(state.theta)
        current_holo = hologram.with_coeffs(state.phi)
        vacuum = sample_vacuum(
            config.seed, config.batch_size, objective.grid, objective.sigma0_sq,
            stream=config.stream_for(step),
        )
        try:
            value, gradient, P = objective.loss_and_grad(current_pump, current_holo, vacuum)
            if not np.isfinite(value):
                raise NonFiniteField("loss is not finite")
        except NonFiniteField as e:
            raise NonFiniteField(str(e), step=step) from e
        history = state.loss_history + [value]
        state = adam_step(replace(state, loss_history=history), gradient, config)
        if step % config.log_every == 0 or state.step == config.iterations:
            logger.info(f"Step {step}: loss {value:.6f}")
        if on_step is not None:
            on_step(step, value)
        if checkpoint_dir is not None and config.checkpoint_every and (
            state.step % config.checkpoint_every == 0
        ):
            checkpoints.append(state.save(checkpoint_dir / f"step_{state.step:05d}.npz"))

    final_pump = pump.with_coeffs(state.theta)
    final_holo = hologram.with_coeffs(state.phi)
    evaluation = None
    if evaluate:
        eval_vacuum = sample_vacuum(
            config.seed, config.eval_batch_size, objective.grid, objective.sigma0_sq,
            stream=EVAL_STREAM,
        )
        evaluation = objective.evaluate(final_pump, final_holo, eval_vacuum)
        P = evaluation.P
        logger.info(
            f"Held-out evaluation on {config.eval_batch_size} samples: loss {evaluation.loss:.6f}, "
            f"fidelity {evaluation.fidelity:.4f}"
        )
    elif P is None:
        # no step ran: score the parameters on the batch the next step would draw
        vacuum = sample_vacuum(
            config.seed, config.batch_size, objective.grid, objective.sigma0_sq,
            stream=config.stream_for(state.step),
        )
        P = objective.evaluate(final_pump, final_holo, vacuum).P
    return TrainResult(final_pump, final_holo, P, list(state.loss_history), checkpoints, state,
                       evaluation)
