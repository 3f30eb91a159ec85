"""
Reverse-mode gradient engine for the SPDC pipeline.

Forward operations are recorded on a Tape as registered primitives. Each
primitive supplies its forward map, its linearization (jvp) and the adjoint
of that linearization (vjp). Gradients follow the conjugate-Wirtinger
convention: for a real loss L and complex x the reported gradient is
dL/dRe(x) + i dL/dIm(x), so dL = Re(sum(conj(g) dx)).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import NonFiniteField, UnsupportedPrimitive
from .grid import fft2, ifft2
from .medium import clip_unit
from .modes import project, project_adjoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Primitive:
    """
    A differentiable operation.

    forward(*operands, **static) -> (output, residual)
    vjp(cotangent, residual, *operands, **static) -> tuple of operand cotangents
    jvp(tangents, residual, *operands, **static) -> output tangent
    """

    name: str
    forward: Callable
    vjp: Callable
    jvp: Optional[Callable] = None


_PRIMITIVES: Dict[str, Primitive] = {}


def defprimitive(name: str, forward: Callable, vjp: Callable, jvp: Callable = None) -> Primitive:
    """Register a primitive under `name` and return it."""
    primitive = Primitive(name, forward, vjp, jvp)
    _PRIMITIVES[name] = primitive
    return primitive


def get_primitive(name: str) -> Primitive:
    try:
        return _PRIMITIVES[name]
    except KeyError:
        raise UnsupportedPrimitive(f"no adjoint registered for operation '{name}'")


def registered_primitives() -> List[str]:
    return sorted(_PRIMITIVES)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast cotangent back down to `shape`."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Spectral transforms

defprimitive(
    "fft2",
    forward=lambda x: (fft2(x), None),
    vjp=lambda g, res, x: (ifft2(g),),
    jvp=lambda t, res, x: fft2(t[0]),
)

defprimitive(
    "ifft2",
    forward=lambda x: (ifft2(x), None),
    vjp=lambda g, res, x: (fft2(g),),
    jvp=lambda t, res, x: ifft2(t[0]),
)


# Pointwise products

defprimitive(
    "mul_const",
    forward=lambda x, const: (x * const, None),
    vjp=lambda g, res, x, const: (_unbroadcast(g * np.conj(const), np.shape(x)),),
    jvp=lambda t, res, x, const: t[0] * const,
)


def _multiply_vjp(g, res, a, b):
    return (
        _unbroadcast(g * np.conj(b), np.shape(a)),
        _unbroadcast(g * np.conj(a), np.shape(b)),
    )


defprimitive(
    "multiply",
    forward=lambda a, b: (a * b, None),
    vjp=_multiply_vjp,
    jvp=lambda t, res, a, b: t[0] * b + a * t[1],
)


# Exact two-mode squeezing step


def _sinhc(x: np.ndarray) -> np.ndarray:
    """sinh(x) / x, continuous through 0."""
    small = x < 1e-3
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x ** 2 / 6.0 + x ** 4 / 120.0, np.sinh(safe) / safe)


def _tau(rho: np.ndarray, h: float) -> np.ndarray:
    """(h rho cosh(rho h) - sinh(rho h)) / rho^3, the rho-derivative of sinh(rho h)/rho over rho."""
    x = rho * h
    small = x < 1e-2
    safe = np.where(small, 1.0, rho)
    direct = (h * safe * np.cosh(safe * h) - np.sinh(safe * h)) / safe ** 3
    series = h ** 3 * (1.0 / 3.0 + x ** 2 / 30.0 + x ** 4 / 840.0)
    return np.where(small, series, direct)


def coupling_factors(drive: np.ndarray, h: float):
    """C = cosh(|D| h), sigma = sinh(|D| h)/|D| and S = i D sigma."""
    rho = np.abs(drive)
    cosh = np.cosh(rho * h)
    sigma = h * _sinhc(rho * h)
    return rho, cosh, sigma, 1j * drive * sigma


def couple(pair: np.ndarray, drive: np.ndarray, h: float) -> np.ndarray:
    """
    Integrate ds/dz = i D conj(i), di/dz = i D conj(s) exactly over h for constant D.
    `pair` stacks (signal, idler) on axis 0; D broadcasts over batch axes.
    """
    _, cosh, _, shear = coupling_factors(drive, h)
    signal, idler = pair[0], pair[1]
    return np.stack([
        cosh * signal + shear * np.conj(idler),
        cosh * idler + shear * np.conj(signal),
    ])


def _coupling_forward(pair, drive, h):
    return couple(pair, drive, h), None


def _coupling_vjp(g, res, pair, drive, h):
    rho, cosh, sigma, shear = coupling_factors(drive, h)
    signal, idler = pair[0], pair[1]
    g_signal, g_idler = g[0], g[1]
    g_pair = np.stack([
        cosh * g_signal + shear * np.conj(g_idler),
        cosh * g_idler + shear * np.conj(g_signal),
    ])
    alpha = np.real(np.conj(g_signal) * signal + np.conj(g_idler) * idler)
    beta = np.conj(g_signal) * np.conj(idler) + np.conj(g_idler) * np.conj(signal)
    tau = _tau(rho, h)
    g_drive = -1j * sigma * np.conj(beta) + drive * (
        alpha * h * sigma + np.real(1j * beta * drive) * tau
    )
    return g_pair, _unbroadcast(g_drive, np.shape(drive))


def _coupling_jvp(t, res, pair, drive, h):
    v_pair, v_drive = t
    rho, cosh, sigma, shear = coupling_factors(drive, h)
    signal, idler = pair[0], pair[1]
    d_rho_sq = np.real(np.conj(drive) * v_drive)
    d_cosh = h * sigma * d_rho_sq
    d_shear = 1j * sigma * v_drive + 1j * drive * _tau(rho, h) * d_rho_sq
    return np.stack([
        cosh * v_pair[0] + shear * np.conj(v_pair[1]) + d_cosh * signal + d_shear * np.conj(idler),
        cosh * v_pair[1] + shear * np.conj(v_pair[0]) + d_cosh * idler + d_shear * np.conj(signal),
    ])


defprimitive("coupling", forward=_coupling_forward, vjp=_coupling_vjp, jvp=_coupling_jvp)


# Hologram amplitude clip


def _clip_vjp(g, res, u):
    magnitude = np.abs(u)
    saturated = magnitude >= 1.0
    safe = np.where(saturated, magnitude, 1.0)
    projected = g / safe - np.real(np.conj(g) * u) * u / safe ** 3
    return (np.where(saturated, projected, g),)


def _clip_jvp(t, res, u):
    v = t[0]
    magnitude = np.abs(u)
    saturated = magnitude >= 1.0
    safe = np.where(saturated, magnitude, 1.0)
    projected = v / safe - u * np.real(np.conj(u) * v) / safe ** 3
    return np.where(saturated, projected, v)


defprimitive("clip", forward=lambda u: (clip_unit(u), None), vjp=_clip_vjp, jvp=_clip_jvp)


# Mode synthesis and projection


def _take_row(coeffs, row):
    return coeffs if row is None else coeffs[row]


def _synthesize_vjp(g, res, coeffs, stack, row=None):
    g_row = np.tensordot(np.conj(stack), g, axes=([-2, -1], [-2, -1]))
    if row is None:
        return (g_row,)
    g_coeffs = np.zeros_like(coeffs)
    g_coeffs[row] = g_row
    return (g_coeffs,)


def _synthesize_jvp(t, res, coeffs, stack, row=None):
    return np.tensordot(_take_row(t[0], row), stack, axes=(0, 0))


defprimitive(
    "synthesize",
    forward=lambda coeffs, stack, row=None: (
        np.tensordot(_take_row(coeffs, row), stack, axes=(0, 0)), None
    ),
    vjp=_synthesize_vjp,
    jvp=_synthesize_jvp,
)

defprimitive(
    "project",
    forward=lambda f, modes, pixel_area: (project(f, modes, pixel_area), None),
    vjp=lambda g, res, f, modes, pixel_area: (project_adjoint(g, modes, pixel_area),),
    jvp=lambda t, res, f, modes, pixel_area: project(t[0], modes, pixel_area),
)


# Pump power normalization


def _normalize_forward(theta, gram, power):
    gram_theta = gram @ theta
    quad = float(np.real(np.vdot(theta, gram_theta)))
    scale = np.sqrt(power / quad)
    return scale * theta, (scale, quad, gram_theta)


def _normalize_vjp(g, res, theta, gram, power):
    scale, quad, gram_theta = res
    overlap = float(np.real(np.vdot(g, theta)))
    return (scale * g - (scale / quad) * overlap * gram_theta,)


def _normalize_jvp(t, res, theta, gram, power):
    scale, quad, gram_theta = res
    d_scale = -(scale / quad) * float(np.real(np.vdot(gram_theta, t[0])))
    return scale * t[0] + d_scale * theta


defprimitive("normalize_power", forward=_normalize_forward, vjp=_normalize_vjp, jvp=_normalize_jvp)


# Reductions

defprimitive(
    "abs2_sum",
    forward=lambda x: (float(np.sum(np.abs(x) ** 2)), None),
    vjp=lambda g, res, x: (2.0 * np.real(g) * x,),
    jvp=lambda t, res, x: float(2.0 * np.sum(np.real(np.conj(x) * t[0]))),
)


@dataclass
class TapeEntry:
    primitive: Primitive
    operands: Tuple[int, ...]
    output: int
    static: Dict[str, Any]
    residual: Any = None


@dataclass
class Tape:
    """Recorded sequence of primitive applications over integer value references."""

    values: List[Any] = field(default_factory=list)
    entries: List[TapeEntry] = field(default_factory=list)
    differentiable: List[bool] = field(default_factory=list)
    leaves: List[int] = field(default_factory=list)

    def leaf(self, value, requires_grad: bool = True) -> int:
        """Register an input value and return its reference."""
        self.values.append(value)
        self.differentiable.append(bool(requires_grad))
        self.leaves.append(len(self.values) - 1)
        return len(self.values) - 1

    def record(self, name: str, *operands: int, **static) -> int:
        """Run primitive `name` on recorded operands and append it to the tape."""
        primitive = get_primitive(name)
        args = [self.values[ref] for ref in operands]
        output, residual = primitive.forward(*args, **static)
        self.values.append(output)
        self.differentiable.append(any(self.differentiable[ref] for ref in operands))
        ref = len(self.values) - 1
        self.entries.append(TapeEntry(primitive, tuple(operands), ref, static, residual))
        return ref

    def value(self, ref: int):
        return self.values[ref]

    def residual(self, ref: int):
        for entry in self.entries:
            if entry.output == ref:
                return entry.residual
        raise KeyError(f"value {ref} is not the output of a recorded operation")

    def replay(self) -> List[Any]:
        """Recompute every recorded value from the leaves."""
        values = list(self.values)
        for entry in self.entries:
            args = [values[ref] for ref in entry.operands]
            values[entry.output], _ = entry.primitive.forward(*args, **entry.static)
        return values

    def verify_replay(self) -> bool:
        """True when replay reproduces every recorded value bit-exactly."""
        for original, replayed in zip(self.values, self.replay()):
            if not np.array_equal(np.asarray(original), np.asarray(replayed)):
                return False
        return True

    def backward(self, seeds: Dict[int, Any]) -> Dict[int, Any]:
        """Reverse sweep; returns cotangents for every differentiable reference reached."""
        cotangents: Dict[int, Any] = dict(seeds)
        for entry in reversed(self.entries):
            g = cotangents.get(entry.output)
            if g is None or not self.differentiable[entry.output]:
                continue
            args = [self.values[ref] for ref in entry.operands]
            grads = entry.primitive.vjp(g, entry.residual, *args, **entry.static)
            for ref, g_ref in zip(entry.operands, grads):
                if g_ref is None or not self.differentiable[ref]:
                    continue
                if ref in cotangents:
                    cotangents[ref] = cotangents[ref] + g_ref
                else:
                    cotangents[ref] = g_ref
        return cotangents


@dataclass
class ParamGradient:
    d_pump: np.ndarray
    d_holo: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.d_pump)) and np.all(np.isfinite(self.d_holo))):
            raise NonFiniteField("gradient contains NaN or Inf values")

    def max_abs(self) -> float:
        parts = [np.abs(self.d_pump).ravel(), np.abs(self.d_holo).ravel()]
        return float(np.max(np.concatenate(parts))) if any(p.size for p in parts) else 0.0


def grad(loss_fn: Callable, pump, hologram, tape: Tape = None) -> Tuple[float, ParamGradient]:
    """
    Value and gradient of a real loss built on a tape.

    `loss_fn(tape, theta_ref, phi_ref)` records the forward pipeline and returns
    the reference of the scalar loss. Frozen parameter groups enter the tape as
    constants and receive an exactly zero gradient block.
    """
    tape = Tape() if tape is None else tape
    theta = tape.leaf(pump.coeffs, requires_grad=pump.trainable)
    phi = tape.leaf(hologram.raw_coeffs, requires_grad=hologram.trainable)
    out = loss_fn(tape, theta, phi)
    loss = float(np.real(tape.value(out)))
    if pump.trainable or hologram.trainable:
        cotangents = tape.backward({out: 1.0})
    else:
        cotangents = {}
    d_pump = cotangents.get(theta) if pump.trainable else None
    d_holo = cotangents.get(phi) if hologram.trainable else None
    d_pump = np.zeros_like(pump.coeffs) if d_pump is None else np.asarray(d_pump, np.complex128)
    d_holo = (
        np.zeros_like(hologram.raw_coeffs) if d_holo is None else np.asarray(d_holo, np.complex128)
    )
    return loss, ParamGradient(d_pump, d_holo)


def loss_value(loss_fn: Callable, pump, hologram) -> float:
    """Forward evaluation only."""
    tape = Tape()
    theta = tape.leaf(pump.coeffs, requires_grad=False)
    phi = tape.leaf(hologram.raw_coeffs, requires_grad=False)
    return float(np.real(tape.value(loss_fn(tape, theta, phi))))


@dataclass
class GradCheckRow:
    group: str
    index: Tuple[int, ...]
    component: str
    analytic: float
    numeric: float
    rel_error: float

    def to_dict(self) -> Dict:
        return {
            "group": self.group,
            "index": "-".join(str(i) for i in self.index),
            "component": self.component,
            "analytic": self.analytic,
            "numeric": self.numeric,
            "rel_error": self.rel_error,
        }


@dataclass
class GradCheckReport:
    rows: List[GradCheckRow]
    fd_step: float
    tolerance: float
    step_errors: Dict[float, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((row.rel_error for row in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def monotonic_note(self) -> str:
        """State whether the error shrinks with the finite-difference step."""
        if len(self.step_errors) < 2:
            return ""
        steps = sorted(self.step_errors, reverse=True)
        errors = [self.step_errors[s] for s in steps]
        if all(a > b for a, b in zip(errors, errors[1:])):
            return "error decreases monotonically with the step (truncation-dominated)"
        return "error is not monotonic in the step (round-off dominated below some step)"

    def to_text(self) -> str:
        lines = [
            f"gradient check: {self.status}",
            f"fd_step: {self.fd_step:.3g}",
            f"tolerance: {self.tolerance:.3g}",
            f"max relative error: {self.max_error:.3e}",
            f"components checked: {len(self.rows)}",
        ]
        for step in sorted(self.step_errors, reverse=True):
            lines.append(f"max relative error at step {step:.3g}: {self.step_errors[step]:.3e}")
        note = self.monotonic_note()
        if note:
            lines.append(note)
        return "\n".join(lines) + "\n"


def _finite_difference_rows(loss_fn, pump, hologram, analytic: ParamGradient, fd_step: float):
    floor = 1e-6 * max(analytic.max_abs(), np.finfo(float).tiny)
    groups = []
    if pump.trainable:
        groups.append(("pump", pump, "coeffs", analytic.d_pump))
    if hologram.trainable:
        groups.append(("holo", hologram, "raw_coeffs", analytic.d_holo))
    rows = []
    for group, params, attr, g in groups:
        base = getattr(params, attr)
        for index in np.ndindex(base.shape):
            for component, direction, an in (("re", 1.0, g[index].real), ("im", 1j, g[index].imag)):
                values = []
                for sign in (1.0, -1.0):
                    shifted = base.copy()
                    shifted[index] += sign * fd_step * direction
                    shifted_params = params.with_coeffs(shifted)
                    if group == "pump":
                        values.append(loss_value(loss_fn, shifted_params, hologram))
                    else:
                        values.append(loss_value(loss_fn, pump, shifted_params))
                numeric = (values[0] - values[1]) / (2 * fd_step)
                error = abs(numeric - an) / max(abs(numeric), abs(an), floor)
                rows.append(GradCheckRow(group, index, component, float(an), float(numeric), error))
    return rows


def grad_check(loss_fn: Callable, pump, hologram, fd_step: float = 1e-6,
               tolerance: float = 1e-5, compare_steps=()) -> GradCheckReport:
    """Compare the adjoint gradient with central differences on every Re/Im component."""
    _, analytic = grad(loss_fn, pump, hologram)
    rows = _finite_difference_rows(loss_fn, pump, hologram, analytic, fd_step)
    report = GradCheckReport(rows, fd_step, tolerance)
    report.step_errors[fd_step] = report.max_error
    for step in compare_steps:
        extra = _finite_difference_rows(loss_fn, pump, hologram, analytic, step)
        report.step_errors[step] = max((row.rel_error for row in extra), default=0.0)
    logger.info(f"Gradient check {report.status}: max relative error {report.max_error:.3e}")
    return report
