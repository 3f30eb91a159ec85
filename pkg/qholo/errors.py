"""
Error hierarchy for qholo.

Every error carries the exit code the command line reports for it, so the
CLI entry point can map failures without knowing where they came from.
"""


class QholoError(Exception):
    """Base class for all qholo failures."""

    exit_code = 1


# Configuration errors (exit 2)

class ConfigError(QholoError):
    exit_code = 2


class SchemaError(ConfigError, ValueError):
    """Structural problem in a run configuration (wrong type, missing or duplicate key)."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        context = []
        if key:
            context.append(f"key '{key}'")
        if line is not None:
            context.append(f"line {line}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class UnknownKey(SchemaError):
    pass


class UnitError(ConfigError, ValueError):
    """A physical quantity is missing its unit, uses the wrong one or is physically inconsistent."""


class EnergyConservationError(UnitError):
    pass


class ModeNotInBasis(ConfigError, ValueError):
    pass


class ShapeMismatch(ConfigError, ValueError):
    pass


# Preflight errors (exit 3)

class PreflightError(QholoError):
    exit_code = 3


class WindowTooSmall(PreflightError, ValueError):
    pass


class AllZeroPump(PreflightError, ValueError):
    pass


class MetadataMismatch(PreflightError):
    pass


class PolingResolutionError(PreflightError, ValueError):
    pass


# Numerical errors (exit 4)

class NumericalError(QholoError):
    exit_code = 4


class NonFiniteField(NumericalError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at optimizer step {step}"
        super().__init__(message)


class DegenerateP(NumericalError):
    pass


class UnsupportedPrimitive(NumericalError):
    pass


# I/O errors (exit 5)

class ArtifactIOError(QholoError):
    exit_code = 5
