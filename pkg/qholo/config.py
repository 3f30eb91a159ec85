"""
Run configuration: YAML loading with duplicate-key detection, validation
against the shipped schema, unit parsing into SI, and the preflight checks
every command runs before any numerics.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .correlations import CorrelationMatrix, Estimator
from .errors import (
    AllZeroPump,
    ConfigError,
    PreflightError,
    QholoError,
    SchemaError,
    ShapeMismatch,
    UnitError,
    UnknownKey,
    WindowTooSmall,
)
from .grid import GridSpec
from .medium import HologramParams, InteractionParams, PumpParams
from .modes import ModeBasis, ModeFamily, gram_deviation
from .optimizer import OptConfig
from .pipeline import SPDCObjective, initial_hologram, initial_pump
from .targets import LossWeights, TargetSpec, make_target

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_NAME = "linbo3_default.yml"
CONFIG_DIR = Path(__file__).parent / "configs"
SCHEMA_PATH = Path(__file__).parent / "schema.yml"
WINDOW_WAISTS = 8.0
HASH_EXCLUDED = ("output",)

UNITS = {
    "length": {"m": 1.0, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9},
    "power": {"W": 1.0, "mW": 1e-3, "uW": 1e-6},
    "wavenumber": {
        "1/m": 1.0, "/m": 1.0, "1/mm": 1e3, "/mm": 1e3, "1/um": 1e6, "/um": 1e6,
    },
    "coupling": {"1/sqrt(W)": 1.0, "/sqrt(W)": 1.0},
}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S.*?)?\s*$")


class LineMap(dict):
    """Mapping that remembers the YAML line of each key."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines: Dict[str, int] = {}
        self.start_line: Optional[int] = None


class _ConfigLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate keys and records line numbers."""


def _construct_mapping(loader, node, deep=False):
    loader.flatten_mapping(node)
    result = LineMap()
    result.start_line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        line = key_node.start_mark.line + 1
        if key in result:
            raise SchemaError("duplicate key", key=str(key), line=line)
        result[key] = loader.construct_object(value_node, deep=deep)
        result.lines[str(key)] = line
    return result


_ConfigLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping
)


def load_yaml(path) -> Any:
    """Read a UTF-8 YAML file, rejecting duplicate keys."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except UnicodeDecodeError as e:
        raise SchemaError(f"config file {path} is not valid UTF-8: {e}")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    try:
        return yaml.load(text, Loader=_ConfigLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise SchemaError(f"invalid YAML in {path}: {e}", line=mark.line + 1 if mark else None)


def load_schema() -> Dict:
    with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def parse_quantity(value, kind: str, key: str = None, line: int = None) -> float:
    """Parse a string such as "532nm" into SI units; bare numbers are rejected."""
    units = UNITS[kind]
    allowed = ", ".join(units)
    match = _QUANTITY.match(value) if isinstance(value, str) else None
    if match is None or match.group(2) is None:
        raise UnitError(f"{kind} value {value!r} needs a unit ({allowed})" + _context(key, line))
    number, unit = match.group(1), match.group(2)
    if unit not in units:
        raise UnitError(f"unit '{unit}' is not a {kind} unit ({allowed})" + _context(key, line))
    return float(number) * units[unit]


def _context(key, line) -> str:
    parts = []
    if key:
        parts.append(f"key '{key}'")
    if line is not None:
        parts.append(f"line {line}")
    return f" ({', '.join(parts)})" if parts else ""


def _check_scalar(kind: str, value, spec: Dict, key: str, line: int):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"expected an integer, got {value!r}", key, line)
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"expected a number, got {value!r}", key, line)
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise SchemaError(f"expected true or false, got {value!r}", key, line)
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise SchemaError(f"expected a string, got {value!r}", key, line)
        return value
    if kind == "enum":
        if value not in spec["values"]:
            raise SchemaError(f"expected one of {spec['values']}, got {value!r}", key, line)
        return value
    if kind in UNITS:
        return parse_quantity(value, kind, key, line)
    if kind == "int_list":
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise SchemaError(f"expected a list of integers, got {value!r}", key, line)
        return list(value)
    if kind == "str_list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise SchemaError(f"expected a list of strings, got {value!r}", key, line)
        allowed = spec.get("values")
        if allowed:
            for v in value:
                if v not in allowed:
                    raise SchemaError(f"expected entries from {allowed}, got {v!r}", key, line)
        return list(value)
    if kind == "matrix":
        if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
            raise SchemaError("expected a list of rows", key, line)
        width = len(value[0])
        for row in value:
            if len(row) != width or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
            ):
                raise SchemaError("matrix rows must be numeric and of equal length", key, line)
        return [[float(v) for v in row] for row in value]
    if kind == "coeffs":
        if not isinstance(value, dict):
            raise SchemaError("expected a mapping of mode label to [re, im]", key, line)
        out = {}
        for label, pair in value.items():
            if not (isinstance(pair, list) and len(pair) == 2 and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair
            )):
                raise SchemaError(f"coefficient of {label} must be [re, im]", key, line)
            out[str(label)] = [float(pair[0]), float(pair[1])]
        return out
    raise SchemaError(f"schema uses unknown type '{kind}'", key, line)


def validate(data, fields: Dict, path: str = "") -> Dict:
    """Validate a mapping against schema fields, applying defaults; returns plain SI values."""
    if not isinstance(data, dict):
        raise SchemaError(f"expected a mapping, got {type(data).__name__}", path or None)
    lines = getattr(data, "lines", {})
    for key in data:
        if key not in fields:
            raise UnknownKey("unknown key", f"{path}{key}", lines.get(str(key)))
    result = {}
    for key, spec in fields.items():
        full_key = f"{path}{key}"
        line = lines.get(key)
        kind = spec["type"]
        if key not in data:
            if spec.get("required"):
                raise SchemaError("missing required key", full_key, getattr(data, "start_line", None))
            default = spec.get("default")
            if kind == "block" and default is not None:
                result[key] = validate(LineMap(default), spec["fields"], f"{full_key}.")
            else:
                result[key] = default
            continue
        value = data[key]
        if value is None:
            if spec.get("required"):
                raise SchemaError("required key is null", full_key, line)
            result[key] = None
        elif kind == "block":
            result[key] = validate(value, spec["fields"], f"{full_key}.")
        else:
            result[key] = _check_scalar(kind, value, spec, full_key, line)
    return result


def canonical_json(data: Dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(data: Dict) -> str:
    """
    SHA-256 of the canonical JSON of a validated configuration.

    The output block (directory, formats, log cadence) does not change any
    result and is left out.
    """
    hashed = {key: value for key, value in data.items() if key not in HASH_EXCLUDED}
    return hashlib.sha256(canonical_json(hashed).encode("utf-8")).hexdigest()


def find_config_file(filename: str = DEFAULT_CONFIG_NAME, explicit_path=None) -> Optional[Path]:
    """
    Locate a configuration file.

    Search order: an explicit path, the current working directory, then the
    configs shipped with the package.
    """
    if explicit_path:
        path = Path(explicit_path)
        if path.exists():
            logger.debug(f"Found config at explicit path: {path}")
            return path
        raise ConfigError(f"config file not found: {path}")
    cwd_path = Path.cwd() / filename
    if cwd_path.exists():
        logger.debug(f"Found {filename} in current working directory: {cwd_path}")
        return cwd_path
    shipped = CONFIG_DIR / filename
    if shipped.exists():
        logger.debug(f"Using shipped config {shipped}")
        return shipped
    logger.warning(f"Could not find {filename}")
    return None


def shipped_configs() -> List[Path]:
    return sorted(CONFIG_DIR.glob("*.yml"))


def _basis(block: Dict, wavelength: float, n_medium: float, waist: float = None) -> ModeBasis:
    family = ModeFamily.from_str(block["family"])
    waist = block["waist"] if waist is None else waist
    if family == ModeFamily.LG:
        return ModeBasis.lg(
            block["max_order"], waist, wavelength, n_medium,
            max_p=block["max_radial"], l_values=block.get("l_values"),
        )
    return ModeBasis.hg(block["max_order"], waist, wavelength, n_medium, max_m=block["max_radial"])


@dataclass
class RunConfig:
    """Validated run configuration with SI values and defaults applied."""

    data: Dict
    source: Optional[Path] = None
    grid: GridSpec = field(init=False)
    interaction: InteractionParams = field(init=False)
    optimizer: OptConfig = field(init=False)
    target: Optional[TargetSpec] = field(init=False)

    def __post_init__(self):
        """Build the typed parameter objects; bad values become SchemaError."""
        try:
            g = self.data["grid"]
            self.grid = GridSpec(
                g["nx"], g["ny"], g["dx"], g["dy"] if g["dy"] is not None else g["dx"],
                g["nz"], g["dz"],
            )
            i = self.data["interaction"]
            self.interaction = InteractionParams(
                lambda_p=i["lambda_p"], lambda_s=i["lambda_s"], lambda_i=i["lambda_i"],
                n_p=i["n_p"], n_s=i["n_s"], n_i=i["n_i"], kappa=i["kappa"],
                poling_period=i["poling_period"], delta_k=i["delta_k"],
            )
            o = self.data["optimizer"]
            self.optimizer = OptConfig(
                lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                iterations=o["iterations"], batch_size=o["batch_size"], seed=self.seed,
                weights=LossWeights(o["loss_weights"]["l1"], o["loss_weights"]["fidelity"]),
                train_pump=self.data["pump"]["trainable"],
                train_crystal=self.data["crystal"]["trainable"],
                checkpoint_every=o["checkpoint_every"], fixed_noise=o["fixed_noise"],
                log_every=self.data["output"]["log_every"], eval_batch_size=o["eval_batch_size"],
            )
            t = self.data["target"]
            self.target = None if t is None else TargetSpec(t["kind"], t["d"], t["l"], t["matrix"])
            n_seg = self.data["crystal"]["n_seg"]
            if n_seg < 1:
                raise ValueError(f"crystal.n_seg must be at least 1, got {n_seg}")
            if self.grid.nz % n_seg:
                raise ShapeMismatch(f"crystal.n_seg = {n_seg} does not divide grid.nz = {self.grid.nz}")
            sim = self.data["simulation"]
            if sim["batch_size"] < 2 or sim["chunk_size"] < 1 or not sim["sigma0_sq"] > 0:
                raise ValueError("simulation needs batch_size >= 2, chunk_size >= 1, sigma0_sq > 0")
        except QholoError:
            raise
        except ValueError as e:
            raise SchemaError(str(e))

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def config_hash(self) -> str:
        return config_hash(self.data)

    @property
    def pump_power(self) -> float:
        return self.data["interaction"]["pump_power"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output"]["directory"])

    @property
    def formats(self) -> List[str]:
        return list(self.data["output"]["formats"])

    @property
    def simulation(self) -> Dict:
        return self.data["simulation"]

    def pump_basis(self) -> ModeBasis:
        i = self.interaction
        return _basis(self.data["pump"], i.lambda_p, i.n_p)

    def crystal_basis(self) -> ModeBasis:
        i = self.interaction
        return _basis(self.data["crystal"], i.lambda_p, i.n_p)

    def signal_basis(self) -> ModeBasis:
        i = self.interaction
        return _basis(self.data["detection"], i.lambda_s, i.n_s)

    def idler_basis(self) -> ModeBasis:
        i = self.interaction
        d = self.data["detection"]
        return _basis(d, i.lambda_i, i.n_i, waist=d["waist_idler"] or d["waist"])

    def build_pump(self) -> PumpParams:
        basis = self.pump_basis()
        init = self.data["pump"]["init"]
        trainable = self.data["pump"]["trainable"]
        if init is None:
            return initial_pump(basis, self.pump_power, trainable)
        coeffs = np.zeros(basis.size, dtype=np.complex128)
        for label, (re_part, im_part) in init.items():
            coeffs[basis.index(label)] = complex(re_part, im_part)
        return PumpParams(basis, coeffs, self.pump_power, trainable)

    def build_hologram(self) -> HologramParams:
        c = self.data["crystal"]
        return initial_hologram(
            self.crystal_basis(), c["n_seg"], self.seed, c["init"], c["trainable"], c["init_std"]
        )

    def build_target(self) -> Optional[CorrelationMatrix]:
        if self.target is None:
            return None
        return make_target(self.target, self.signal_basis(), self.idler_basis())

    def build_objective(self, threads: int = 1) -> SPDCObjective:
        sim = self.simulation
        return SPDCObjective(
            self.grid, self.interaction, self.pump_basis(), self.pump_power, self.crystal_basis(),
            self.data["crystal"]["n_seg"], self.signal_basis(), self.idler_basis(),
            target=self.build_target(), weights=self.optimizer.weights,
            sigma0_sq=sim["sigma0_sq"], estimator=Estimator.from_str(sim["estimator"]),
            debias=sim["debias"], chunk_size=sim["chunk_size"], threads=threads,
        )

    def to_dict(self) -> Dict:
        return self.data


def parse_config(path, overrides: Dict = None) -> RunConfig:
    """
    Load and validate a run configuration.

    `overrides` replaces top-level scalars (seed) or block entries given as
    dotted keys, e.g. {"output.directory": "run1"}, before validation.
    """
    path = Path(path)
    data = load_yaml(path)
    if data is None:
        raise SchemaError(f"config file {path} is empty")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, LineMap())
        node[parts[-1]] = value
    schema = load_schema()
    validated = validate(data, schema["fields"])
    if validated["version"] != schema["version"]:
        raise SchemaError(
            f"config version {validated['version']} is not supported (schema {schema['version']})",
            "version",
        )
    if not 0 <= validated["seed"] < 2 ** 64:
        raise SchemaError("seed must be an unsigned 64-bit integer", "seed")
    config = RunConfig(validated, path)
    logger.info(f"Loaded config {path} (hash {config.config_hash[:12]})")
    return config


@dataclass
class PreflightReport:
    checks: List[Dict] = field(default_factory=list)

    def add(self, name: str, value: float, limit: float, passed: bool):
        self.checks.append(
            {"check": name, "value": float(value), "limit": float(limit), "passed": bool(passed)}
        )

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def failures(self) -> List[Dict]:
        return [c for c in self.checks if not c["passed"]]


def preflight(config: RunConfig, raise_on_failure: bool = True) -> PreflightReport:
    """
    Check the discretization before any numerics: window of at least eight
    waists for the pump and detection bases, mode containment at both crystal
    faces, near-orthonormal detection and pump bases, and a nonzero pump.
    """
    report = PreflightReport()
    grid = config.grid
    window = min(grid.window)
    bases = {
        "pump": config.pump_basis(),
        "signal": config.signal_basis(),
        "idler": config.idler_basis(),
    }
    for name, basis in bases.items():
        limit = WINDOW_WAISTS * basis.waist
        report.add(f"{name} window", window, limit, window >= limit)
    if raise_on_failure and not report.passed:
        failure = report.failures()[0]
        raise WindowTooSmall(
            f"{failure['check']}: grid window {failure['value']:.4g} m is smaller than "
            f"{WINDOW_WAISTS:g} waists ({failure['limit']:.4g} m)"
        )
    for name, basis in bases.items():
        for z in (0.0, grid.length):
            basis.evaluate(z, grid)
    tolerance = config.data["detection"]["gram_tolerance"]
    for name, basis in bases.items():
        for z in (0.0, grid.length):
            deviation = gram_deviation(basis, grid, z)
            report.add(f"{name} gram at z={z:.4g}", deviation, tolerance, deviation < tolerance)
    if raise_on_failure and not report.passed:
        failure = report.failures()[0]
        raise PreflightError(
            f"{failure['check']}: basis is not orthonormal on this grid, "
            f"max |G - I| = {failure['value']:.3e} exceeds {failure['limit']:.1e}"
        )
    pump = config.build_pump()
    if not np.any(pump.coeffs):
        raise AllZeroPump("pump coefficients are all zero")
    for check in report.checks:
        logger.info(
            f"Preflight {check['check']}: {check['value']:.4g} "
            f"({'ok' if check['passed'] else 'FAILED'}, limit {check['limit']:.4g})"
        )
    return report


def resolve_config(explicit_path=None, overrides: Dict = None) -> RunConfig:
    """Find and parse the run configuration the way the CLI does."""
    path = find_config_file(DEFAULT_CONFIG_NAME, explicit_path)
    if path is None:
        raise ConfigError(f"no configuration given and {DEFAULT_CONFIG_NAME} not found")
    return parse_config(path, overrides)

