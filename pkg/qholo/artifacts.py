"""
Run artifacts: the atomic output directory with its manifest, and the CSV,
JSON, raw volume and PNG writers every command uses.
"""

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from matplotlib import image as mpimg

from . import __version__
from .correlations import CorrelationMatrix, MomentSet
from .errors import ArtifactIOError, MetadataMismatch
from .grid import GridSpec
from .modes import CoeffVector, ModeBasis

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FAILED_DIR = "failed"
CELL_PIXELS = 32


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunOutput:
    """
    Exclusive, atomic output directory for one run.

    Files are written under `<out>.partial`; on success the manifest is written
    last and the directory is renamed to `<out>`. `<out>.lock` is created
    exclusively for the duration of the run. On failure the partial directory
    is removed, or moved under `<parent>/failed/` when `quarantine` is set.
    """

    def __init__(self, out_dir, command: str, config=None, threads: int = 1,
                 quarantine: bool = False, extra: Dict = None):
        self.out_dir = Path(out_dir)
        self.command = command
        self.config = config
        self.threads = threads
        self.quarantine = quarantine
        self.extra = dict(extra or {})
        self.partial = self.out_dir.with_name(self.out_dir.name + ".partial")
        self.lock = self.out_dir.with_name(self.out_dir.name + ".lock")
        self.timings: Dict[str, float] = {}
        self._start = None

    def __enter__(self) -> "RunOutput":
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArtifactIOError(f"output directory {self.out_dir} is locked by another run ({self.lock})")
        except OSError as e:
            raise ArtifactIOError(f"cannot create lock {self.lock}: {e}")
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        try:
            if self.out_dir.exists():
                raise ArtifactIOError(f"output directory {self.out_dir} already exists")
            if self.partial.exists():
                logger.warning(f"Removing stale partial output {self.partial}")
                shutil.rmtree(self.partial)
            self.partial.mkdir(parents=True)
        except ArtifactIOError:
            self.lock.unlink()
            raise
        except OSError as e:
            self.lock.unlink()
            raise ArtifactIOError(f"cannot create output directory {self.partial}: {e}")
        self._start = time.perf_counter()
        return self

    def path(self, name: str) -> Path:
        """Location of an artifact inside the run; parent directories are created."""
        target = self.partial / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    @contextmanager
    def timer(self, label: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[label] = time.perf_counter() - start

    def inventory(self) -> List[Dict]:
        entries = []
        for file in sorted(p for p in self.partial.rglob("*") if p.is_file()):
            rel = file.relative_to(self.partial).as_posix()
            if rel == MANIFEST_NAME:
                continue
            entries.append({"path": rel, "sha256": sha256_file(file), "bytes": file.stat().st_size})
        return entries

    def manifest(self) -> Dict:
        self.timings["total"] = time.perf_counter() - self._start
        manifest = {
            "command": self.command,
            "code_version": __version__,
            "created": datetime.now(timezone.utc).isoformat(),
            "threads": self.threads,
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "artifacts": self.inventory(),
        }
        if self.config is not None:
            manifest["config"] = self.config.to_dict()
            manifest["config_hash"] = self.config.config_hash
            manifest["seed"] = self.config.seed
        manifest.update(self.extra)
        return manifest

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                write_json(self.partial / MANIFEST_NAME, self.manifest())
                os.replace(self.partial, self.out_dir)
                logger.info(f"Artifacts written to {self.out_dir}")
            elif self.quarantine:
                failed = self.out_dir.parent / FAILED_DIR
                failed.mkdir(exist_ok=True)
                stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
                target = failed / f"{self.out_dir.name}-{stamp}"
                shutil.move(str(self.partial), str(target))
                logger.error(f"Run failed; partial artifacts moved to {target}")
            else:
                shutil.rmtree(self.partial, ignore_errors=True)
        except OSError as e:
            if exc_type is None:
                raise ArtifactIOError(f"cannot finalize {self.out_dir}: {e}")
            logger.error(f"Cleanup of {self.partial} failed: {e}")
        finally:
            if self.lock.exists():
                self.lock.unlink()
        return False


def write_json(path, data) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    return path


def write_csv(path, rows: Iterable[Dict], fieldnames: List[str]) -> Path:
    """
    Write rows with csv.DictWriter.

    Args:
        path: Destination file
        rows: Dictionaries keyed by fieldnames
        fieldnames: Column order

    Returns:
        Path: The written file
    """
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    return path


def read_csv(path) -> List[Dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}")


def write_matrix_csv(path, P: CorrelationMatrix) -> Path:
    """P with one row per signal mode and one column per idler mode."""
    return write_csv(path, P.rows(), ["signal"] + list(P.labels_i))


def write_coefficients_csv(path, basis: ModeBasis, coeffs: np.ndarray) -> Path:
    """Mode label, Re, Im per coefficient; a 2-D array gets a leading segment column."""
    coeffs = np.asarray(coeffs)
    if coeffs.ndim == 1:
        return write_csv(path, CoeffVector(basis, coeffs).as_rows(), ["mode", "re", "im"])
    rows = [
        {"segment": s, **row}
        for s, segment in enumerate(coeffs)
        for row in CoeffVector(basis, segment).as_rows()
    ]
    return write_csv(path, rows, ["segment", "mode", "re", "im"])


def read_coefficients_csv(path, basis: ModeBasis) -> np.ndarray:
    rows = read_csv(path)
    segmented = rows and "segment" in rows[0]
    if segmented:
        n_seg = max(int(r["segment"]) for r in rows) + 1
        coeffs = np.zeros((n_seg, basis.size), dtype=np.complex128)
        for r in rows:
            coeffs[int(r["segment"]), basis.index(r["mode"])] = complex(float(r["re"]), float(r["im"]))
        return coeffs
    coeffs = np.zeros(basis.size, dtype=np.complex128)
    for r in rows:
        coeffs[basis.index(r["mode"])] = complex(float(r["re"]), float(r["im"]))
    return coeffs


def write_loss_csv(path, history: List[float]) -> Path:
    return write_csv(path, [{"step": i, "loss": v} for i, v in enumerate(history)], ["step", "loss"])


def moments_summary(moments: MomentSet, labels_s: List[str], labels_i: List[str]) -> Dict:
    return {
        "batch_size": moments.batch_size,
        "sigma0_sq": moments.sigma0_sq,
        "N_s": dict(zip(labels_s, (float(v) for v in moments.N_s))),
        "N_i": dict(zip(labels_i, (float(v) for v in moments.N_i))),
        "phi_abs2": [[float(v) for v in row] for row in np.abs(moments.phi) ** 2],
        "exchange_max_abs": float(np.max(np.abs(moments.exchange))) if moments.exchange is not None else None,
    }


def volume_metadata(values: np.ndarray, grid: GridSpec, dtype: str, dz: float = None,
                    extra: Dict = None) -> Dict:
    nx, ny, nz = values.shape
    meta = {
        "dims": {"nx": nx, "ny": ny, "nz": nz},
        "pitch": {"dx": grid.dx, "dy": grid.dy, "dz": grid.dz if dz is None else dz},
        "units": "m",
        "dtype": dtype,
        "byte_order": "little",
        "order": "x fastest, then y, then z",
    }
    if extra:
        meta.update(extra)
    return meta


def write_volume(path, values: np.ndarray, metadata: Dict) -> Tuple[Path, Path]:
    """
    Write a raw little-endian volume (complex64 or int8, x fastest) and its JSON sidecar.

    Returns:
        tuple: (raw path, sidecar path)
    """
    path = Path(path)
    dtype = {"complex64": "<c8", "int8": "i1"}[metadata["dtype"]]
    data = np.asarray(values).astype(dtype).tobytes(order="F")
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    sidecar = dict(metadata)
    sidecar["sha256"] = hashlib.sha256(data).hexdigest()
    sidecar_path = path.with_suffix(".json")
    write_json(sidecar_path, sidecar)
    return path, sidecar_path


def read_volume(path, grid: GridSpec = None, check_nz: bool = True) -> Tuple[np.ndarray, Dict]:
    """
    Read a raw volume written by `write_volume`.

    With a grid, the dims and transverse pitch must match it; otherwise
    MetadataMismatch is raised.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise ArtifactIOError(f"cannot read volume {path}: {e}")
    except (OSError, ValueError) as e:
        raise ArtifactIOError(f"cannot read volume {path}: {e}")
    if meta.get("byte_order") != "little" or meta.get("dtype") not in ("complex64", "int8"):
        raise MetadataMismatch(f"unsupported volume encoding in {sidecar_path}")
    if "sha256" in meta and hashlib.sha256(data).hexdigest() != meta["sha256"]:
        raise MetadataMismatch(f"checksum of {path} does not match its sidecar")
    dims = meta["dims"]
    shape = (dims["nx"], dims["ny"], dims["nz"])
    dtype = np.dtype("<c8") if meta["dtype"] == "complex64" else np.dtype("i1")
    if len(data) != int(np.prod(shape)) * dtype.itemsize:
        raise MetadataMismatch(f"{path} holds {len(data)} bytes, sidecar describes {shape} {meta['dtype']}")
    if grid is not None:
        expected = (grid.nx, grid.ny, grid.nz if check_nz else dims["nz"])
        if shape != expected:
            raise MetadataMismatch(f"volume dims {shape} do not match the config grid {expected}")
        pitch = meta["pitch"]
        if not (np.isclose(pitch["dx"], grid.dx, rtol=1e-9) and np.isclose(pitch["dy"], grid.dy, rtol=1e-9)):
            raise MetadataMismatch(
                f"volume pitch ({pitch['dx']}, {pitch['dy']}) does not match the config grid "
                f"({grid.dx}, {grid.dy})"
            )
        if check_nz and not np.isclose(pitch["dz"], grid.dz, rtol=1e-9):
            raise MetadataMismatch(f"volume dz {pitch['dz']} does not match the config grid dz {grid.dz}")
    values = np.frombuffer(data, dtype=dtype).reshape(shape, order="F")
    return values.astype(np.complex128 if meta["dtype"] == "complex64" else np.int8), meta


def write_png(path, image: np.ndarray, cmap: str = "gray", quantity: str = "",
              vmin: float = None, vmax: float = None) -> Path:
    """
    Save a real 2-D array as an 8-bit PNG with matplotlib; the color scale
    goes to a JSON sidecar next to the image.
    """
    path = Path(path)
    image = np.asarray(image, dtype=float)
    vmin = float(np.min(image)) if vmin is None else vmin
    vmax = float(np.max(image)) if vmax is None else vmax
    if vmax <= vmin:
        vmax = vmin + 1.0
    try:
        mpimg.imsave(path, image, cmap=cmap, vmin=vmin, vmax=vmax)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    write_json(path.with_suffix(".json"), {"quantity": quantity, "cmap": cmap, "vmin": vmin, "vmax": vmax})
    return path


def write_matrix_png(path, P: CorrelationMatrix) -> Path:
    """Heatmap of P, each cell CELL_PIXELS wide, signal modes along rows."""
    image = np.kron(P.P, np.ones((CELL_PIXELS, CELL_PIXELS)))
    return write_png(path, image, cmap="viridis", quantity="P(signal, idler)", vmin=0.0)


def crystal_images(run: RunOutput, volume: np.ndarray, grid: GridSpec, y_offset: float) -> List[Path]:
    """
    Crystal diagnostics: Re A in the x-z plane at y = 0 and y = y_offset, |A| at
    the input face, and arg A in the x-z plane at y = 0.
    """
    j0 = grid.ny // 2
    j1 = int(np.clip(j0 + round(y_offset / grid.dy), 0, grid.ny - 1))
    paths = []
    for name, j in (("crystal_xz_y0.png", j0), ("crystal_xz_y1.png", j1)):
        paths.append(write_png(
            run.path(name), np.real(volume[:, j, :]), cmap="RdBu", vmin=-1.0, vmax=1.0,
            quantity=f"Re A(x, y = {grid.y[j]:.4g} m, z)",
        ))
    paths.append(write_png(
        run.path("crystal_profile_z0.png"), np.abs(volume[:, :, 0]), vmin=0.0, vmax=1.0,
        quantity="|A(x, y, z = 0)|",
    ))
    paths.append(write_png(
        run.path("crystal_zpattern.png"), np.angle(volume[:, j0, :]), cmap="twilight",
        vmin=-np.pi, vmax=np.pi, quantity="arg A(x, y = 0, z)",
    ))
    return paths


def write_summary(run: RunOutput, name: str, data: Dict) -> Path:
    return write_json(run.path(name), data)


def latest_checkpoint(directory) -> Optional[Path]:
    checkpoints = sorted(Path(directory).glob("step_*.npz"))
    return checkpoints[-1] if checkpoints else None
