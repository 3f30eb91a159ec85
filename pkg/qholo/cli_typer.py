#!/usr/bin/env python3

import csv
import json
import logging
import sys
from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer

from .adjoint import grad_check
from .artifacts import (
    RunOutput,
    crystal_images,
    latest_checkpoint,
    moments_summary,
    read_coefficients_csv,
    read_volume,
    volume_metadata,
    write_coefficients_csv,
    write_csv,
    write_json,
    write_loss_csv,
    write_matrix_csv,
    write_matrix_png,
    write_png,
    write_summary,
    write_volume,
)
from .config import parse_quantity, preflight, resolve_config
from .correlations import CorrelationMatrix
from .errors import ArtifactIOError, ConfigError, MetadataMismatch, NumericalError, QholoError
from .grid import sample_vacuum
from .medium import binarize_volume, build_pump, first_harmonic, hologram_volume
from .optimizer import TrainState, train
from .pipeline import small_instance

app = typer.Typer(help="Simulation and inverse design of spatially structured photon pairs")


class OutputFormat(str, Enum):
    text = "text"
    json = "json"
    csv = "csv"


def setup_logging(log_file=None, verbose=False, console_output=False):
    """Set up logging configuration."""
    if log_file is None:
        log_file = "qholo.log"

    handlers = [logging.FileHandler(log_file, delay=True)]
    if console_output:
        handlers.append(logging.StreamHandler(sys.stdout))

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
    )
    return logging.getLogger(__name__)


def echo_matrix(P: CorrelationMatrix, output_format: OutputFormat):
    """Print P to stdout in the requested format."""
    if output_format == OutputFormat.json:
        typer.echo(json.dumps({"signal": P.labels_s, "idler": P.labels_i,
                               "P": [[float(v) for v in row] for row in P.P]}, indent=2))
    elif output_format == OutputFormat.csv:
        writer = csv.DictWriter(sys.stdout, fieldnames=["signal"] + list(P.labels_i))
        writer.writeheader()
        writer.writerows(P.rows())
    else:
        width = max(len(label) for label in P.labels_i + P.labels_s) + 2
        typer.echo(" " * width + "".join(label.rjust(width) for label in P.labels_i))
        for label, row in zip(P.labels_s, P.P):
            typer.echo(label.ljust(width) + "".join(f"{v:{width}.4f}" for v in row))


def output_dir(out, config) -> Path:
    return Path(out) if out else config.output_dir


@app.command("simulate")
def simulate(
    config_file: Optional[str] = typer.Option(None, "--config", help="Path to run configuration (default: linbo3_default.yml)"),
    seed: Optional[int] = typer.Option(None, help="Override the configured seed"),
    threads: int = typer.Option(1, help="Worker threads for the Monte Carlo batch"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (default: output.directory of the config)"),
    format: OutputFormat = typer.Option(OutputFormat.text, help="Format for printing P (text, json, csv)"),
    pump_coefficients: Optional[str] = typer.Option(None, "--pump-coefficients", help="pump_coefficients.csv to use instead of the configured pump"),
    hologram_coefficients: Optional[str] = typer.Option(None, "--hologram-coefficients", help="hologram_coefficients.csv written by optimize or export"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output for debugging"),
    log_file: Optional[str] = typer.Option(None, help="Path to log file (default: qholo.log)"),
):
    """Estimate the correlation matrix P at fixed pump and crystal."""
    logger = setup_logging(log_file, verbose)
    config = resolve_config(config_file, {"seed": seed})
    report = preflight(config)
    objective = config.build_objective(threads)
    pump = config.build_pump()
    hologram = config.build_hologram()
    loaded = {}
    if pump_coefficients:
        pump = pump.with_coeffs(read_coefficients_csv(pump_coefficients, pump.basis))
        loaded["pump_coefficients"] = str(pump_coefficients)
    if hologram_coefficients:
        hologram = hologram.with_coeffs(read_coefficients_csv(hologram_coefficients, hologram.basis))
        loaded["hologram_coefficients"] = str(hologram_coefficients)
    if loaded:
        logger.info(f"Simulating coefficients from {', '.join(loaded.values())}")
    sim = config.simulation

    with RunOutput(output_dir(out, config), "simulate", config, threads, extra=loaded) as run:
        vacuum = sample_vacuum(config.seed, sim["batch_size"], config.grid, sim["sigma0_sq"], threads=threads)
        with run.timer("forward"):
            result = objective.evaluate(pump, hologram, vacuum)
        P = result.P
        formats = config.formats
        if "csv" in formats:
            write_matrix_csv(run.path("P.csv"), P)
            write_coefficients_csv(run.path("pump_coefficients.csv"), pump.basis, pump.coeffs)
        if "json" in formats:
            summary = moments_summary(result.moments, P.labels_s, P.labels_i)
            summary.update({
                "estimator": sim["estimator"],
                "floored_mass": P.floored_mass,
                "loss": result.loss,
                "fidelity": result.fidelity,
                "preflight": report.checks,
            })
            write_json(run.path("moments.json"), summary)
        if "png" in formats:
            write_matrix_png(run.path("P.png"), P)
        logger.info(f"Simulated {sim['batch_size']} samples on {threads} thread(s)")

    echo_matrix(P, format)
    if result.fidelity is not None:
        typer.echo(f"Fidelity to target: {result.fidelity:.4f}")
    return 0


@app.command("optimize")
def optimize(
    config_file: Optional[str] = typer.Option(None, "--config", help="Path to run configuration (default: linbo3_default.yml)"),
    seed: Optional[int] = typer.Option(None, help="Override the configured seed"),
    threads: int = typer.Option(1, help="Worker threads for the Monte Carlo batch"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (default: output.directory of the config)"),
    resume: Optional[str] = typer.Option(None, "--resume", help="Checkpoint to continue from, or a checkpoints directory to take the latest step from"),
    format: OutputFormat = typer.Option(OutputFormat.text, help="Format for printing the learned P (text, json, csv)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output for debugging"),
    log_file: Optional[str] = typer.Option(None, help="Path to log file (default: qholo.log)"),
):
    """Learn the pump and crystal hologram that produce the target correlations."""
    logger = setup_logging(log_file, verbose)
    config = resolve_config(config_file, {"seed": seed})
    if config.target is None:
        raise ConfigError("optimize needs a target block in the configuration")
    preflight(config)
    objective = config.build_objective(threads)
    pump = config.build_pump()
    hologram = config.build_hologram()
    if resume and Path(resume).is_dir():
        latest = latest_checkpoint(resume)
        if latest is None:
            raise ArtifactIOError(f"no step checkpoint found in {resume}")
        resume = str(latest)
    state = TrainState.load(resume) if resume else None
    if state is not None:
        logger.info(f"Resuming from {resume} at step {state.step}")

    with RunOutput(output_dir(out, config), "optimize", config, threads, quarantine=True,
                   extra={"resumed_from": resume}) as run:
        with run.timer("train"):
            result = train(
                objective, pump, hologram, config.optimizer, state=state,
                checkpoint_dir=run.partial / "checkpoints", config_hash=config.config_hash,
            )
        result.state.save(run.path("checkpoints/final.npz"))
        grid = config.grid
        formats = config.formats
        if "csv" in formats:
            write_loss_csv(run.path("loss.csv"), result.loss_history)
            write_matrix_csv(run.path("P.csv"), result.P)
            write_matrix_csv(run.path("target.csv"), objective.target)
            write_coefficients_csv(run.path("pump_coefficients.csv"), result.pump.basis, result.pump.coeffs)
            write_coefficients_csv(
                run.path("hologram_coefficients.csv"), result.hologram.basis, result.hologram.raw_coeffs
            )
        volume = hologram_volume(result.hologram, grid)
        if "raw" in formats:
            write_volume(
                run.path("hologram.raw"), volume,
                volume_metadata(volume, grid, "complex64", extra={"quantity": "hologram A(x, y, z)"}),
            )
        if "json" in formats:
            write_summary(run, "summary.json", {
                "steps": result.state.step,
                "final_train_loss": result.loss_history[-1] if result.loss_history else None,
                "eval_loss": result.evaluation.loss,
                "fidelity": result.evaluation.fidelity,
                "eval_batch_size": result.evaluation.batch_size,
                "floored_mass": result.P.floored_mass,
                "target": config.target.to_dict(),
            })
        if "png" in formats:
            write_matrix_png(run.path("P.png"), result.P)
            crystal_images(run, volume, grid, config.pump_basis().waist)
            pump_field = np.abs(build_pump(result.pump, 0.0, grid).values)
            write_png(run.path("pump_magnitude.png"), pump_field, vmin=0.0, quantity="|E_p(x, y, z = 0)| (a.u.)")

    echo_matrix(result.P, format)
    typer.echo(f"Fidelity to target: {result.evaluation.fidelity:.4f} after {result.state.step} steps")
    return 0


@app.command("binarize")
def binarize(
    hologram: str = typer.Option(..., "--hologram", help="Hologram volume written by optimize or export (hologram.raw)"),
    config_file: Optional[str] = typer.Option(None, "--config", help="Path to run configuration (default: linbo3_default.yml)"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (default: output.directory of the config)"),
    subsamples: Optional[int] = typer.Option(None, help="Sub-samples per poling period (default: crystal.subsamples_per_period)"),
    resolution: Optional[str] = typer.Option(None, help="Fabrication pitch along z with unit, e.g. 0.1um"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output for debugging"),
    log_file: Optional[str] = typer.Option(None, help="Path to log file (default: qholo.log)"),
):
    """Convert a continuous hologram into a binary poling pattern."""
    logger = setup_logging(log_file, verbose)
    config = resolve_config(config_file)
    crystal = config.data["crystal"]
    subsamples = subsamples or crystal["subsamples_per_period"]
    pitch = parse_quantity(resolution, "length", "resolution") if resolution else crystal["poling_resolution"]

    volume, meta = read_volume(hologram, config.grid)
    if meta["dtype"] != "complex64":
        raise MetadataMismatch(f"{hologram} holds {meta['dtype']} data, expected a complex64 hologram")
    poling = binarize_volume(volume, config.interaction, config.grid, subsamples, pitch)

    expected = (2 / np.pi) * np.minimum(np.abs(volume), 1.0) * np.exp(1j * np.angle(volume))
    error = np.abs(first_harmonic(poling) - expected) / (2 / np.pi)
    rows = [
        {"slice": j, "max_error": float(error[:, :, j].max()), "rms_error": float(np.sqrt(np.mean(error[:, :, j] ** 2)))}
        for j in range(config.grid.nz)
    ]
    max_error = max(row["max_error"] for row in rows)

    with RunOutput(output_dir(out, config), "binarize", config, extra={"hologram": str(hologram)}) as run:
        write_volume(run.path("poling.raw"), poling.signs, poling.metadata())
        write_csv(run.path("first_harmonic_error.csv"), rows, ["slice", "max_error", "rms_error"])
        logger.info(f"First-harmonic error of the poling pattern: max {max_error:.3e} of full scale")

    typer.echo(f"Poling pattern: {poling.nz_sub} sub-samples along z, dz_sub = {poling.dz_sub:.4g} m")
    typer.echo(f"Max first-harmonic error: {max_error:.3e} (relative to 2/pi)")
    return 0


@app.command("gradcheck")
def gradcheck(
    config_file: Optional[str] = typer.Option(None, "--config", help="Run configuration (default: built-in small instance)"),
    seed: Optional[int] = typer.Option(None, help="Seed of the frozen vacuum batch"),
    threads: int = typer.Option(1, help="Worker threads for the Monte Carlo batch"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (default: gradcheck)"),
    batch_size: int = typer.Option(2, help="Vacuum batch size when a configuration is given"),
    fd_step: float = typer.Option(1e-6, help="Central finite-difference step"),
    tolerance: float = typer.Option(1e-5, help="Maximum allowed relative error"),
    compare_step: Optional[List[float]] = typer.Option(None, "--compare-step", help="Extra finite-difference steps to report"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output for debugging"),
    log_file: Optional[str] = typer.Option(None, help="Path to log file (default: qholo.log)"),
):
    """Compare adjoint gradients against central finite differences."""
    logger = setup_logging(log_file, verbose)
    config = None
    if config_file:
        config = resolve_config(config_file, {"seed": seed})
        if config.target is None:
            raise ConfigError("gradcheck needs a target block in the configuration")
        preflight(config)
        objective = config.build_objective(threads)
        pump = config.build_pump()
        hologram = config.build_hologram()
        vacuum = sample_vacuum(config.seed, batch_size, config.grid, objective.sigma0_sq).materialize()
        loss_fn = objective.loss_fn(vacuum)
    else:
        instance = small_instance(seed or 0)
        pump, hologram = instance.pump, instance.hologram
        loss_fn = instance.loss_fn()
        logger.info("Gradient check on the built-in small instance")

    report = grad_check(loss_fn, pump, hologram, fd_step, tolerance, compare_steps=compare_step or ())
    target = Path(out) if out else (config.output_dir if config else Path("gradcheck"))
    with RunOutput(target, "gradcheck", config, threads, extra={"status": report.status}) as run:
        with open(run.path("gradcheck.txt"), "w", encoding="utf-8") as f:
            f.write(report.to_text())
        write_csv(
            run.path("gradcheck.csv"), [row.to_dict() for row in report.rows],
            ["group", "index", "component", "analytic", "numeric", "rel_error"],
        )

    typer.echo(report.to_text().rstrip())
    if not report.passed:
        raise typer.Exit(code=NumericalError.exit_code)
    return 0


@app.command("export")
def export(
    checkpoint: str = typer.Option(..., "--checkpoint", help="Checkpoint written by optimize"),
    config_file: Optional[str] = typer.Option(None, "--config", help="Configuration the checkpoint was trained with"),
    seed: Optional[int] = typer.Option(None, help="Seed override used during training"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (default: output.directory of the config)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output for debugging"),
    log_file: Optional[str] = typer.Option(None, help="Path to log file (default: qholo.log)"),
):
    """Write pump and hologram coefficients and the hologram volume from a checkpoint."""
    logger = setup_logging(log_file, verbose)
    config = resolve_config(config_file, {"seed": seed})
    state = TrainState.load(checkpoint)
    if state.config_hash and state.config_hash != config.config_hash:
        raise ConfigError(
            f"checkpoint was written for config {state.config_hash[:12]}, "
            f"this config is {config.config_hash[:12]}"
        )
    pump = config.build_pump().with_coeffs(state.theta)
    hologram = config.build_hologram().with_coeffs(state.phi)
    volume = hologram_volume(hologram, config.grid)

    with RunOutput(output_dir(out, config), "export", config, extra={"checkpoint": str(checkpoint)}) as run:
        write_coefficients_csv(run.path("pump_coefficients.csv"), pump.basis, pump.coeffs)
        write_coefficients_csv(run.path("hologram_coefficients.csv"), hologram.basis, hologram.raw_coeffs)
        write_loss_csv(run.path("loss.csv"), state.loss_history)
        write_volume(
            run.path("hologram.raw"), volume,
            volume_metadata(volume, config.grid, "complex64", extra={"quantity": "hologram A(x, y, z)"}),
        )
        logger.info(f"Exported checkpoint {checkpoint} (step {state.step})")

    typer.echo(f"Exported step {state.step} of {checkpoint}")
    return 0


def main():
    """Main entry point for the CLI."""
    try:
        return app()
    except QholoError as e:
        sys.stderr.write(f"Error: {str(e)}\n")
        logger = logging.getLogger("qholo")
        logger.error(f"Error executing command: {str(e)}")
        import traceback
        logger.error(traceback.format_exc())
        return e.exit_code
    except Exception as e:
        sys.stderr.write(f"Error: {str(e)}\n")
        logger = logging.getLogger("qholo")
        logger.error(f"Error executing command: {str(e)}")
        import traceback
        logger.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
