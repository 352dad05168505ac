"""Command-line interface: simulate datasets, fit volumes, run benchmarks.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a
benchmark aborts partway (partial results are persisted).
"""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np

from . import __version__
from .benchmark import BenchmarkConfig, BenchmarkSession, assemble_report
from .dataio import (
    build_manifest,
    read_json,
    read_matrix,
    read_matrix_csv,
    sha256_file,
    write_json,
    write_matrix,
    write_matrix_csv,
    write_table_csv,
)
from .design import (
    build_design,
    build_drift,
    concat_runs,
    read_events_csv,
    write_events_csv,
)
from .estimators import fit_volume, make_two_gamma_model
from .hrf import make_basis
from .solver import SolverConfig
from .synth import SynthConfig, generate_multirun_dataset

BASIS_CHOICES = ("fixed", "3hrf", "fir")
METHOD_CHOICES = ("glm", "glms", "r1glm", "r1glms", "r1param")


def _fail_config(message: str) -> None:
    raise click.UsageError(message)


def _load_json_config(path: str) -> dict:
    try:
        with open(path) as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        _fail_config(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})")
    except OSError as exc:
        _fail_config(f"cannot read config {path}: {exc}")


def _require(config: dict, key: str, kind, positive=False):
    if key not in config:
        _fail_config(f"config key '{key}' is required")
    value = config[key]
    if not isinstance(value, kind):
        kinds = kind if isinstance(kind, tuple) else (kind,)
        names = "/".join(k.__name__ for k in kinds)
        _fail_config(f"config key '{key}': expected {names}")
    if positive and value <= 0:
        _fail_config(f"config key '{key}': must be positive")
    return value


@click.group()
@click.version_option(version=__version__, prog_name="r1glm")
def main():
    """Joint estimation of response shapes and activation amplitudes."""


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Output directory.")
@click.option("--csv", "as_csv", is_flag=True,
              help="Write the data matrix as plain CSV instead of binary.")
def simulate(config_file, out, as_csv):
    """Generate a synthetic dataset from a JSON configuration."""
    raw = _load_json_config(config_file)
    n_scans = _require(raw, "n_scans", int, positive=True)
    tr = _require(raw, "tr", (int, float), positive=True)
    n_conditions = _require(raw, "n_conditions", int, positive=True)
    n_voxels = _require(raw, "voxels", int, positive=True)
    seed = _require(raw, "seed", int)
    n_runs = int(raw.get("runs", 1))
    if n_runs < 1:
        _fail_config("config key 'runs': must be positive")

    try:
        config = SynthConfig(
            n_scans=n_scans,
            tr=float(tr),
            n_conditions=n_conditions,
            events_per_condition=int(raw.get("events_per_condition", 4)),
            fir_length=int(raw.get("fir_length", 20)),
            noise_sigma=float(raw.get("noise_sigma", 0.0)),
            drift_amplitude=float(raw.get("drift_amplitude", 0.0)),
            drift_order=int(raw.get("drift_order", 3)),
            constant_beta=bool(raw.get("constant_beta", False)),
            peak_interval=tuple(raw.get("peak_interval", [5.0, 5.0])),
            seed=seed,
        )
        started = time.perf_counter()
        Y, truths, events = generate_multirun_dataset(config, n_voxels, n_runs)
    except ValueError as exc:
        _fail_config(str(exc))

    os.makedirs(out, exist_ok=True)
    matrix_name = "bold.csv" if as_csv else "bold.bin"
    matrix_path = os.path.join(out, matrix_name)
    if as_csv:
        write_matrix_csv(matrix_path, Y)
    else:
        write_matrix(matrix_path, Y)
    events_path = os.path.join(out, "events.csv")
    write_events_csv(events, events_path)
    truth_path = os.path.join(out, "truth.json")
    write_json(truth_path, {
        "betas": [[float(b) for b in t.beta] for t in truths],
        "shapes": [[float(s) for s in t.hrf.samples] for t in truths],
        "hrf_dt": truths[0].hrf.dt,
        "n_runs": n_runs,
    })
    elapsed = time.perf_counter() - started
    outputs = {
        matrix_name: sha256_file(matrix_path),
        "events.csv": sha256_file(events_path),
        "truth.json": sha256_file(truth_path),
    }
    manifest = build_manifest(raw, seed, __version__, outputs,
                              timings={"simulate": elapsed})
    write_json(os.path.join(out, "manifest.json"), manifest)
    click.echo(f"wrote {len(outputs) + 1} files to {out}")


@main.command()
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--method", type=click.Choice(METHOD_CHOICES), required=True)
@click.option("--basis", type=click.Choice(BASIS_CHOICES), default="3hrf",
              show_default=True)
@click.option("--fir-length", type=int, default=20, show_default=True,
              help="Stick basis length (fir basis and r1param).")
@click.option("--qr/--no-qr", "use_qr", default=True, show_default=True,
              help="Reduce each solve through an orthogonal factorization.")
@click.option("--jobs", type=int, default=1, envvar="R1GLM_JOBS",
              show_default=True, help="Voxel-parallel worker count.")
@click.option("--drift-order", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (defaults to the dataset directory).")
def fit(dataset, method, basis, fir_length, use_qr, jobs, drift_order, out):
    """Fit one method to a simulated dataset."""
    if method in ("r1glm", "r1glms") and basis == "fixed":
        _fail_config(
            "the rank-1 model with a fixed shape has no shape freedom and "
            "reproduces the plain GLM; use '--method glm --basis fixed'"
        )
    if method == "r1param" and basis != "fir":
        _fail_config("r1param optimizes over a stick design; use --basis fir")

    manifest_path = os.path.join(dataset, "manifest.json")
    if not os.path.exists(manifest_path):
        _fail_config(f"dataset manifest not found: {manifest_path}")
    manifest = read_json(manifest_path)
    tr = float(manifest["config"].get("tr", 1.0))

    bold_path = os.path.join(dataset, "bold.bin")
    if os.path.exists(bold_path):
        Y = read_matrix(bold_path)
    else:
        csv_path = os.path.join(dataset, "bold.csv")
        if not os.path.exists(csv_path):
            _fail_config(f"no bold.bin or bold.csv in {dataset}")
        Y = read_matrix_csv(csv_path)
    events = read_events_csv(os.path.join(dataset, "events.csv"))

    if basis == "fir":
        basis_set = make_basis("fir", tr, fir_size=fir_length)
    else:
        basis_set = make_basis(basis, tr / 16)

    run_ids = ([0] if events.runs is None
               else sorted(int(r) for r in np.unique(events.runs)))
    n_total = Y.shape[0]
    if n_total % len(run_ids):
        _fail_config("scan count is not a multiple of the run count")
    n_per_run = n_total // len(run_ids)
    try:
        if len(run_ids) == 1:
            table = events
            design = build_design(table, basis_set, tr, n_per_run)
            nuisance = build_drift(n_per_run, drift_order)
        else:
            designs, drifts = [], []
            for run in run_ids:
                table = events.subset_run(run)
                designs.append(build_design(table, basis_set, tr, n_per_run))
                drifts.append(build_drift(n_per_run, drift_order))
            design, nuisance = concat_runs(designs, drifts)
    except ValueError as exc:
        _fail_config(f"cannot build the design from {dataset}: {exc}")

    hrf_model = (make_two_gamma_model(fir_length, tr)
                 if method == "r1param" else None)
    started = time.perf_counter()
    result = fit_volume(Y, design, nuisance, basis_set, method,
                        config=SolverConfig(), jobs=jobs, use_qr=use_qr,
                        hrf_model=hrf_model)
    elapsed = time.perf_counter() - started

    out = out or dataset
    os.makedirs(out, exist_ok=True)
    write_matrix_csv(os.path.join(out, "betas.csv"), result.betas)
    write_matrix_csv(os.path.join(out, "hrfs.csv"), result.hrfs)
    n_converged = sum(1 for d in result.diagnostics if d["converged"])
    write_json(os.path.join(out, "diagnostics.json"), {
        "method": method,
        "basis": basis,
        "use_qr": use_qr,
        "jobs": jobs,
        "drift_order": drift_order,
        "hrf_dt": result.hrf_dt,
        "n_voxels": result.n_voxels,
        "n_converged": n_converged,
        "wall_time_seconds": elapsed,
        "per_voxel": result.diagnostics,
    })
    click.echo(f"fit {result.n_voxels} voxels with {method}-{basis} "
               f"({n_converged} converged) in {elapsed:.2f}s")


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Output directory.")
@click.option("--jobs", type=int, default=None, envvar="R1GLM_JOBS",
              help="Override the configured voxel-parallel worker count.")
def benchmark(config_file, out, jobs):
    """Run the method-comparison study defined by a JSON configuration."""
    raw = _load_json_config(config_file)
    if jobs is not None:
        raw = dict(raw, jobs=jobs)
    try:
        config = BenchmarkConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        _fail_config(f"invalid benchmark config: {exc}")

    os.makedirs(out, exist_ok=True)
    timings: dict[str, float] = {}
    started = time.perf_counter()
    session = BenchmarkSession(config)
    timings["setup"] = time.perf_counter() - started

    scored = []
    try:
        for method, basis_kind in config.methods:
            stage_start = time.perf_counter()
            scored.append(session.score_method(method, basis_kind))
            timings[f"{method}-{basis_kind}"] = time.perf_counter() - stage_start
    except Exception as exc:
        partial = assemble_report(scored, config.n_runs)
        write_json(os.path.join(out, "partial_results.json"), {
            "error": f"{type(exc).__name__}: {exc}",
            "failed_method": f"{method}-{basis_kind}",
            "completed": partial.to_dict(),
        })
        click.echo(f"benchmark aborted at {method}-{basis_kind}: {exc}",
                   err=True)
        sys.exit(3)

    report = assemble_report(scored, config.n_runs)
    score_rows = [
        (m.label, fold, score)
        for m in report.methods
        for fold, score in enumerate(m.fold_scores)
    ]
    write_table_csv(os.path.join(out, "scores.csv"),
                    ["method", "fold", "score"], score_rows)
    ident_rows = [
        (m.label, fold, acc)
        for m in report.methods
        for fold, acc in enumerate(m.identification)
    ]
    write_table_csv(os.path.join(out, "identification.csv"),
                    ["method", "fold", "accuracy"], ident_rows)
    write_json(os.path.join(out, "report.json"), report.to_dict())

    from .report import render_benchmark_figures

    figure_names = render_benchmark_figures(
        report, out, chance=1.0 / config.conditions_per_run
    )

    output_names = ["scores.csv", "identification.csv", "report.json"]
    output_names += figure_names
    outputs = {name: sha256_file(os.path.join(out, name))
               for name in output_names}
    timings["total"] = time.perf_counter() - started
    manifest = build_manifest(config.to_dict(), config.seed, __version__,
                              outputs, timings=timings,
                              extra={"method_grid": [list(m)
                                                     for m in config.methods]})
    write_json(os.path.join(out, "manifest.json"), manifest)
    best = report.ordered()[0]
    click.echo(f"benchmark complete: best method {best.label} "
               f"(mean score {best.mean_score:.4f}); "
               f"results in {out}")


if __name__ == "__main__":
    main()
