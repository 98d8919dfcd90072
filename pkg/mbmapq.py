import logging
import sys
from functools import partial, wraps
from pathlib import Path
from time import perf_counter
from typing import Optional

import typer

from config.settings import settings
from services.analysis_service import AnalysisService
from services.model_loader import load_model
from services.model_service import ModelService
from services.report_service import ReportService, compare_runs, source_model
from services.simulation_service import SimulationService
from utils.errors import Disagreement, MbmapqError
from utils.models import EngineOptions, RunManifest, SimConfig
from utils.system_utils import RunClock

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.MBMAPQ_LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr
)
logger = logging.getLogger(__name__)

app = typer.Typer(name="mbmapq", help="Queue-length analysis of FIFO queues fed by batch Markovian arrival streams.",
                  add_completion=False, no_args_is_help=True)


def exit_codes(func):
    """Map MbmapqError.exit_code (any other failure: 1) onto the process exit code."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except typer.Exit:
            raise
        except MbmapqError as e:
            logger.error(f"{type(e).__name__}: {str(e)}")
            raise typer.Exit(code=e.exit_code)
        except Exception as e:
            logger.error(f"Unfortunately {func.__name__} failed: {str(e)}")
            raise typer.Exit(code=1)
    return wrapper


def _manifest(command: str, model: Path, out: Path, started: str, start: float, **kwargs) -> RunManifest:
    return RunManifest(command=command, model_path=str(model), output_dir=str(out), started_at=started,
                       wall_clock=perf_counter() - start, **kwargs)


@app.command()
@exit_codes
def validate(
    model: Path = typer.Option(..., "--model", help="Model file (.toml or .json)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Also write validation.json and manifest.json here"),
):
    """
    Check the structural assumptions of a model file.

    Prints one line per check; exits 0 when every check passes, 2 otherwise.
    """
    start, started = perf_counter(), RunClock.get_current_date()
    arrival, services, _ = load_model(model)
    report = ModelService().validate(arrival, services, strict=False)
    for name, ok in report.checks.items():
        typer.echo(f"{name}: {'ok' if ok else 'FAILED'}")
    for message in report.messages:
        typer.echo(message)
    if out is not None:
        writer = ReportService(out)
        writer.write_validation(report)
        writer.write_manifest(_manifest("validate", model, out, started, start))
    if not report.passed:
        raise typer.Exit(code=2)


@app.command()
@exit_codes
def analyze(
    model: Path = typer.Option(..., "--model", help="Model file (.toml or .json)"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    eps: float = typer.Option(settings.MBMAPQ_EPS, "--eps", help="Target truncation error"),
    np_cap: int = typer.Option(settings.MBMAPQ_NP, "--np", help="Largest total level N_p"),
    mode: str = typer.Option("joint", "--mode", help="joint or total"),
    eps_F: Optional[float] = typer.Option(None, "--eps-f", help="Override eps_F"),
    eps_g: Optional[float] = typer.Option(None, "--eps-g", help="Override eps_g"),
    g_method: str = typer.Option("natural", "--g-method", help="natural or u_based G iteration"),
):
    """
    Stationary queue-length distribution, mean workload and means per class.

    Writes p_joint.csv (joint mode), p_total.csv, q_class_k.csv, ccdf_total.csv,
    summary.json and manifest.json to --out.
    """
    start, started = perf_counter(), RunClock.get_current_date()
    arrival, services, _ = load_model(model)
    options = EngineOptions(eps=eps, eps_F=eps_F, eps_g=eps_g, n_cap=np_cap, mode=mode, g_method=g_method)
    analysis = AnalysisService(arrival, services, options).run()
    report = ReportService(out)
    report.write_analysis(arrival, analysis.summary, analysis.result, analysis.mean_workload,
                          analysis.mean_waiting, analysis.little, analysis.solution)
    report.write_manifest(_manifest("analyze", model, out, started, start, eps=eps, N_p=np_cap, mode=mode,
                                    flags={"eps_F": eps_F, "eps_g": eps_g, "g_method": g_method}))
    mean = analysis.result.mean_total
    typer.echo(f"E[N] = {mean:.10g}" if mean is not None else f"E[N] not reported ({analysis.result.tail_flag})")


@app.command()
@exit_codes
def simulate(
    model: Path = typer.Option(..., "--model", help="Model file (.toml or .json)"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    horizon: float = typer.Option(1e5, "--horizon", help="Simulated time per replication"),
    warmup: Optional[float] = typer.Option(None, "--warmup", help="Discarded initial time (default 10% of horizon)"),
    reps: int = typer.Option(10, "--reps", help="Independent replications"),
    seed: int = typer.Option(12345, "--seed", help="Root seed"),
    hist_cap: int = typer.Option(30, "--hist-cap", help="Histogram cap per class"),
    workers: Optional[int] = typer.Option(None, "--workers", help="Worker processes (default MBMAPQ_THREADS)"),
):
    """Replicated discrete-event simulation; writes sim_summary.json, sim_hist.csv and manifest.json."""
    start, started = perf_counter(), RunClock.get_current_date()
    config = SimConfig(horizon=horizon, warmup=warmup, replications=reps, seed=seed, hist_cap=hist_cap,
                       workers=workers)
    arrival, services, _ = load_model(model)
    checker = ModelService()
    checker.validate(arrival, services)
    checker.stationary_summary(arrival, services, check_stability=False)
    estimate = SimulationService(arrival, services).simulate(config)
    report = ReportService(out)
    report.write_simulation(arrival, estimate)
    report.write_manifest(_manifest("simulate", model, out, started, start, seed=seed,
                                    flags={"horizon": horizon, "warmup": config.warmup, "reps": reps,
                                           "hist_cap": hist_cap}))
    typer.echo(f"E[N] = {estimate.mean_total:.6g} +- {estimate.mean_total_se:.3g}")


@app.command()
@exit_codes
def compare(
    analysis: Path = typer.Option(..., "--analysis", help="Output directory of analyze"),
    simulation: Path = typer.Option(..., "--simulation", help="Output directory of simulate"),
    out: Optional[Path] = typer.Option(None, "--out", help="Where to write compare.json (default --analysis/compare)"),
):
    """z-scores of simulated against analytic means; exits 5 when some |z| > 4."""
    start, started = perf_counter(), RunClock.get_current_date()
    out = out if out is not None else analysis / "compare"
    manifest = partial(_manifest, "compare", source_model(analysis), out, started, start,
                       flags={"analysis": str(analysis), "simulation": str(simulation)})
    try:
        stats = compare_runs(analysis, simulation, out)
    except Disagreement:
        ReportService(out).write_manifest(manifest())
        raise
    ReportService(out).write_manifest(manifest())
    for name, entry in stats.items():
        typer.echo(f"{name}: z = {entry['z']:.3g}")


def main():
    app()


if __name__ == "__main__":
    main()
