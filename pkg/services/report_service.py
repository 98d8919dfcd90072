"""CSV/JSON artifacts for analysis and simulation runs, and their comparison."""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from services.joint_service import ccdf, level_masses, marginals
from services.model_service import ArrivalModel
from utils.base_service import BaseService
from utils.errors import Disagreement, ModelFileError, UsageError
from utils.fields import MultiIndexField
from utils.models import (JointResult, RunManifest, SimEstimate, StationarySummary, ValidationReport,
                          WorkloadSolution, _plain)

logger = logging.getLogger(__name__)

Z_LIMIT = 4.0


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return '{:.17g}'.format(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise ModelFileError(str(path), "no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFileError(str(path), f"cannot parse: {str(e)}") from e


def source_model(analysis_dir) -> str:
    """Model path recorded by the analyze run in analysis_dir, or "" when there is none."""
    path = Path(analysis_dir) / "manifest.json"
    if not path.is_file():
        return ""
    try:
        return json.loads(path.read_text()).get("model_path", "")
    except json.JSONDecodeError:
        return ""


def field_rows(field: MultiIndexField, upto: int = None, se: MultiIndexField = None):
    """(n_1..n_K, per-state masses, row mass[, row mass SE]) over |n| <= upto, lexicographic in n."""
    for n, block in field.items(upto):
        row = list(n) + list(block) + [float(block.sum())]
        if se is not None:
            row.append(float(se.get(n).sum()))
        yield row


def field_header(ndim: int, env_dim: int, extra: Sequence[str] = ()) -> List[str]:
    return ([f"n_{k + 1}" for k in range(ndim)] + [f"state_{i + 1}" for i in range(env_dim)]
            + ["mass"] + list(extra))


class ReportService(BaseService):
    def __init__(self, out_dir):
        super().__init__()
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def write_manifest(self, manifest: RunManifest) -> Path:
        return write_json(self._path("manifest.json"), manifest.to_dict())

    def write_validation(self, report: ValidationReport) -> Path:
        return write_json(self._path("validation.json"), report.to_dict())

    def write_analysis(self, model: ArrivalModel, summary: StationarySummary, result: JointResult,
                       mean_workload: float, mean_waiting: Sequence[float],
                       little: Sequence[float], solution: WorkloadSolution = None) -> List[Path]:
        """
        Writes p_joint.csv (joint mode), p_total.csv, q_class_k.csv, ccdf_total.csv,
        marginal_class_k.csv (joint mode) and summary.json.
        """
        M = model.env_dim
        p = result.p
        written = []
        if result.mode == "joint":
            written.append(write_csv(self._path("p_joint.csv"), field_header(p.ndim, M), field_rows(p)))
            for k, marginal in enumerate(marginals(p)):
                written.append(write_csv(self._path(f"marginal_class_{k + 1}.csv"), ["n", "mass", "ccdf"],
                                         zip(range(len(marginal)), marginal, ccdf(marginal))))
        total = p.aggregate() if p.ndim > 1 else p
        written.append(write_csv(self._path("p_total.csv"), field_header(1, M), field_rows(total)))
        masses = level_masses(p)
        written.append(write_csv(self._path("ccdf_total.csv"), ["n", "ccdf"],
                                 zip(range(len(masses)), ccdf(masses))))
        for k, q in enumerate(result.q):
            written.append(write_csv(self._path(f"q_class_{k + 1}.csv"), field_header(q.ndim, M), field_rows(q)))

        data = {
            "model": model.name,
            "mode": result.mode,
            "rho": summary.rho,
            "rho_k": summary.rho_k,
            "lambda_k": summary.lambda_k,
            "lambda": summary.lam,
            "theta": summary.theta,
            "mean_total": result.mean_total,
            "mean_k": result.mean_k,
            "empty_probability": result.empty_probability,
            "mean_workload": mean_workload,
            "mean_waiting": list(mean_waiting),
            "little": {"mean_k": result.mean_k, "lambda_k_sojourn": list(little)},
            "tail_correction": result.tail_correction,
            "tail_flag": result.tail_flag,
            "ledger": result.ledger.to_dict(),
            "error_bounds": result.bounds.to_dict(),
        }
        if solution is not None:
            data["workload"] = {
                "kappa": solution.kappa,
                "v0": solution.v0,
                "v1bar": solution.v1bar,
                "v_series_terms": len(solution.v_series),
                "v_residual": solution.v_residual,
            }
        written.append(write_json(self._path("summary.json"), data))
        logger.info(f"wrote {len(written)} analysis files to {self.out_dir}")
        return written

    def write_simulation(self, model: ArrivalModel, estimate: SimEstimate) -> List[Path]:
        hist = MultiIndexField(model.K, (model.env_dim,), estimate.hist.shape[0] - 1)
        hist.data[...] = estimate.hist
        hist_se = MultiIndexField(model.K, (model.env_dim,), estimate.hist.shape[0] - 1)
        hist_se.data[...] = np.nan_to_num(estimate.hist_se)
        # capped grid: every cell of the box, not only the simplex
        upto = model.K * hist.extent
        written = [
            write_csv(self._path("sim_hist.csv"), field_header(model.K, model.env_dim, ["mass_se"]),
                      field_rows(hist, upto, hist_se)),
            write_json(self._path("sim_summary.json"), dict(estimate.to_dict(), model=model.name)),
        ]
        logger.info(f"wrote simulation files to {self.out_dir}")
        return written


def _z_score(diff: float, se: float) -> float:
    if se is None or not np.isfinite(se) or se == 0.0:
        return 0.0 if abs(diff) <= 1e-12 else float("inf")
    return diff / se


def compare_runs(analysis_dir, simulation_dir, out_dir: Optional[str] = None) -> Dict[str, dict]:
    """
    z-scores of simulated against analytic E[N], E[N_k], P(N = 0) and E[V].

    Raises:
        Disagreement: some |z| > 4; compare.json is still written
    """
    analysis_dir, simulation_dir = Path(analysis_dir), Path(simulation_dir)
    for d in (analysis_dir, simulation_dir):
        if not d.is_dir() or not any(d.iterdir()):
            raise UsageError(f"{d} is not a non-empty directory")
    exact = read_json(analysis_dir / "summary.json")
    sim = read_json(simulation_dir / "sim_summary.json")

    pairs = [
        ("mean_total", exact.get("mean_total"), sim["mean_total"], sim["mean_total_se"]),
        ("empty_probability", exact.get("empty_probability"), sim["empty_probability"],
         sim["empty_probability_se"]),
        ("mean_workload", exact.get("mean_workload"), sim["mean_workload"], sim["mean_workload_se"]),
    ]
    if exact.get("mean_k") is not None:
        for k, (a, s, se) in enumerate(zip(exact["mean_k"], sim["mean_k"], sim["mean_k_se"])):
            pairs.append((f"mean_class_{k + 1}", a, s, se))

    stats = {}
    for name, a, s, se in pairs:
        if a is None:
            continue
        z = _z_score(s - a, se)
        stats[name] = {"analysis": a, "simulation": s, "se": se, "z": z, "ok": abs(z) <= Z_LIMIT}
    offending = [name for name, entry in stats.items() if not entry["ok"]]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "compare.json", {"statistics": stats, "passed": not offending})
    for name, entry in stats.items():
        logger.info(f"{name}: analysis {entry['analysis']:.6g}, simulation {entry['simulation']:.6g}, "
                    f"z = {entry['z']:.3g}")
    if offending:
        raise Disagreement(offending)
    return stats
