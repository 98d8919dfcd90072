from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from config.settings import settings
from utils.errors import UsageError


def _plain(value):
    """numpy-free copy of a value, ready for json.dump"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class ValidationReport:
    checks: Dict[str, bool] = field(default_factory=dict)
    messages: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def record(self, name: str, ok: bool, message: str = ""):
        self.checks[name] = bool(ok)
        if not ok and message:
            self.messages.append(f"{name}: {message}")

    def to_dict(self) -> dict:
        return {"checks": dict(self.checks), "messages": list(self.messages), "passed": self.passed}


@dataclass
class StationarySummary:
    pi: np.ndarray
    lambda_k: np.ndarray
    lambda_k_B: np.ndarray
    rho_k: np.ndarray
    rho: float
    theta: float
    batch_means: np.ndarray

    @property
    def lam(self) -> float:
        return float(np.sum(self.lambda_k))


@dataclass
class WorkloadSolution:
    Q: np.ndarray
    kappa: np.ndarray
    v0: np.ndarray
    v_series: np.ndarray
    v_residual: float
    v1bar: np.ndarray
    G: Optional[np.ndarray] = None

    @property
    def mean_workload(self) -> float:
        return float(self.v1bar.sum())


@dataclass
class EngineOptions:
    """Knobs of one joint-engine run; unset values fall back to settings"""
    eps: float = None
    eps_F: Optional[float] = None
    eps_g: Optional[float] = None
    n_cap: Optional[int] = None
    mode: str = "joint"
    field_budget: int = None
    max_sweeps: int = None
    m_limit: int = None
    g_method: str = "natural"

    def __post_init__(self):
        if self.eps is None:
            self.eps = settings.MBMAPQ_EPS
        if self.n_cap is None:
            self.n_cap = settings.MBMAPQ_NP
        if self.field_budget is None:
            self.field_budget = settings.MBMAPQ_FIELD_BUDGET
        if self.max_sweeps is None:
            self.max_sweeps = settings.MBMAPQ_MAX_SWEEPS
        if self.m_limit is None:
            self.m_limit = settings.MBMAPQ_M_LIMIT
        if not 0.0 < self.eps < 1.0:
            raise UsageError(f"eps must lie in (0, 1), got {self.eps}")
        if self.mode not in ("joint", "total"):
            raise UsageError(f"mode must be 'joint' or 'total', got {self.mode!r}")
        if self.n_cap < 1:
            raise UsageError(f"N_p must be positive, got {self.n_cap}")
        if self.g_method not in ("natural", "u_based"):
            raise UsageError(f"unknown G iteration {self.g_method!r}")


@dataclass
class TruncationLedger:
    eps: float
    eps_F: float
    eps_g: float
    m_gamma: List[int]
    m_v: List[int]
    n_g: List[int]
    N_p: int
    n_F: List[int] = field(default_factory=list)
    n_A: List[int] = field(default_factory=list)
    n_v: List[int] = field(default_factory=list)
    n_Gamma: List[int] = field(default_factory=list)
    F_entries_computed: int = 0
    F_entries_peak_stored: int = 0
    cap_hit_levels: List[int] = field(default_factory=list)

    @property
    def m_max(self) -> int:
        return max(max(self.m_gamma), max(self.m_v))

    def to_dict(self) -> dict:
        out = _plain(asdict(self))
        out["m_max"] = self.m_max
        return out


@dataclass
class ErrorBoundReport:
    A_mass: List[List[float]] = field(default_factory=list)
    v_mass: List[float] = field(default_factory=list)
    Gamma_mass_ok: List[bool] = field(default_factory=list)
    batch_mean_bound: List[float] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    cap_limited: bool = False

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> List[str]:
        return [name for name, ok in self.checks.items() if not ok]

    def to_dict(self) -> dict:
        out = _plain(asdict(self))
        out["passed"] = self.passed
        return out


@dataclass
class JointResult:
    mode: str
    q: list
    p: object
    mean_k: np.ndarray
    mean_total: Optional[float]
    tail_correction: Dict[str, float]
    tail_flag: Optional[str]
    ledger: TruncationLedger
    bounds: ErrorBoundReport
    A: list = field(default_factory=list)
    v: list = field(default_factory=list)
    Gamma: list = field(default_factory=list)

    @property
    def empty_probability(self) -> float:
        return float(self.p.get((0,) * self.p.ndim).sum())


@dataclass
class SimConfig:
    horizon: float = 1e5
    warmup: Optional[float] = None
    replications: int = 10
    seed: int = 12345
    hist_cap: int = 30
    workers: Optional[int] = None

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = 0.1 * self.horizon
        if self.replications < 1:
            raise UsageError(f"replications must be >= 1, got {self.replications}")
        if not self.horizon > self.warmup >= 0.0:
            raise UsageError(f"need horizon > warmup >= 0, got horizon={self.horizon}, warmup={self.warmup}")
        if self.hist_cap < 0:
            raise UsageError(f"histogram cap must be >= 0, got {self.hist_cap}")


@dataclass
class SimEstimate:
    replications: int
    hist: np.ndarray
    hist_se: np.ndarray
    mean_k: np.ndarray
    mean_k_se: np.ndarray
    mean_total: float
    mean_total_se: float
    mean_workload: float
    mean_workload_se: float
    empty_probability: float
    empty_probability_se: float
    arrival_rates: np.ndarray
    arrival_rates_se: np.ndarray

    def to_dict(self) -> dict:
        out = _plain(asdict(self))
        out.pop("hist")
        out.pop("hist_se")
        return out


@dataclass
class RunManifest:
    command: str
    model_path: str
    eps: Optional[float] = None
    N_p: Optional[int] = None
    mode: Optional[str] = None
    output_dir: str = ""
    seed: Optional[int] = None
    wall_clock: float = 0.0
    started_at: str = ""
    tool_version: str = settings.TOOL_VERSION
    flags: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain(asdict(self))
