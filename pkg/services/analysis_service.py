import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from services.coefficient_service import CoefficientService, Coefficients
from services.joint_service import JointEngine
from services.model_service import ArrivalModel, ModelService
from services.service_laws import ServiceLaw
from services.workload_service import WorkloadService
from utils.base_service import BaseService
from utils.models import EngineOptions, JointResult, StationarySummary, WorkloadSolution

logger = logging.getLogger(__name__)


@dataclass
class Analysis:
    summary: StationarySummary
    coefficients: Coefficients
    workload: WorkloadService
    solution: WorkloadSolution
    mean_waiting: List[float]
    little: np.ndarray
    result: JointResult = None

    @property
    def v1bar(self) -> np.ndarray:
        return self.solution.v1bar

    @property
    def mean_workload(self) -> float:
        return self.solution.mean_workload


class AnalysisService(BaseService):
    """model -> coefficients -> workload -> joint engine"""

    def __init__(self, model: ArrivalModel, services: Sequence[ServiceLaw], options: EngineOptions = None):
        super().__init__()
        self.model = model
        self.services = list(services)
        self.options = options or EngineOptions()

    def mean_values(self) -> Analysis:
        """Everything up to the mean workload and the Little's-law means; no joint fields."""
        opts = self.options
        checker = ModelService()
        checker.validate(self.model, self.services)
        summary = checker.stationary_summary(self.model, self.services)
        coefficients = CoefficientService().build(self.model, self.services, summary.theta, m_limit=opts.m_limit)
        workload = WorkloadService(self.model, self.services, summary, coefficients,
                                   max_sweeps=opts.max_sweeps, m_limit=opts.m_limit)
        solution = workload.solve(opts.g_method)
        v1bar = solution.v1bar
        waiting = [workload.mean_waiting(k, v1bar) for k in range(self.model.K)]
        little = workload.little_means(v1bar)
        logger.info(f"Little's-law E[N_k] = {np.round(little, 6).tolist()}")
        return Analysis(summary=summary, coefficients=coefficients, workload=workload, solution=solution,
                        mean_waiting=waiting, little=little)

    def run(self) -> Analysis:
        analysis = self.mean_values()
        engine = JointEngine(self.model, self.services, analysis.summary, analysis.workload,
                             analysis.v1bar, self.options)
        analysis.result = engine.run()
        return analysis
