import logging
from functools import cached_property
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from services.service_laws import ServiceLaw
from utils.base_service import BaseService
from utils.errors import (
    AssumptionViolation, EmptyArrivalStream, GeneratorRowSum, InvalidServiceLaw,
    MbmapqError, ModelValidationError, NegativeRate, ReducibleChain,
    SubstochasticViolation, Unstable, UsageError,
)
from utils.linalg import communicating_classes, spectral_radius, stationary_vector
from utils.models import StationarySummary, ValidationReport

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12


class PhBatch:
    """Discrete phase-type batch-size law: g(n) = alpha P^{n-1} (I - P) e, n >= 1."""

    def __init__(self, alpha: Sequence[float], P: Sequence[Sequence[float]]):
        self.alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        self.P = np.atleast_2d(np.asarray(P, dtype=float))

    @property
    def order(self) -> int:
        return self.alpha.shape[0]

    @cached_property
    def exit_vector(self) -> np.ndarray:
        """(I - P) e"""
        return 1.0 - self.P.sum(axis=1)

    @cached_property
    def fundamental(self) -> np.ndarray:
        """(I - P)^{-1}"""
        return linalg.inv(np.eye(self.order) - self.P)

    @cached_property
    def mean(self) -> float:
        return float(self.alpha @ self.fundamental.sum(axis=1))

    @cached_property
    def factorial_moment(self) -> float:
        """E[G (G - 1)] = 2 alpha (I - P)^{-2} P e"""
        N = self.fundamental
        return float(2.0 * self.alpha @ N @ N @ self.P.sum(axis=1))

    @property
    def is_single(self) -> bool:
        """Batch size is 1 with probability one."""
        return not np.any(self.P)

    def pmf(self, n: int) -> float:
        if n < 1:
            raise UsageError(f"batch sizes start at 1, got n={n}")
        return float(self.alpha @ np.linalg.matrix_power(self.P, n - 1) @ self.exit_vector)

    def pmf_terms(self, n_max: int) -> np.ndarray:
        """g(0..n_max) with g(0) = 0."""
        out = np.zeros(n_max + 1)
        row = self.alpha.copy()
        for n in range(1, n_max + 1):
            out[n] = row @ self.exit_vector
            row = row @ self.P
        return out

    def residual(self, n: int) -> float:
        """P(G > n) = alpha P^n e"""
        return float(self.alpha @ np.linalg.matrix_power(self.P, n) @ np.ones(self.order))

    def residual_terms(self, n_max: int) -> np.ndarray:
        """P(G > n) for n = 0..n_max"""
        out = np.empty(n_max + 1)
        row = self.alpha.copy()
        for n in range(n_max + 1):
            out[n] = row.sum()
            row = row @ self.P
        return out

    def pgf_factor(self, z: float) -> float:
        """sum_n g(n) z^n = z alpha (I - P) [I - z P]^{-1} e"""
        inner = linalg.solve(np.eye(self.order) - z * self.P, self.exit_vector)
        return float(z * self.alpha @ inner)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.is_single:
            return np.ones(size, dtype=np.int64)
        if self.order == 1:
            return rng.geometric(1.0 - self.P[0, 0], size).astype(np.int64)
        cum = np.cumsum(self.P, axis=1)
        out = np.empty(size, dtype=np.int64)
        phases = rng.choice(self.order, size=size, p=self.alpha)
        for i in range(size):
            phase, count = phases[i], 1
            while True:
                u = rng.random()
                if u >= cum[phase, -1]:
                    break
                phase = int(np.searchsorted(cum[phase], u, side="right"))
                count += 1
            out[i] = count
        return out

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "P": self.P.tolist()}

    @classmethod
    def geometric(cls, mean: float) -> 'PhBatch':
        if mean < 1.0:
            raise ModelValidationError(f"geometric batch mean must be >= 1, got {mean}")
        return cls([1.0], [[1.0 - 1.0 / mean]])

    @classmethod
    def from_pmf(cls, pmf: Sequence[float]) -> 'PhBatch':
        """Exact embedding of a finite pmf g(1..N): phase j means j customers still to come."""
        g = np.asarray(pmf, dtype=float)
        size = len(g)
        if size == 0:
            raise ModelValidationError("batch pmf is empty")
        P = np.zeros((size, size))
        for j in range(1, size):
            P[j, j - 1] = 1.0
        return cls(g, P)


def batch_pmf(batch: PhBatch, n: int) -> float:
    """g(n) = alpha P^{n-1} (I - P) e"""
    return batch.pmf(n)


class ClassStream:
    def __init__(self, D: Sequence[Sequence[float]], batch: PhBatch):
        self.D = np.atleast_2d(np.asarray(D, dtype=float))
        self.batch = batch


class ArrivalModel:
    def __init__(self, C: Sequence[Sequence[float]], classes: List[ClassStream],
                 name: str = "", reference: Optional[Dict[str, object]] = None):
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.classes = list(classes)
        self.name = name
        self.reference = dict(reference or {})

    @property
    def env_dim(self) -> int:
        return self.C.shape[0]

    @property
    def K(self) -> int:
        return len(self.classes)

    @property
    def D_list(self) -> List[np.ndarray]:
        return [c.D for c in self.classes]

    @property
    def batches(self) -> List[PhBatch]:
        return [c.batch for c in self.classes]

    @property
    def D(self) -> np.ndarray:
        return sum(self.D_list, np.zeros_like(self.C))

    @property
    def generator(self) -> np.ndarray:
        return self.C + self.D


class ModelService(BaseService):
    def __init__(self):
        super().__init__()

    def _checks(self, model: ArrivalModel,
                services: Sequence[ServiceLaw]) -> Iterator[Tuple[str, Optional[MbmapqError]]]:
        M = model.env_dim
        if model.C.shape != (M, M) or any(D.shape != (M, M) for D in model.D_list):
            yield "shapes", ModelValidationError(f"C and every D_k must be {M}x{M}")
            return
        if len(services) != model.K:
            yield "shapes", ModelValidationError(f"{model.K} classes but {len(services)} service laws")
            return
        yield "shapes", None

        off = model.C.copy()
        np.fill_diagonal(off, 0.0)
        bad = np.argwhere(off < 0.0)
        yield "C_offdiag_nonneg", NegativeRate("C (off-diagonal)", map(tuple, bad.tolist())) if len(bad) else None
        bad = np.flatnonzero(np.diag(model.C) >= 0.0)
        yield "C_diag_negative", (NegativeRate("C (diagonal must be < 0)", [(i, i) for i in bad.tolist()])
                                  if len(bad) else None)
        for k, D in enumerate(model.D_list):
            bad = np.argwhere(D < 0.0)
            yield f"D{k + 1}_nonneg", NegativeRate(f"D_{k + 1}", map(tuple, bad.tolist())) if len(bad) else None
            yield f"D{k + 1}_nonempty", None if np.any(D > 0.0) else EmptyArrivalStream(k)

        residuals = model.generator.sum(axis=1)
        rows = np.flatnonzero(np.abs(residuals) > ROW_TOL)
        yield "row_sums", GeneratorRowSum(rows.tolist(), residuals[rows].tolist()) if len(rows) else None

        components = communicating_classes(model.generator)
        yield "irreducible", ReducibleChain(components) if len(components) > 1 else None

        for k, batch in enumerate(model.batches):
            yield f"batch{k + 1}", self._batch_error(k, batch)

        for k, service in enumerate(services):
            mean = service.mean
            ok = np.isfinite(mean) and mean > 0.0
            yield f"service{k + 1}", None if ok else InvalidServiceLaw(
                f"class {k + 1}: service mean must be positive and finite, got {mean}")

    @staticmethod
    def _batch_error(k: int, batch: PhBatch) -> Optional[MbmapqError]:
        alpha, P = batch.alpha, batch.P
        if P.shape != (batch.order, batch.order):
            return SubstochasticViolation(k, f"P must be {batch.order}x{batch.order}")
        if np.any(alpha < 0.0):
            return SubstochasticViolation(k, "negative alpha", np.flatnonzero(alpha < 0.0).tolist())
        if abs(alpha.sum() - 1.0) > ROW_TOL:
            return SubstochasticViolation(k, f"alpha sums to {alpha.sum():.15g}, not 1")
        if np.any(P < 0.0):
            return SubstochasticViolation(k, "negative entry in P", map(tuple, np.argwhere(P < 0.0).tolist()))
        rows = np.flatnonzero(P.sum(axis=1) > 1.0 + ROW_TOL)
        if len(rows):
            return SubstochasticViolation(k, "row sum of P exceeds 1", rows.tolist())
        sr = spectral_radius(P)
        if sr >= 1.0 - ROW_TOL:
            return SubstochasticViolation(k, f"spectral radius of P is {sr:.15g}; batches would not terminate")
        return None

    def validate(self, model: ArrivalModel, services: Sequence[ServiceLaw],
                 strict: bool = True) -> ValidationReport:
        """
        Check the structural assumptions on (C, D_k, alpha_k, P_k, H_k).

        Args:
            model (ArrivalModel): arrival model
            services: one service law per class
            strict (bool): raise the first failure instead of only reporting it

        Returns:
            ValidationReport: pass/fail per check with messages naming offending indices
        """
        report = ValidationReport()
        first = None
        for name, error in self._checks(model, services):
            report.record(name, error is None, str(error) if error else "")
            if error is not None and first is None:
                first = error
        if first is not None:
            logger.warning(f"model {model.name or '<unnamed>'} failed validation: {'; '.join(report.messages)}")
            if strict:
                raise first
        return report

    def stationary_summary(self, model: ArrivalModel, services: Sequence[ServiceLaw],
                           check_stability: bool = True) -> StationarySummary:
        pi = stationary_vector(model.generator)
        lambda_B = np.array([pi @ D.sum(axis=1) for D in model.D_list])
        batch_means = np.array([b.mean for b in model.batches])
        lambda_k = batch_means * lambda_B
        rho_k = lambda_k * np.array([s.mean for s in services])
        rho = float(rho_k.sum())
        theta = float(np.max(np.abs(np.diag(model.C))))
        summary = StationarySummary(pi=pi, lambda_k=lambda_k, lambda_k_B=lambda_B, rho_k=rho_k,
                                    rho=rho, theta=theta, batch_means=batch_means)
        logger.info(f"rho = {rho:.6g} (per class {np.round(rho_k, 6).tolist()}), theta = {theta:.6g}")
        if rho >= 1.0 - ROW_TOL:
            if check_stability:
                raise Unstable(rho)
            logger.warning(f"rho = {rho:.6g} >= 1; the queue has no stationary regime")
        return summary

    @staticmethod
    def require_joint_ready(model: ArrivalModel):
        """Joint pipeline needs phase-type batches with a usable (I - P)^{-1}."""
        for k, batch in enumerate(model.batches):
            if not np.all(np.isfinite(batch.fundamental)):
                raise AssumptionViolation(f"class {k + 1}: batch law has no finite mean")
