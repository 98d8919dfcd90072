import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import linalg

from services.model_service import ArrivalModel, PhBatch
from services.service_laws import ServiceLaw
from utils.base_service import BaseService, log_stage
from utils.errors import MassDeficit, SingularResolvent

logger = logging.getLogger(__name__)

B_SERIES_TOL = 1e-14


@dataclass
class GammaSeries:
    """gamma^(m)(theta), m = 0..m_cap, with the exact tail mass beyond m_cap"""
    values: np.ndarray
    residual: float

    @property
    def m_cap(self) -> int:
        return len(self.values) - 1


@dataclass
class Coefficients:
    theta: float
    gamma: List[GammaSeries]
    d: List[np.ndarray]
    D: np.ndarray
    residual: np.ndarray

    @property
    def m_B(self) -> int:
        return self.D.shape[0] - 1


def gamma_series(service: ServiceLaw, theta: float, m_cap: int) -> GammaSeries:
    return GammaSeries(service.gamma_terms(theta, m_cap), service.gamma_tail(theta, m_cap))


def d_series(batch: PhBatch, gamma: GammaSeries, m_cap: int = None) -> np.ndarray:
    """
    d^(m)(theta), m = 0..m_cap, as rows of an (m_cap + 1, M_k) array.

    d^(m) [I - gamma^(0) P] = gamma^(m) alpha (I - P) + (sum_{l=1..m} gamma^(l) d^(m-l)) P
    """
    m_cap = gamma.m_cap if m_cap is None else m_cap
    g = gamma.values[:m_cap + 1]
    if batch.is_single:
        return np.outer(g, batch.alpha)

    order = batch.order
    system = np.eye(order) - g[0] * batch.P
    lu, piv = linalg.lu_factor(system)
    if np.any(np.abs(np.diag(lu)) < 1e-300) or not np.all(np.isfinite(lu)):
        raise SingularResolvent(f"I - gamma0 P is singular (gamma0 = {g[0]:.6g})")
    head = batch.alpha - batch.alpha @ batch.P

    out = np.empty((m_cap + 1, order))
    out[0] = linalg.lu_solve((lu, piv), g[0] * head, trans=1)
    for m in range(1, m_cap + 1):
        conv = g[1:m + 1] @ out[m - 1::-1]
        rhs = g[m] * head + conv @ batch.P
        out[m] = linalg.lu_solve((lu, piv), rhs, trans=1)
    return out


def D_series(model: ArrivalModel, d_list: Sequence[np.ndarray]) -> np.ndarray:
    """D^(m)(theta) = sum_k (d_k^(m) e) D_k, stacked as (m_cap + 1, M, M)."""
    length = min(len(d) for d in d_list)
    weights = np.stack([d[:length].sum(axis=1) for d in d_list], axis=1)
    return np.einsum('mk,kij->mij', weights, np.stack(model.D_list))


class CoefficientService(BaseService):
    def __init__(self):
        super().__init__()

    @log_stage("coefficients")
    def build(self, model: ArrivalModel, services: Sequence[ServiceLaw], theta: float,
              tol: float = B_SERIES_TOL, m_limit: int = None) -> Coefficients:
        """
        gamma, d and D series, grown until theta^{-1}(D e - sum_m D^(m) e) < tol entrywise.
        """
        m_limit = self.m_limit if m_limit is None else m_limit
        De = model.D.sum(axis=1)
        # float sums cannot resolve below a few ulps of D e
        threshold = max(theta * tol, 64.0 * np.finfo(float).eps * float(De.max()))
        m_cap = 32
        while True:
            gammas = [gamma_series(s, theta, m_cap) for s in services]
            d_list = [d_series(b, g) for b, g in zip(model.batches, gammas)]
            D = D_series(model, d_list)
            remaining = De[None, :] - np.cumsum(D.sum(axis=2), axis=0)
            ok = np.flatnonzero(np.all(remaining < threshold, axis=1))
            if len(ok):
                m_B = int(ok[0])
                logger.info(f"B series truncated at m = {m_B} (theta = {theta:.6g})")
                return Coefficients(theta=theta, gamma=gammas, d=[d[:m_B + 1] for d in d_list],
                                    D=D[:m_B + 1], residual=remaining[m_B] / theta)
            if m_cap >= m_limit:
                raise MassDeficit(
                    f"D^(m) series still misses {remaining[-1].max():.3e} of D e after {m_cap} terms"
                )
            m_cap = min(2 * m_cap, m_limit)
