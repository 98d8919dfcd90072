"""
Virtual-workload analysis.

The excised-busy-period generator Q, its stationary vector kappa, the
Poisson-mixed workload coefficients v^(m)(theta) (the stationary vector of
an M/G/1-type chain built from the D^(m)(theta) series), the mean workload
vector and the workload / waiting-time transforms.
"""
import logging
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from services.coefficient_service import Coefficients
from services.model_service import ArrivalModel
from services.service_laws import ServiceLaw
from utils.base_service import BaseService, log_stage
from utils.errors import DegenerateService, MassDeficit, NoConvergence, SingularSystem
from utils.linalg import stationary_vector
from utils.models import StationarySummary, WorkloadSolution

logger = logging.getLogger(__name__)

Q_TOL = 1e-13
G_TOL = 1e-14
FD_STEPS = tuple(1e-3 / 2 ** j for j in range(5))
STALL = 1e-16


class Mg1Chain:
    """
    Level-skip-free chain with blocks B_0 = I + (C + D^(0))/theta and
    B_m = D^(m)/theta; level 0 moves to level j with B_0 + B_1 (j = 0) or
    B_{j+1} (j >= 1).
    """

    def __init__(self, B: np.ndarray):
        self.B = B
        self.G = None
        self.Bbar = None

    @classmethod
    def from_coefficients(cls, model: ArrivalModel, coefficients: Coefficients) -> 'Mg1Chain':
        B = coefficients.D / coefficients.theta
        B[0] += np.eye(model.env_dim) + model.C / coefficients.theta
        return cls(B)

    @property
    def m_B(self) -> int:
        return self.B.shape[0] - 1

    def _sum_powers(self, G: np.ndarray, first: int) -> np.ndarray:
        """sum_{m >= first} B_m G^{m - first} by Horner."""
        S = self.B[-1].copy()
        for m in range(self.m_B - 1, first - 1, -1):
            S = self.B[m] + S @ G
        return S

    def solve_G(self, method: str = "natural", tol: float = G_TOL, max_sweeps: int = 100000) -> np.ndarray:
        size = self.B.shape[1]
        G = np.zeros((size, size))
        change = np.inf
        for sweep in range(1, max_sweeps + 1):
            if method == "u_based":
                U = self._sum_powers(G, 1) if self.m_B >= 1 else np.zeros_like(G)
                nxt = linalg.solve(np.eye(size) - U, self.B[0])
            else:
                nxt = self._sum_powers(G, 0)
            change = float(np.max(np.abs(nxt - G)))
            G = nxt
            if change < tol:
                logger.debug(f"G ({method}) converged in {sweep} sweeps")
                break
        else:
            raise NoConvergence(f"G iteration ({method})", max_sweeps, change)
        rows = G.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-10:
            logger.warning(f"G row sums deviate from 1 by {np.max(np.abs(rows - 1.0)):.3e}")
        self.G = G
        self._build_bbar()
        return G

    def _build_bbar(self):
        """Bbar_j = sum_{l >= j} B_l G^{l - j}, j = 0..m_B (zero beyond)."""
        Bbar = np.zeros((self.m_B + 2,) + self.B.shape[1:])
        Bbar[self.m_B] = self.B[self.m_B]
        for j in range(self.m_B - 1, -1, -1):
            Bbar[j] = self.B[j] + Bbar[j + 1] @ self.G
        self.Bbar = Bbar

    def boundary_vector(self) -> np.ndarray:
        """Stationary vector of the censored boundary matrix B_0 + Bbar_1, summing to 1."""
        K = self.B[0] + self.Bbar[1]
        return stationary_vector(K - np.eye(K.shape[0]))

    def iter_levels(self, x0: np.ndarray) -> Iterator[np.ndarray]:
        """x_i = (sum_{j<i} x_j Bbar_{i+1-j}) (I - Bbar_1)^{-1}"""
        size = len(x0)
        lu = linalg.lu_factor(np.eye(size) - self.Bbar[1])
        xs = [np.asarray(x0, dtype=float)]
        yield xs[0]
        i = 1
        while True:
            j0 = max(0, i + 1 - self.m_B)
            if j0 < i:
                acc = np.einsum('jm,jmn->n', np.asarray(xs[j0:i]), self.Bbar[i + 1 - j0:1:-1])
            else:
                acc = np.zeros(size)
            x = linalg.lu_solve(lu, acc, trans=1)
            xs.append(x)
            yield x
            i += 1


class WorkloadService(BaseService):
    def __init__(self, model: ArrivalModel, services: Sequence[ServiceLaw], summary: StationarySummary,
                 coefficients: Coefficients, max_sweeps: int = None, m_limit: int = None):
        super().__init__()
        self.model = model
        self.services = list(services)
        self.summary = summary
        self.coefficients = coefficients
        self.theta = coefficients.theta
        if max_sweeps is not None:
            self.max_sweeps = max_sweeps
        if m_limit is not None:
            self.m_limit = m_limit
        self.Q = None
        self.kappa = None
        self.chain = None

    @log_stage("Q fixed point")
    def compute_Q_kappa(self, tol: float = Q_TOL) -> Tuple[np.ndarray, np.ndarray]:
        """
        Q <- C + sum_m D^(m)(theta) (I + Q/theta)^m from Q = C.

        Returns:
            (Q, kappa) with kappa Q = 0, kappa e = 1
        """
        C, D = self.model.C, self.coefficients.D
        eye = np.eye(self.model.env_dim)
        Q = C.copy()
        change = np.inf
        for sweep in range(1, self.max_sweeps + 1):
            T = eye + Q / self.theta
            S = D[-1].copy()
            for m in range(D.shape[0] - 2, -1, -1):
                S = D[m] + S @ T
            nxt = C + S
            change = float(np.max(np.abs(nxt - Q)))
            Q = nxt
            if change < tol:
                logger.info(f"Q converged in {sweep} sweeps")
                break
        else:
            raise NoConvergence("Q fixed point", self.max_sweeps, change)
        self.Q = Q
        self.kappa = stationary_vector(Q)
        return Q, self.kappa

    @property
    def v0(self) -> np.ndarray:
        return (1.0 - self.summary.rho) * self.kappa

    def _require_kappa(self):
        if self.kappa is None:
            self.compute_Q_kappa()

    def build_chain(self, method: str = "natural") -> Mg1Chain:
        chain = Mg1Chain.from_coefficients(self.model, self.coefficients)
        chain.solve_G(method=method, max_sweeps=self.max_sweeps)
        self.chain = chain
        return chain

    def iter_v_series(self) -> Iterator[np.ndarray]:
        """v^(m)(theta), m = 0, 1, ..., with v^(0)(theta) = v*(theta)."""
        if self.chain is None:
            self.build_chain()
        x0 = self.chain.boundary_vector()
        target = self.solve_v_lst(self.theta)
        x0 = x0 * (target.sum() / x0.sum())
        logger.debug(f"boundary vector vs v*(theta): {np.max(np.abs(x0 - target)):.3e}")
        return self.chain.iter_levels(x0)

    @log_stage("workload series")
    def solve_v_series(self, stop: Optional[Callable[[int, np.ndarray], bool]] = None,
                       mass_tol: float = 1e-10) -> Tuple[np.ndarray, float]:
        """
        Emit v^(m)(theta) until `stop(m, partial_sum)` holds (default: mass within mass_tol of 1).

        The series also ends once a term no longer moves the partial sum; the
        remaining deficit is then logged and returned as the residual.

        Returns:
            (array of shape (m + 1, M), residual 1 - sum_m v^(m) e)
        """
        if stop is None:
            def stop(m, partial):
                return partial.sum() >= 1.0 - mass_tol
        series = []
        partial = np.zeros(self.model.env_dim)
        for m, v in enumerate(self.iter_v_series()):
            series.append(v)
            partial = partial + v
            if stop(m, partial):
                break
            if m > 0 and v.sum() <= STALL * partial.sum():
                logger.warning(f"workload series stalled at mass {partial.sum():.15g} after {m + 1} terms")
                break
            if m >= self.m_limit:
                raise MassDeficit(
                    f"workload series holds {partial.sum():.15g} of its mass after {m + 1} terms"
                )
        return np.asarray(series), float(1.0 - partial.sum())

    def _batch_factor(self, k: int, z: float) -> float:
        return self.model.batches[k].pgf_factor(z)

    def solve_v_lst(self, s: float) -> np.ndarray:
        """v*(s) from v*(s)[sI + C + D*(s)] = s (1 - rho) kappa."""
        if not s > 0.0:
            raise SingularSystem(f"v*(s) is only solved for s > 0, got s={s}")
        self._require_kappa()
        Dstar = sum(self._batch_factor(k, svc.lst(s)) * D
                    for k, (svc, D) in enumerate(zip(self.services, self.model.D_list)))
        A = s * np.eye(self.model.env_dim) + self.model.C + Dstar
        try:
            return linalg.solve(A.T, s * (1.0 - self.summary.rho) * self.kappa)
        except linalg.LinAlgError as e:
            raise SingularSystem(f"sI + C + D*(s) is singular at s={s}: {str(e)}") from e

    def waiting_lst(self, k: int, s: float) -> np.ndarray:
        """w_k*(s) = v*(s)(D_k - D_k*(H_k*(s))) / (lambda_k (1 - H_k*(s)))"""
        H = self.services[k].lst(s)
        if not H < 1.0:
            raise DegenerateService(f"H_{k + 1}*({s}) = 1; use mean_waiting for the s -> 0 limit")
        v = self.solve_v_lst(s)
        shortfall = 1.0 - self._batch_factor(k, H)
        return v @ self.model.D_list[k] * shortfall / (self.summary.lambda_k[k] * (1.0 - H))

    @log_stage("mean workload")
    def mean_workload(self) -> np.ndarray:
        """
        v1bar = -dv*/ds at 0.

        First order in s: v1bar (C + D) = pi (I - Lambda) - (1 - rho) kappa with
        Lambda = sum_k E[G_k] h_k D_k; v1bar = y + c pi where y e = 0 and the
        second-order relation fixes c = (pi Psi e / 2 + y Lambda e) / (1 - rho).
        """
        self._require_kappa()
        pi, rho = self.summary.pi, self.summary.rho
        size = self.model.env_dim
        Lam = np.zeros((size, size))
        Psi = np.zeros((size, size))
        for svc, D, batch in zip(self.services, self.model.D_list, self.model.batches):
            Lam += batch.mean * svc.mean * D
            Psi += (batch.mean * svc.second_moment + batch.factorial_moment * svc.mean ** 2) * D
        rhs = pi - pi @ Lam - (1.0 - rho) * self.kappa
        # y (C + D - e pi) = rhs forces y e = 0
        system = self.model.generator - np.outer(np.ones(size), pi)
        try:
            y = linalg.solve(system.T, rhs)
        except linalg.LinAlgError as e:
            raise SingularSystem(f"mean-workload system is singular: {str(e)}") from e
        c = (0.5 * pi @ Psi.sum(axis=1) + y @ Lam.sum(axis=1)) / (1.0 - rho)
        v1bar = y + c * pi

        check = self.finite_difference_v1bar()
        gap = float(np.max(np.abs(check - v1bar)))
        if gap > 1e-4 * max(1.0, float(v1bar.sum())):
            logger.warning(f"mean workload {v1bar.tolist()} differs from finite differences by {gap:.3e}")
        logger.info(f"E[V] = {v1bar.sum():.10g}")
        return v1bar

    def finite_difference_v1bar(self, steps: Sequence[float] = FD_STEPS) -> np.ndarray:
        """
        Richardson-extrapolated (pi - v*(s)) / s over halving steps.

        The quotient has a power series in s, so level j removes the s^j term
        with the factor 2^j.
        """
        pi = self.summary.pi
        table = [(pi - self.solve_v_lst(h)) / h for h in steps]
        order = 1
        while len(table) > 1:
            factor = 2.0 ** order
            table = [(factor * table[i + 1] - table[i]) / (factor - 1.0) for i in range(len(table) - 1)]
            order += 1
        return table[0]

    def mean_waiting(self, k: int, v1bar: np.ndarray) -> float:
        """E[W_k] = v1bar D_k e / lambda_k^B + h_k E[G_k (G_k - 1)] / (2 E[G_k])"""
        batch = self.model.batches[k]
        seen = float(v1bar @ self.model.D_list[k].sum(axis=1)) / self.summary.lambda_k_B[k]
        ahead = self.services[k].mean * batch.factorial_moment / (2.0 * batch.mean)
        return seen + ahead

    def little_means(self, v1bar: np.ndarray) -> np.ndarray:
        """lambda_k (E[W_k] + h_k) per class."""
        return np.array([
            self.summary.lambda_k[k] * (self.mean_waiting(k, v1bar) + self.services[k].mean)
            for k in range(self.model.K)
        ])

    def solve(self, g_method: str = "natural", mass_tol: float = 1e-10) -> WorkloadSolution:
        Q, kappa = self.compute_Q_kappa()
        chain = self.build_chain(g_method)
        series, residual = self.solve_v_series(mass_tol=mass_tol)
        v1bar = self.mean_workload()
        return WorkloadSolution(Q=Q, kappa=kappa, v0=self.v0, v_series=series,
                                v_residual=residual, v1bar=v1bar, G=chain.G)
