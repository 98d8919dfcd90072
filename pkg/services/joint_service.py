"""
Joint queue-length engine.

Streams the uniformized coefficient matrices F_m(n) level by level, folds
them into the per-class arrival-during-service fields A_k(n) and the
arrival-seen-by-batch fields v_k(n), builds the batch resolvents Gamma_k(n),
then the departure-epoch vectors q_k(n) and the time-average vectors p(n).
In total mode every class index collapses onto one axis and the same code
yields the distribution of the total number in system.
"""
import logging
from dataclasses import dataclass
from itertools import product
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from config.settings import settings
from services.model_service import ArrivalModel, ModelService, PhBatch
from services.service_laws import ServiceLaw
from services.workload_service import WorkloadService
from utils.base_service import BaseService, log_stage
from utils.errors import BudgetExceeded, MassDeficit, NegativeMass, SingularResolvent, UsageError
from utils.fields import MultiIndexField, box, level_cells, simplex_size
from utils.linalg import kron_resolvent
from utils.models import EngineOptions, ErrorBoundReport, JointResult, StationarySummary, TruncationLedger

logger = logging.getLogger(__name__)

NEGATIVE_TOL = -1e-8
TAIL_LEVELS = 10
TAIL_RATIO_LIMIT = 0.999
TAIL_NEGLIGIBLE = 1e-13
SWEEP_PAIRS = 1 << 20


def decay_weights(eps_F: float, length: int) -> np.ndarray:
    """(1 - eps_F)^m for m = 0..length-1"""
    return np.exp(np.arange(length) * np.log1p(-eps_F))


def minimal_cutoff(terms: np.ndarray, eps_F: float, target) -> Optional[int]:
    """Smallest m with sum_{l<=m} terms[l] (1 - eps_F)^l > target, entrywise for row terms."""
    terms = np.asarray(terms, dtype=float)
    w = decay_weights(eps_F, len(terms)).reshape((-1,) + (1,) * (terms.ndim - 1))
    ok = np.cumsum(terms * w, axis=0) > target
    if terms.ndim > 1:
        ok = ok.all(axis=1)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if len(hits) else None


def choose_cutoffs(model: ArrivalModel, services: Sequence[ServiceLaw], summary: StationarySummary,
                   v1bar: np.ndarray, v_levels: Iterator[np.ndarray], eps: float,
                   eps_F: float = None, eps_g: float = None, n_cap: int = None,
                   m_limit: int = None) -> Tuple[TruncationLedger, List[np.ndarray], np.ndarray]:
    """
    eps_F, eps_g and the level cutoffs m_gamma(k), m_v(k).

    Returns:
        (ledger without batch cuts, gamma^(0..m_gamma(k)) per class, v^(0..max m_v)(theta))
    """
    theta = summary.theta
    m_limit = settings.MBMAPQ_M_LIMIT if m_limit is None else m_limit
    n_cap = settings.MBMAPQ_NP if n_cap is None else n_cap
    limits = []
    for k, (svc, D) in enumerate(zip(services, model.D_list)):
        seen = theta * float(v1bar @ D.sum(axis=1))
        limits.append(min(1.0 / (theta * svc.mean),
                          summary.lambda_k_B[k] / seen if seen > 0.0 else np.inf))
    bound = eps * min(limits)
    eps_F = 0.5 * bound if eps_F is None else eps_F
    eps_g = eps_F / 10.0 if eps_g is None else eps_g
    if not 0.0 < eps_F < bound:
        raise UsageError(f"eps_F must lie in (0, {bound:.6g}), got {eps_F}")
    if not 0.0 < eps_g < eps_F:
        raise UsageError(f"eps_g must lie in (0, eps_F = {eps_F:.6g}), got {eps_g}")

    gammas, m_gamma = [], []
    for k, svc in enumerate(services):
        cap = 64
        while True:
            terms = svc.gamma_terms(theta, cap)
            m = minimal_cutoff(terms, eps_F, 1.0 - eps)
            if m is not None:
                break
            if cap >= m_limit:
                raise MassDeficit(f"class {k + 1}: gamma series misses the 1 - eps target within {cap} terms")
            cap = min(2 * cap, m_limit)
        gammas.append(terms[:m + 1])
        m_gamma.append(m)

    De = np.stack([D.sum(axis=1) for D in model.D_list], axis=1)
    target = (1.0 - eps) * summary.lambda_k_B
    log_decay = np.log1p(-eps_F)
    m_v = [None] * model.K
    cum = np.zeros(model.K)
    series = []
    for m, v in enumerate(v_levels):
        series.append(v)
        cum += np.exp(m * log_decay) * (v @ De)
        for k in range(model.K):
            if m_v[k] is None and cum[k] > target[k]:
                m_v[k] = m
        if all(x is not None for x in m_v):
            break
        if m >= m_limit:
            raise MassDeficit(f"workload series misses the (1 - eps) lambda_B target after {m + 1} terms")

    ledger = TruncationLedger(eps=eps, eps_F=eps_F, eps_g=eps_g, m_gamma=m_gamma, m_v=m_v, n_g=[], N_p=n_cap)
    logger.info(f"eps_F = {eps_F:.4e}, eps_g = {eps_g:.4e}, m_gamma = {m_gamma}, m_v = {m_v}")
    return ledger, gammas, np.asarray(series)


def choose_batch_cut(model: ArrivalModel, theta: float, eps_g: float, n_cap: int = None) -> List[int]:
    """Minimal n_g(k) with alpha P^n e D_k e < theta eps_g / K entrywise, capped at N_p."""
    limit = n_cap if n_cap is not None else settings.MBMAPQ_M_LIMIT
    threshold = theta * eps_g / model.K
    cuts = []
    for batch, D in zip(model.batches, model.D_list):
        De = D.sum(axis=1)
        row = batch.alpha @ batch.P
        n = 1
        while True:
            residual = float(row.sum())
            if residual == 0.0 or np.all(residual * De < threshold) or n >= limit:
                break
            n += 1
            row = row @ batch.P
        cuts.append(n)
    return cuts


@dataclass
class FLevel:
    m: int
    field: MultiIndexField
    n_star: int
    bound: int
    cap_hit: bool


def iter_F_levels(model: ArrivalModel, theta: float, m_max: int, eps_F: float, n_g: Sequence[int],
                  n_cap: int, axis_of: Sequence[int] = None, budget: int = None) -> Iterator[FLevel]:
    """
    Truncated F_m(n), m = 0..m_max; only the current level is held.

    F_m(n) = F_{m-1}(n)(I + C/theta) + sum_k sum_l g_k(l) F_{m-1}(n - l e_k) D_k / theta,
    computed for |n| <= min(n_F^(m-1) + n_F^(1), N_p) and cut at the smallest n* whose
    cumulative row mass exceeds (1 - eps_F)^m. With eps_F = 0 nothing is cut.
    """
    M = model.env_dim
    axis_of = list(range(model.K)) if axis_of is None else list(axis_of)
    ndim = max(axis_of) + 1
    step = np.eye(M) + model.C / theta
    scaled = [D / theta for D in model.D_list]
    g = [b.pmf_terms(n) for b, n in zip(model.batches, n_g)]

    F = MultiIndexField(ndim, (M, M), 0, budget)
    F.data[(0,) * ndim] = np.eye(M)
    yield FLevel(0, F, 0, 0, False)

    n_first = None
    for m in range(1, m_max + 1):
        reach = max(n_g) if n_first is None else F.extent + n_first
        bound = min(reach, n_cap)
        prev = F.extent
        new = MultiIndexField(ndim, (M, M), bound, budget)
        new.data[box(prev, ndim)] = F.data @ step
        for k, axis in enumerate(axis_of):
            top = min(n_g[k], bound)
            conv = np.zeros(new.data.shape)
            for l in range(1, top + 1):
                if g[k][l] == 0.0:
                    continue
                hi = min(prev, bound - l)
                dst, src = list(box(prev, ndim)), list(box(prev, ndim))
                dst[axis], src[axis] = slice(l, l + hi + 1), slice(0, hi + 1)
                conv[tuple(dst)] += g[k][l] * F.data[tuple(src)]
            new.data += conv @ scaled[k]
        new.truncate(bound)

        cum = np.cumsum(new.level_sums().sum(axis=-1), axis=0)
        hits = np.flatnonzero(np.all(cum > (1.0 - eps_F) ** m, axis=1)) if eps_F > 0.0 else []
        if len(hits):
            n_star, cap_hit = int(hits[0]), False
        else:
            n_star, cap_hit = bound, eps_F > 0.0 and reach > n_cap
        if n_star < bound:
            new = new.crop(n_star)
        if n_first is None:
            n_first = n_star
        F = new
        yield FLevel(m, F, n_star, bound, cap_hit)


def _kernel(batch: PhBatch, A: MultiIndexField) -> Tuple[np.ndarray, np.ndarray]:
    """Cells l with 0 < |l| and A(l) != 0, with the blocks P (x) A(l)."""
    size = batch.order * A.block_shape[-1]
    if batch.is_single:
        return np.zeros((0, A.ndim), dtype=int), np.zeros((0, size, size))
    levels = A.levels()
    nonzero = np.any(A.data.reshape(levels.shape + (-1,)) != 0.0, axis=-1) & (levels > 0)
    cells = np.argwhere(nonzero)
    blocks = A.data[tuple(cells.T)]
    kron = np.einsum('ab,lij->laibj', batch.P, blocks).reshape(len(cells), size, size)
    return cells, kron


def resolvent_sweep(ndim: int, block_shape: Tuple[int, int], seed: Callable[[int, tuple], np.ndarray],
                    cells_l: np.ndarray, blocks_l: np.ndarray, gamma0: np.ndarray, upto: int,
                    budget: int = None,
                    stop: Callable[[int, np.ndarray], bool] = None) -> Tuple[MultiIndexField, int, bool]:
    """
    Y(n) = [seed(n) + sum_{0 < |l|} Y(n - l) B(l)] Gamma(0), level by level up to `upto`.

    Returns:
        (field, last level computed, whether `stop` fired)
    """
    out = MultiIndexField(ndim, block_shape, upto, budget)
    level_of_l = cells_l.sum(axis=1) if len(cells_l) else np.zeros(0, dtype=int)
    for L in range(upto + 1):
        cells = level_cells(ndim, L)
        acc = np.array(seed(L, cells), dtype=float)
        use = level_of_l <= L
        if L > 0 and use.any():
            shifts, blocks = cells_l[use], blocks_l[use]
            points = np.stack(cells, axis=1)
            chunk = max(1, SWEEP_PAIRS // len(points))
            for lo in range(0, len(shifts), chunk):
                part = shifts[lo:lo + chunk]
                diff = points[:, None, :] - part[None, :, :]
                ci, li = np.nonzero(np.all(diff >= 0, axis=2))
                if not len(ci):
                    continue
                prod = out.data[tuple(diff[ci, li].T)] @ blocks[lo + li]
                first, starts = np.unique(ci, return_index=True)
                acc[first] += np.add.reduceat(prod, starts, axis=0)
        level = acc @ gamma0
        out.data[cells] = level
        if stop is not None and stop(L, level):
            return out.crop(L), L, True
    return out, upto, False


def gamma_field(batch: PhBatch, A: MultiIndexField, eps: float, n_cap: int,
                budget: int = None) -> Tuple[MultiIndexField, int, bool, np.ndarray]:
    """
    Coefficients of [I - P (x) A*(z)]^{-1}, computed until the accumulated row mass reaches
    (I - P)^{-1} e (x) e - eps (I - P)^{-2} P e (x) e.

    Returns:
        (Gamma field, n_Gamma, cap_limited, Gamma(0))
    """
    M = A.block_shape[0]
    size = batch.order * M
    try:
        gamma0 = kron_resolvent(batch.P, A.data[(0,) * A.ndim])
    except linalg.LinAlgError as e:
        raise SingularResolvent(f"I - P (x) A(0) is singular: {str(e)}") from e
    if not np.all(np.isfinite(gamma0)):
        raise SingularResolvent("I - P (x) A(0) is singular")
    if batch.is_single:
        field = MultiIndexField(A.ndim, (size, size), 0, budget)
        field.data[(0,) * A.ndim] = gamma0
        return field, 0, False, gamma0

    N = batch.fundamental
    target = (np.kron(N.sum(axis=1), np.ones(M))
              - eps * np.kron(N @ N @ batch.P.sum(axis=1), np.ones(M)))
    cum = np.zeros(size)

    def seed(L, cells):
        acc = np.zeros((len(cells[0]), size, size))
        if L == 0:
            acc[0] = np.eye(size)
        return acc

    def reached(L, level):
        cum[:] += level.sum(axis=(0, 2))
        return bool(np.all(cum >= target))

    cells_l, blocks_l = _kernel(batch, A)
    field, n_gamma, stopped = resolvent_sweep(A.ndim, (size, size), seed, cells_l, blocks_l, gamma0,
                                              n_cap, budget, stop=reached)
    return field, n_gamma, not stopped, gamma0


def convolve_rows(rows: MultiIndexField, mats: MultiIndexField, upto: int,
                  budget: int = None) -> MultiIndexField:
    """(rows * mats)(n) = sum_l rows(n - l) mats(l) over |n| <= upto."""
    ndim = rows.ndim
    out = MultiIndexField(ndim, rows.block_shape, upto, budget)
    levels = mats.levels()
    nonzero = np.any(mats.data.reshape(levels.shape + (-1,)) != 0.0, axis=-1) & (levels <= upto)
    for l in map(tuple, np.argwhere(nonzero)):
        reach = [min(rows.extent, upto - li) for li in l]
        if min(reach) < 0:
            continue
        src = tuple(slice(0, r + 1) for r in reach)
        dst = tuple(slice(li, li + r + 1) for li, r in zip(l, reach))
        out.data[dst] += rows.data[src] @ mats.data[l]
    out.truncate(upto)
    return out


def assemble_q(batch: PhBatch, lam: float, v: MultiIndexField, A: MultiIndexField, gamma0: np.ndarray,
               axis: int, n_cap: int, budget: int = None) -> MultiIndexField:
    """
    q_k(n) = (1/lambda_k) sum_m [Y(. - m e_k)]_n [P^m (I - P) e (x) I], where
    Y = (alpha (x) (v_k * A_k)) * Gamma_k is obtained from the resolvent recursion.
    """
    ndim, M = v.ndim, v.block_shape[0]
    size = batch.order * M
    U = convolve_rows(v, A, n_cap, budget)
    X = np.einsum('a,...j->...aj', batch.alpha, U.data).reshape(U.data.shape[:ndim] + (1, size))
    cells_l, blocks_l = _kernel(batch, A)
    Y, _, _ = resolvent_sweep(ndim, (1, size), lambda L, cells: X[cells], cells_l, blocks_l, gamma0,
                              n_cap, budget)

    T = Y.data.reshape(Y.data.shape[:ndim] + (batch.order, M))
    if not batch.is_single:
        T = T.copy()
        PT = batch.P.T
        for i in range(1, n_cap + 1):
            here = [slice(None)] * ndim
            back = [slice(None)] * ndim
            here[axis], back[axis] = i, i - 1
            T[tuple(here)] += PT @ T[tuple(back)]
    q = MultiIndexField(ndim, (M,), n_cap, budget)
    q.data[...] = np.einsum('a,...am->...m', batch.exit_vector, T) / lam
    q.truncate(n_cap)
    return q


def assemble_q_direct(batch: PhBatch, lam: float, v: MultiIndexField, A: MultiIndexField,
                      Gamma: MultiIndexField, axis: int, upto: int) -> MultiIndexField:
    """Explicit triple convolution sum_m sum_{n1+n2+n3 = n - m e_k}; small fields only."""
    ndim, M = v.ndim, v.block_shape[0]
    cols = []
    row = batch.exit_vector.copy()
    for m in range(upto + 1):
        cols.append(row)
        row = batch.P @ row
    out = MultiIndexField(ndim, (M,), upto)
    for n, _ in out.items():
        total = np.zeros(M)
        for m in range(n[axis] + 1):
            rest = tuple(c - (m if i == axis else 0) for i, c in enumerate(n))
            for n1 in product(*(range(r + 1) for r in rest)):
                v1 = v.get(n1)
                if not v1.any():
                    continue
                left = tuple(r - a for r, a in zip(rest, n1))
                for n2 in product(*(range(r + 1) for r in left)):
                    n3 = tuple(r - b for r, b in zip(left, n2))
                    Y = np.kron(batch.alpha, v1 @ A.get(n2)) @ Gamma.get(n3)
                    total += cols[m] @ Y.reshape(batch.order, M)
        out.data[n] = total / lam
    return out


def _gather_back(data: np.ndarray, cells: tuple, axis: int) -> np.ndarray:
    """Values at n - e_axis for the given cells; zero where n_axis = 0."""
    ok = cells[axis] >= 1
    out = np.zeros((len(cells[0]),) + data.shape[len(cells):])
    if ok.any():
        src = tuple(c[ok] - (1 if i == axis else 0) for i, c in enumerate(cells))
        out[ok] = data[src]
    return out


def assemble_p(model: ArrivalModel, summary: StationarySummary, q: Sequence[MultiIndexField],
               axis_of: Sequence[int], n_cap: int, budget: int = None) -> MultiIndexField:
    """
    p(n)(-C) = sum_k [lambda_k (q_k(n) - q_k(n - e_k)) + sum_m p(n - m e_k) g_k(m) D_k],
    with the batch sums carried by R_k(n) = p(n - e_k) (x) alpha + R_k(n - e_k)(I (x) P).
    """
    M = model.env_dim
    ndim = q[0].ndim
    lu = linalg.lu_factor(-model.C)
    p = MultiIndexField(ndim, (M,), n_cap, budget)
    R = [MultiIndexField(ndim, (M, b.order), n_cap, budget) for b in model.batches]
    lam = summary.lambda_k
    for L in range(n_cap + 1):
        cells = level_cells(ndim, L)
        rhs = np.zeros((len(cells[0]), M))
        for k, axis in enumerate(axis_of):
            rhs += lam[k] * (q[k].data[cells] - _gather_back(q[k].data, cells, axis))
        if L > 0:
            for k, (axis, batch, D) in enumerate(zip(axis_of, model.batches, model.D_list)):
                carried = (_gather_back(p.data, cells, axis)[:, :, None] * batch.alpha[None, None, :]
                           + _gather_back(R[k].data, cells, axis) @ batch.P)
                R[k].data[cells] = carried
                rhs += (carried @ batch.exit_vector) @ D
        values = linalg.lu_solve(lu, rhs.T, trans=1).T
        worst = np.unravel_index(np.argmin(values), values.shape)
        if values[worst] < NEGATIVE_TOL:
            raise NegativeMass(tuple(int(c[worst[0]]) for c in cells), float(values[worst]))
        p.data[cells] = values
    return p


def fit_tail(masses: np.ndarray, levels: int = TAIL_LEVELS) -> Tuple[float, Optional[float], Optional[str]]:
    """
    Geometric tail beyond the last level from a log-linear fit of the last level masses.

    Returns:
        (tail contribution to E[N], fitted ratio, flag)
    """
    N = len(masses) - 1
    last = masses[-levels:]
    if N < levels or last.max() <= TAIL_NEGLIGIBLE:
        return 0.0, None, None
    positive = last > 0.0
    if positive.sum() < 3:
        return 0.0, None, None
    x = np.arange(N - len(last) + 1, N + 1)[positive]
    slope = np.polyfit(x, np.log(last[positive]), 1)[0]
    r = float(np.exp(slope))
    if r >= TAIL_RATIO_LIMIT:
        return 0.0, r, "unbounded-tail"
    m_N = float(masses[-1])
    return m_N * (N * r / (1.0 - r) + r / (1.0 - r) ** 2), r, None


def level_masses(p: MultiIndexField) -> np.ndarray:
    return p.level_sums().sum(axis=-1)


def marginals(p: MultiIndexField) -> List[np.ndarray]:
    """P(N_k = n) per axis."""
    rows = p.data.sum(axis=-1)
    return [rows.sum(axis=tuple(i for i in range(p.ndim) if i != a)) for a in range(p.ndim)]


def ccdf(masses: np.ndarray) -> np.ndarray:
    """P(N > n) from level masses."""
    return 1.0 - np.cumsum(masses)


class JointEngine(BaseService):
    def __init__(self, model: ArrivalModel, services: Sequence[ServiceLaw], summary: StationarySummary,
                 workload: WorkloadService, v1bar: np.ndarray, options: EngineOptions = None):
        super().__init__()
        self.model = model
        self.services = list(services)
        self.summary = summary
        self.workload = workload
        self.v1bar = v1bar
        self.options = options or EngineOptions()
        self.theta = summary.theta
        self.budget = self.options.field_budget
        if self.options.mode == "joint":
            self.axis_of = list(range(model.K))
        else:
            self.axis_of = [0] * model.K

    @log_stage("cutoffs")
    def choose_cutoffs(self) -> Tuple[TruncationLedger, List[np.ndarray], np.ndarray]:
        opts = self.options
        ledger, gammas, v_series = choose_cutoffs(
            self.model, self.services, self.summary, self.v1bar, self.workload.iter_v_series(),
            opts.eps, opts.eps_F, opts.eps_g, opts.n_cap, opts.m_limit)
        ledger.n_g = choose_batch_cut(self.model, self.theta, ledger.eps_g, opts.n_cap)
        logger.info(f"batch cuts n_g = {ledger.n_g}")
        return ledger, gammas, v_series

    @log_stage("F accumulation")
    def run_F_accumulation(self, ledger: TruncationLedger, gammas: List[np.ndarray],
                           v_series: np.ndarray) -> Tuple[List[MultiIndexField], List[MultiIndexField]]:
        """Fold gamma_k^(m) F_m into A_k and v^(m) D_k F_m into v_k, level by level."""
        K, M = self.model.K, self.model.env_dim
        ndim = max(self.axis_of) + 1
        A = [MultiIndexField(ndim, (M, M), 0, self.budget) for _ in range(K)]
        v = [MultiIndexField(ndim, (M,), 0, self.budget) for _ in range(K)]
        n_A, n_v = [0] * K, [0] * K
        previous = 1
        for level in iter_F_levels(self.model, self.theta, ledger.m_max, ledger.eps_F, ledger.n_g,
                                   ledger.N_p, self.axis_of, self.budget):
            m, F, n_star = level.m, level.field, level.n_star
            if m > 1 and n_star > ledger.n_F[-1] + ledger.n_F[1]:
                raise MassDeficit(f"level growth violated at m = {m}: {n_star} > "
                                  f"{ledger.n_F[-1]} + {ledger.n_F[1]}")
            ledger.n_F.append(n_star)
            if level.cap_hit:
                ledger.cap_hit_levels.append(m)
            cells = simplex_size(ndim, n_star)
            ledger.F_entries_computed += cells
            ledger.F_entries_peak_stored = max(ledger.F_entries_peak_stored, previous + cells)
            previous = cells
            region = box(n_star, ndim)
            for k in range(K):
                if m <= ledger.m_gamma[k]:
                    A[k].grow(n_star)
                    A[k].data[region] += gammas[k][m] * F.data
                    n_A[k] = max(n_A[k], n_star)
                if m <= ledger.m_v[k]:
                    row = v_series[m] @ self.model.D_list[k]
                    v[k].grow(n_star)
                    v[k].data[region] += np.einsum('i,...ij->...j', row, F.data)
                    n_v[k] = max(n_v[k], n_star)
            if m and m % 50 == 0:
                logger.info(f"F level {m}/{ledger.m_max}: n* = {n_star}, {ledger.F_entries_computed} entries")
        ledger.n_A, ledger.n_v = n_A, n_v
        if ledger.cap_hit_levels:
            logger.warning(f"N_p = {ledger.N_p} bound the F cutoff at {len(ledger.cap_hit_levels)} levels")
        return A, v

    @log_stage("batch resolvents")
    def gamma_fields(self, ledger: TruncationLedger,
                     A: List[MultiIndexField]) -> Tuple[List[MultiIndexField], List[np.ndarray], bool]:
        fields, gamma0s, capped = [], [], False
        for k, batch in enumerate(self.model.batches):
            field, n_gamma, cap, gamma0 = gamma_field(batch, A[k], ledger.eps, ledger.N_p, self.budget)
            fields.append(field)
            gamma0s.append(gamma0)
            ledger.n_Gamma.append(n_gamma)
            capped = capped or cap
        return fields, gamma0s, capped

    def check_error_bounds(self, ledger: TruncationLedger, A, v, Gamma, gamma_capped: bool) -> ErrorBoundReport:
        eps = ledger.eps
        report = ErrorBoundReport()
        for k, batch in enumerate(self.model.batches):
            a_mass = A[k].total().sum(axis=-1)
            report.A_mass.append(a_mass.tolist())
            report.checks[f"A{k + 1}_mass"] = bool(np.all(a_mass > 1.0 - eps))
            v_mass = float(v[k].total().sum())
            report.v_mass.append(v_mass)
            report.checks[f"v{k + 1}_mass"] = bool(v_mass > (1.0 - eps) * self.summary.lambda_k_B[k])

            M = self.model.env_dim
            N = batch.fundamental
            g_mass = Gamma[k].total().sum(axis=-1)
            target = (np.kron(N.sum(axis=1), np.ones(M))
                      - eps * np.kron(N @ N @ batch.P.sum(axis=1), np.ones(M)))
            ok = bool(np.all(g_mass >= target - 1e-12))
            report.Gamma_mass_ok.append(ok)
            report.checks[f"Gamma{k + 1}_mass"] = ok
            seen = float(np.kron(batch.alpha, self.summary.pi) @ g_mass)
            report.batch_mean_bound.append(seen)
            report.checks[f"G{k + 1}_mean"] = bool(seen >= batch.mean - 0.5 * batch.factorial_moment * eps - 1e-12)
        report.cap_limited = bool(ledger.cap_hit_levels) or gamma_capped
        if not report.passed:
            if report.cap_limited:
                logger.warning(f"error bounds {report.failed()} missed because N_p = {ledger.N_p} binds")
            else:
                raise MassDeficit(f"error bounds failed: {report.failed()}")
        return report

    def _diagnose(self, ledger: TruncationLedger):
        reference = self.model.reference.get("F_entries_computed")
        if not reference:
            return
        ratio = ledger.F_entries_computed / float(reference)
        if not 0.1 <= ratio <= 10.0:
            logger.warning(f"computed {ledger.F_entries_computed} F entries, reference {reference:.4g}")
        else:
            logger.info(f"F entries {ledger.F_entries_computed} vs reference {reference:.4g}")

    @log_stage("joint engine")
    def run(self) -> JointResult:
        """
        Full pipeline: cutoffs, F accumulation, Gamma, q, p and the means.

        Returns:
            JointResult: q_k and p fields with E[N_k], E[N], tail estimate, ledger and bound report
        """
        ModelService.require_joint_ready(self.model)
        ledger, gammas, v_series = self.choose_cutoffs()
        try:
            A, v = self.run_F_accumulation(ledger, gammas, v_series)
            Gamma, gamma0s, gamma_capped = self.gamma_fields(ledger, A)
            bounds = self.check_error_bounds(ledger, A, v, Gamma, gamma_capped)
            q = []
            for k, batch in enumerate(self.model.batches):
                q.append(assemble_q(batch, self.summary.lambda_k[k], v[k], A[k], gamma0s[k],
                                    self.axis_of[k], ledger.N_p, self.budget))
            logger.info(f"q assembled for {len(q)} classes up to level {ledger.N_p}")
            p = assemble_p(self.model, self.summary, q, self.axis_of, ledger.N_p, self.budget)
        except BudgetExceeded as e:
            e.ledger = ledger
            logger.error(f"ledger at the budget stop: {ledger.to_dict()}")
            raise

        masses = level_masses(p)
        tail, ratio, flag = fit_tail(masses)
        truncated = float(np.arange(len(masses)) @ masses)
        if self.options.mode == "joint":
            mean_k = np.array([np.arange(len(mk)) @ mk for mk in marginals(p)])
        else:
            mean_k = None
        tail_correction = {"total": tail, "ratio": ratio}
        if mean_k is not None and truncated > 0.0:
            for k in range(self.model.K):
                tail_correction[f"class_{k + 1}"] = tail * mean_k[k] / truncated
            mean_k = mean_k + tail * mean_k / truncated
        mean_total = None if flag else truncated + tail
        if flag:
            logger.warning(f"level masses decay with ratio {ratio:.6f}; E[N] is not reported")
        else:
            logger.info(f"E[N] = {mean_total:.10g} (tail {tail:.3e}), P(N = 0) = {masses[0]:.10g}")
        self._diagnose(ledger)
        return JointResult(mode=self.options.mode, q=q, p=p, mean_k=mean_k, mean_total=mean_total,
                           tail_correction=tail_correction, tail_flag=flag, ledger=ledger, bounds=bounds,
                           A=A, v=v, Gamma=Gamma)
