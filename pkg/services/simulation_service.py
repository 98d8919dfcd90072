"""
Discrete-event simulator of the multi-class FIFO queue.

Each replication runs its own event loop over environment transitions and
service completions. Results are time averages taken after the warmup;
replications run in worker processes with independent spawned seeds.
"""
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Sequence

import numpy as np

from services.model_service import ArrivalModel
from services.service_laws import ServiceLaw
from utils.base_service import BaseService, log_stage
from utils.models import SimConfig, SimEstimate
from utils.system_utils import resolve_workers

logger = logging.getLogger(__name__)

CHUNK = 4096


class _Draws:
    """Buffered random draws; one refill per CHUNK values."""

    def __init__(self, rng: np.random.Generator, model: ArrivalModel, services: Sequence[ServiceLaw]):
        self.rng = rng
        self.model = model
        self.services = services
        self._buffers: Dict[tuple, np.ndarray] = {}
        self._pos: Dict[tuple, int] = {}

    def _take(self, key: tuple, refill):
        pos = self._pos.get(key, CHUNK)
        if pos >= CHUNK:
            self._buffers[key] = refill()
            pos = 0
        self._pos[key] = pos + 1
        return self._buffers[key][pos]

    def exponential(self) -> float:
        return float(self._take(("exp",), lambda: self.rng.standard_exponential(CHUNK)))

    def uniform(self) -> float:
        return float(self._take(("u",), lambda: self.rng.random(CHUNK)))

    def batch_size(self, k: int) -> int:
        return int(self._take(("batch", k), lambda: self.model.batches[k].sample(self.rng, CHUNK)))

    def service(self, k: int) -> float:
        return float(self._take(("service", k), lambda: self.services[k].sample(self.rng, CHUNK)))


def _transition_table(model: ArrivalModel) -> np.ndarray:
    """Cumulative jump distribution per state over [C off-diagonal | D_1 | ... | D_K]."""
    off = model.C.copy()
    np.fill_diagonal(off, 0.0)
    rates = -np.diag(model.C)
    table = np.hstack([off] + model.D_list) / rates[:, None]
    return np.cumsum(table, axis=1)


def _run_replication(model: ArrivalModel, services: Sequence[ServiceLaw], config: SimConfig,
                     seed: np.random.SeedSequence) -> dict:
    rng = np.random.default_rng(seed)
    draws = _Draws(rng, model, services)
    M, K = model.env_dim, model.K
    cap = config.hist_cap
    rates = -np.diag(model.C)
    table = _transition_table(model)
    warmup, horizon = config.warmup, config.horizon

    hist = np.zeros((cap + 1,) * K + (M,))
    area_n = np.zeros(K)
    area_v = 0.0
    empty_time = 0.0
    arrivals = np.zeros(K)

    t = 0.0
    phase = int(rng.choice(M, p=np.full(M, 1.0 / M)))
    counts = [0] * K
    waiting = deque()
    busy_until = np.inf
    in_service = -1
    workload = 0.0
    next_env = draws.exponential() / rates[phase]

    while t < horizon:
        t_next = min(next_env, busy_until, horizon)
        start = max(t, warmup)
        if t_next > start:
            dt = t_next - start
            v = max(workload - (start - t), 0.0)
            area_v += v * dt - 0.5 * dt * dt if v >= dt else 0.5 * v * v
            area_n += np.asarray(counts, dtype=float) * dt
            if sum(counts) == 0:
                empty_time += dt
            if max(counts) <= cap:
                hist[tuple(counts) + (phase,)] += dt
        workload = max(workload - (t_next - t), 0.0)
        t = t_next
        if t >= horizon:
            break

        if busy_until <= next_env:
            counts[in_service] -= 1
            if waiting:
                in_service, service = waiting.popleft()
                busy_until = t + service
            else:
                in_service, busy_until = -1, np.inf
            continue

        j = int(np.searchsorted(table[phase], draws.uniform() * table[phase, -1], side="right"))
        j = min(j, table.shape[1] - 1)
        block, target = divmod(j, M)
        if block > 0:
            k = block - 1
            size = draws.batch_size(k)
            for _ in range(size):
                service = draws.service(k)
                waiting.append((k, service))
                workload += service
            counts[k] += size
            if t >= warmup:
                arrivals[k] += size
            if in_service < 0:
                in_service, service = waiting.popleft()
                busy_until = t + service
        phase = target
        next_env = t + draws.exponential() / rates[phase]

    span = horizon - warmup
    return {
        "hist": hist / span,
        "mean_k": area_n / span,
        "mean_workload": area_v / span,
        "empty_probability": empty_time / span,
        "arrival_rates": arrivals / span,
    }


def _standard_error(samples: np.ndarray) -> np.ndarray:
    if samples.shape[0] < 2:
        return np.full(samples.shape[1:], np.nan)
    return samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])


class SimulationService(BaseService):
    def __init__(self, model: ArrivalModel, services: Sequence[ServiceLaw]):
        super().__init__()
        self.model = model
        self.services = list(services)

    def replications(self, config: SimConfig) -> List[dict]:
        seeds = np.random.SeedSequence(config.seed).spawn(config.replications)
        workers = min(resolve_workers(config.workers), config.replications)
        logger.info(f"{config.replications} replications of horizon {config.horizon:g} on {workers} worker(s)")
        if workers == 1:
            return [_run_replication(self.model, self.services, config, s) for s in seeds]
        count = config.replications
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_run_replication, [self.model] * count, [self.services] * count,
                                     [config] * count, seeds))

    @log_stage("simulation")
    def simulate(self, config: SimConfig = None) -> SimEstimate:
        """
        Replicated time-average estimates.

        Args:
            config (SimConfig): horizon, warmup, replications, seed, histogram cap, workers

        Returns:
            SimEstimate: means with standard errors std/sqrt(R) (NaN for a single replication)
        """
        config = config or SimConfig()
        runs = self.replications(config)

        def stack(key):
            return np.array([r[key] for r in runs], dtype=float)

        hist, mean_k = stack("hist"), stack("mean_k")
        totals = mean_k.sum(axis=1)
        workload, empty, rates = stack("mean_workload"), stack("empty_probability"), stack("arrival_rates")
        estimate = SimEstimate(
            replications=config.replications,
            hist=hist.mean(axis=0), hist_se=_standard_error(hist),
            mean_k=mean_k.mean(axis=0), mean_k_se=_standard_error(mean_k),
            mean_total=float(totals.mean()), mean_total_se=float(_standard_error(totals)),
            mean_workload=float(workload.mean()), mean_workload_se=float(_standard_error(workload)),
            empty_probability=float(empty.mean()), empty_probability_se=float(_standard_error(empty)),
            arrival_rates=rates.mean(axis=0), arrival_rates_se=_standard_error(rates),
        )
        logger.info(f"simulated E[N] = {estimate.mean_total:.6g} +- {estimate.mean_total_se:.3g}")
        return estimate
