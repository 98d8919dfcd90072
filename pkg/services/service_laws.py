"""
Service-time laws with closed-form uniformized coefficients.

For a law H and uniformization rate theta,
gamma^(m)(theta) = int e^{-theta y} (theta y)^m / m! dH(y) is the pmf of the
number of Poisson(theta) events during one service. Every law here produces
those masses by a multiplicative recurrence and reports the exact tail beyond
the last computed term.
"""
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import special

from utils.errors import InvalidServiceLaw

LOG_GUARD = 700.0


def poisson_terms(mean: float, m_cap: int) -> np.ndarray:
    """Poisson(mean) pmf at 0..m_cap."""
    m = np.arange(m_cap + 1)
    if mean == 0.0:
        out = np.zeros(m_cap + 1)
        out[0] = 1.0
        return out
    if mean > LOG_GUARD:
        return np.exp(-mean + m * np.log(mean) - special.gammaln(m + 1))
    out = np.empty(m_cap + 1)
    out[0] = np.exp(-mean)
    for i in range(m_cap):
        out[i + 1] = out[i] * mean / (i + 1)
    return out


def poisson_tail(mean: float, m_cap: int) -> float:
    """P(X > m_cap) for X ~ Poisson(mean)."""
    return float(special.gammainc(m_cap + 1, mean))


def negbin_terms(shape: int, success: float, m_cap: int) -> np.ndarray:
    """pmf of failures before the shape-th success, success probability `success`."""
    out = np.empty(m_cap + 1)
    out[0] = success ** shape
    fail = 1.0 - success
    for i in range(m_cap):
        out[i + 1] = out[i] * (i + shape) / (i + 1) * fail
    return out


def negbin_tail(shape: int, success: float, m_cap: int) -> float:
    return float(special.betainc(m_cap + 1, shape, 1.0 - success))


class ServiceLaw:
    kind = None

    @cached_property
    def mean(self) -> float:
        return self._moment(1)

    @cached_property
    def second_moment(self) -> float:
        return self._moment(2)

    def _moment(self, n: int) -> float:
        raise NotImplementedError

    def lst(self, s: float) -> float:
        """H*(s) = E[exp(-s H)]"""
        raise NotImplementedError

    def gamma_terms(self, theta: float, m_cap: int) -> np.ndarray:
        raise NotImplementedError

    def gamma_tail(self, theta: float, m_cap: int) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params()}

    @staticmethod
    def from_dict(data: dict) -> 'ServiceLaw':
        try:
            kind = str(data["kind"]).lower()
            params = dict(data.get("params", {}))
        except (KeyError, TypeError, AttributeError) as e:
            raise InvalidServiceLaw(f"service entry needs 'kind' and 'params': {data!r}") from e
        factory = SERVICE_KINDS.get(kind)
        if factory is None:
            raise InvalidServiceLaw(f"unknown service kind {kind!r}; known: {sorted(SERVICE_KINDS)}")
        try:
            return factory(**params)
        except TypeError as e:
            raise InvalidServiceLaw(f"bad parameters for {kind}: {str(e)}") from e

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class Deterministic(ServiceLaw):
    kind = "deterministic"

    def __init__(self, point: float):
        if not point > 0.0 or not np.isfinite(point):
            raise InvalidServiceLaw(f"deterministic service needs a positive point, got {point}")
        self.point = float(point)

    def _moment(self, n: int) -> float:
        return self.point ** n

    def lst(self, s: float) -> float:
        return float(np.exp(-s * self.point))

    def gamma_terms(self, theta: float, m_cap: int) -> np.ndarray:
        return poisson_terms(theta * self.point, m_cap)

    def gamma_tail(self, theta: float, m_cap: int) -> float:
        return poisson_tail(theta * self.point, m_cap)

    def sample(self, rng, size):
        return np.full(size, self.point)

    def params(self) -> dict:
        return {"point": self.point}


class Exponential(ServiceLaw):
    kind = "exponential"

    def __init__(self, rate: float):
        if not rate > 0.0 or not np.isfinite(rate):
            raise InvalidServiceLaw(f"exponential service needs a positive rate, got {rate}")
        self.rate = float(rate)

    def _moment(self, n: int) -> float:
        return float(special.factorial(n)) / self.rate ** n

    def lst(self, s: float) -> float:
        return self.rate / (self.rate + s)

    def gamma_terms(self, theta: float, m_cap: int) -> np.ndarray:
        return negbin_terms(1, self.rate / (self.rate + theta), m_cap)

    def gamma_tail(self, theta: float, m_cap: int) -> float:
        return (theta / (self.rate + theta)) ** (m_cap + 1)

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size)

    def params(self) -> dict:
        return {"rate": self.rate}


class Erlang(ServiceLaw):
    kind = "erlang"

    def __init__(self, shape: int, rate: float):
        if int(shape) != shape or shape < 1:
            raise InvalidServiceLaw(f"Erlang shape must be a positive integer, got {shape}")
        if not rate > 0.0 or not np.isfinite(rate):
            raise InvalidServiceLaw(f"Erlang rate must be positive, got {rate}")
        self.shape = int(shape)
        self.rate = float(rate)

    def _moment(self, n: int) -> float:
        return float(np.prod(np.arange(self.shape, self.shape + n, dtype=float))) / self.rate ** n

    def lst(self, s: float) -> float:
        return (self.rate / (self.rate + s)) ** self.shape

    def gamma_terms(self, theta: float, m_cap: int) -> np.ndarray:
        return negbin_terms(self.shape, self.rate / (self.rate + theta), m_cap)

    def gamma_tail(self, theta: float, m_cap: int) -> float:
        return negbin_tail(self.shape, self.rate / (self.rate + theta), m_cap)

    def sample(self, rng, size):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def params(self) -> dict:
        return {"shape": self.shape, "rate": self.rate}


class _Mixture(ServiceLaw):
    """Finite mixture; coefficient series are built per branch and then mixed."""

    def __init__(self, weights: Sequence[float], branches: Sequence[ServiceLaw]):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(w) != len(branches) or len(w) == 0:
            raise InvalidServiceLaw("mixture weights and branches must have the same positive length")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidServiceLaw(f"mixture weights must be nonnegative and sum to 1, got {w.tolist()}")
        self.weights = w
        self.branches = list(branches)

    def _moment(self, n: int) -> float:
        return float(sum(w * b._moment(n) for w, b in zip(self.weights, self.branches)))

    def lst(self, s: float) -> float:
        return float(sum(w * b.lst(s) for w, b in zip(self.weights, self.branches)))

    def gamma_terms(self, theta: float, m_cap: int) -> np.ndarray:
        out = np.zeros(m_cap + 1)
        for w, b in zip(self.weights, self.branches):
            out += w * b.gamma_terms(theta, m_cap)
        return out

    def gamma_tail(self, theta: float, m_cap: int) -> float:
        return float(sum(w * b.gamma_tail(theta, m_cap) for w, b in zip(self.weights, self.branches)))

    def sample(self, rng, size):
        which = rng.choice(len(self.weights), size=size, p=self.weights)
        out = np.empty(size)
        for j, branch in enumerate(self.branches):
            hit = which == j
            if hit.any():
                out[hit] = branch.sample(rng, int(hit.sum()))
        return out


class HyperExponential(_Mixture):
    kind = "hyperexponential"

    def __init__(self, weights: Sequence[float], rates: Sequence[float]):
        super().__init__(weights, [Exponential(r) for r in rates])

    def params(self) -> dict:
        return {"weights": self.weights.tolist(), "rates": [b.rate for b in self.branches]}


class PointMixture(_Mixture):
    kind = "point_mixture"

    def __init__(self, points: Sequence[float], weights: Sequence[float]):
        super().__init__(weights, [Deterministic(y) for y in points])

    def sample(self, rng, size):
        points = np.array([b.point for b in self.branches])
        return points[rng.choice(len(points), size=size, p=self.weights)]

    def params(self) -> dict:
        return {"points": [b.point for b in self.branches], "weights": self.weights.tolist()}


SERVICE_KINDS = {
    Deterministic.kind: Deterministic,
    Exponential.kind: Exponential,
    Erlang.kind: Erlang,
    HyperExponential.kind: HyperExponential,
    PointMixture.kind: PointMixture,
}
