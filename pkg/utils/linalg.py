"""Small dense linear-algebra helpers shared by the services."""
import logging
from typing import List

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from utils.errors import NoConvergence, SingularSystem

logger = logging.getLogger(__name__)


def stationary_vector(generator: np.ndarray) -> np.ndarray:
    """
    Left null vector x of a generator (x A = 0, x e = 1).

    Solved by LU on A^T with its last row replaced by ones.
    """
    A = np.asarray(generator, dtype=float)
    size = A.shape[0]
    system = A.T.copy()
    system[-1, :] = 1.0
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    try:
        lu, piv = linalg.lu_factor(system, check_finite=True)
        x = linalg.lu_solve((lu, piv), rhs)
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularSystem(f"stationary system is singular: {str(e)}") from e
    if not np.all(np.isfinite(x)):
        raise SingularSystem("stationary system is singular")
    return x


def stationary_vector_power(generator: np.ndarray, tol: float = 1e-15,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary vector of a generator by power iteration on its uniformized chain."""
    A = np.asarray(generator, dtype=float)
    rate = 1.1 * np.max(np.abs(np.diag(A)))
    if rate == 0.0:
        return np.full(A.shape[0], 1.0 / A.shape[0])
    P = np.eye(A.shape[0]) + A / rate
    x = np.full(A.shape[0], 1.0 / A.shape[0])
    for it in range(max_iter):
        nxt = x @ P
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - x)) < tol:
            return nxt
        x = nxt
    raise NoConvergence("power iteration", max_iter, float(np.max(np.abs(x @ A))))


def spectral_radius(P: np.ndarray) -> float:
    if P.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(P))))


def communicating_classes(generator: np.ndarray) -> List[List[int]]:
    """Strongly connected components of the off-diagonal nonzero pattern."""
    pattern = np.asarray(generator) != 0.0
    np.fill_diagonal(pattern, False)
    count, labels = connected_components(pattern.astype(int), directed=True, connection='strong')
    return [sorted(np.flatnonzero(labels == c).tolist()) for c in range(count)]


def kron_resolvent(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """[I - P (x) A]^{-1}; batch phase is the left (slow) factor."""
    block = np.kron(P, A)
    return linalg.inv(np.eye(block.shape[0]) - block)
