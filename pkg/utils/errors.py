"""Exception hierarchy. Every error carries the process exit code the CLI maps it to."""
from typing import Iterable, Optional, Sequence


class MbmapqError(Exception):
    exit_code = 1


class UsageError(MbmapqError):
    exit_code = 2


# Model validation (exit 2)

class ModelValidationError(MbmapqError):
    exit_code = 2


class ModelFileError(ModelValidationError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class GeneratorRowSum(ModelValidationError):
    def __init__(self, rows: Sequence[int], residuals: Sequence[float]):
        detail = ", ".join(f"row {i}: {r:.3e}" for i, r in zip(rows, residuals))
        super().__init__(f"C + sum_k D_k row sums are not zero ({detail})")
        self.rows = list(rows)


class NegativeRate(ModelValidationError):
    def __init__(self, where: str, indices: Iterable[tuple]):
        self.indices = list(indices)
        super().__init__(f"negative rate in {where} at {self.indices}")


class EmptyArrivalStream(ModelValidationError):
    def __init__(self, k: int):
        super().__init__(f"class {k + 1}: D_k has no positive element")
        self.k = k


class ReducibleChain(ModelValidationError):
    def __init__(self, components: Sequence[Sequence[int]]):
        self.components = [list(c) for c in components]
        super().__init__(f"C + D is reducible; communicating classes {self.components}")


class SubstochasticViolation(ModelValidationError):
    def __init__(self, k: int, reason: str, indices: Optional[Iterable] = None):
        self.k = k
        self.indices = list(indices or [])
        suffix = f" at {self.indices}" if self.indices else ""
        super().__init__(f"class {k + 1} batch law: {reason}{suffix}")


class InvalidServiceLaw(ModelValidationError):
    pass


class AssumptionViolation(ModelValidationError):
    pass


# Stability (exit 3)

class Unstable(MbmapqError):
    exit_code = 3

    def __init__(self, rho: float):
        super().__init__(f"utilization rho = {rho:.12g} >= 1; no stationary regime")
        self.rho = rho


# Numerical failures (exit 4)

class NumericalError(MbmapqError):
    exit_code = 4


class NoConvergence(NumericalError):
    def __init__(self, what: str, iterations: int, residual: float):
        super().__init__(f"{what} did not converge after {iterations} sweeps (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class BudgetExceeded(NumericalError):
    def __init__(self, levels: int, entries: int, budget: int):
        super().__init__(
            f"field budget exceeded at level {levels}: {entries} entries > budget {budget}"
        )
        self.levels = levels
        self.entries = entries
        self.ledger = None


class MassDeficit(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class SingularResolvent(NumericalError):
    pass


class NegativeMass(NumericalError):
    def __init__(self, n: tuple, value: float):
        super().__init__(f"p{n} has entry {value:.3e} < -1e-8; truncation ledgers are inconsistent")
        self.n = n
        self.value = value


class DegenerateService(NumericalError):
    pass


# Analysis vs simulation (exit 5)

class Disagreement(MbmapqError):
    exit_code = 5

    def __init__(self, statistics: Sequence[str]):
        self.statistics = list(statistics)
        super().__init__(f"analysis and simulation disagree on: {', '.join(self.statistics)}")
