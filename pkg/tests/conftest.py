import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from services.model_loader import example_case
from services.model_service import ArrivalModel, ClassStream, PhBatch
from services.service_laws import Deterministic, Exponential

MODELS_DIR = Path(__file__).resolve().parents[1] / "models"


def single_server(rate: float, service, batch: PhBatch = None):
    """Poisson(rate) batches into one class: the M/G/1 (or M^X/G/1) queue."""
    batch = batch or PhBatch([1.0], [[0.0]])
    model = ArrivalModel([[-rate]], [ClassStream([[rate]], batch)], name="single")
    return model, [service]


@pytest.fixture
def models_dir() -> Path:
    return MODELS_DIR


@pytest.fixture
def mm1():
    """lambda = 0.5, mu = 1"""
    return single_server(0.5, Exponential(1.0))


@pytest.fixture
def md1():
    """lambda = 0.5, h = 1"""
    return single_server(0.5, Deterministic(1.0))


@pytest.fixture
def example():
    """Factory for the two-class interrupted-Poisson family."""
    return example_case


def two_by_two_model():
    """K = 2, M = 2 with bounded batches (sizes 1 and 2)."""
    C = np.array([[-1.0, 0.4], [0.3, -0.8]])
    D1 = np.array([[0.2, 0.1], [0.0, 0.3]])
    D2 = np.array([[0.3, 0.0], [0.1, 0.1]])
    batch1 = PhBatch.from_pmf([0.6, 0.4])
    batch2 = PhBatch.from_pmf([0.3, 0.7])
    model = ArrivalModel(C, [ClassStream(D1, batch1), ClassStream(D2, batch2)], name="two_by_two")
    return model, [Deterministic(0.5), Exponential(2.0)]


@pytest.fixture
def two_by_two():
    return two_by_two_model()
