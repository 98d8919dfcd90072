import numpy as np
import pytest

from services.analysis_service import AnalysisService
from services.model_loader import example_case
from services.simulation_service import SimulationService, _transition_table
from utils.errors import UsageError
from utils.models import EngineOptions, SimConfig

from tests.conftest import two_by_two_model

Z = 5.0


@pytest.fixture(scope="module")
def mm1_estimate():
    from tests.conftest import single_server
    from services.service_laws import Exponential
    model, services = single_server(0.5, Exponential(1.0))
    config = SimConfig(horizon=2e4, warmup=2e3, replications=8, seed=2024, hist_cap=30, workers=1)
    return SimulationService(model, services).simulate(config)


class TestConfig:
    def test_needs_a_replication(self):
        with pytest.raises(UsageError, match="replications"):
            SimConfig(replications=0)

    def test_warmup_inside_horizon(self):
        with pytest.raises(UsageError):
            SimConfig(horizon=10.0, warmup=10.0)

    def test_default_warmup(self):
        assert SimConfig(horizon=500.0).warmup == pytest.approx(50.0)


class TestTransitionTable:
    def test_rows_end_at_one(self):
        model, _ = two_by_two_model()
        table = _transition_table(model)
        assert table.shape == (2, 2 + 2 * 2)
        assert table[:, -1] == pytest.approx([1.0, 1.0])
        assert np.all(np.diff(table, axis=1) >= 0.0)


class TestMM1:
    def test_mean_number(self, mm1_estimate):
        assert abs(mm1_estimate.mean_total - 1.0) < Z * mm1_estimate.mean_total_se

    def test_empty_probability(self, mm1_estimate):
        assert abs(mm1_estimate.empty_probability - 0.5) < Z * mm1_estimate.empty_probability_se

    def test_mean_workload(self, mm1_estimate):
        assert abs(mm1_estimate.mean_workload - 1.0) < Z * mm1_estimate.mean_workload_se

    def test_arrival_rate(self, mm1_estimate):
        assert abs(mm1_estimate.arrival_rates[0] - 0.5) < Z * mm1_estimate.arrival_rates_se[0]

    def test_histogram(self, mm1_estimate):
        assert mm1_estimate.hist.shape == (31, 1)
        assert mm1_estimate.hist.sum() == pytest.approx(1.0, abs=1e-3)
        assert mm1_estimate.hist[0, 0] == pytest.approx(mm1_estimate.empty_probability, abs=1e-12)


class TestReplications:
    def test_same_seed_same_answer(self):
        model, services = two_by_two_model()
        config = SimConfig(horizon=500.0, replications=3, seed=7, hist_cap=5, workers=1)
        first = SimulationService(model, services).simulate(config)
        again = SimulationService(model, services).simulate(config)
        assert first.mean_total == again.mean_total
        assert np.array_equal(first.hist, again.hist)

    def test_workers_do_not_change_results(self):
        model, services = two_by_two_model()
        serial = SimulationService(model, services).simulate(
            SimConfig(horizon=500.0, replications=3, seed=7, hist_cap=5, workers=1))
        pooled = SimulationService(model, services).simulate(
            SimConfig(horizon=500.0, replications=3, seed=7, hist_cap=5, workers=2))
        assert serial.mean_total == pooled.mean_total
        assert np.array_equal(serial.mean_k, pooled.mean_k)

    def test_single_replication_has_no_error_bar(self):
        model, services = two_by_two_model()
        estimate = SimulationService(model, services).simulate(
            SimConfig(horizon=200.0, replications=1, seed=1, hist_cap=3, workers=1))
        assert np.isnan(estimate.mean_total_se)
        assert estimate.to_dict()["replications"] == 1
        assert "hist" not in estimate.to_dict()


@pytest.mark.slow
class TestAgainstAnalysis:
    def test_poisson_example(self):
        model, services = example_case("N", "GI", 1.0)
        estimate = SimulationService(model, services).simulate(
            SimConfig(horizon=2e5, replications=8, seed=99, hist_cap=40, workers=2))
        assert abs(estimate.mean_total - 2.28) < Z * estimate.mean_total_se

    def test_two_class_means(self):
        model, services = two_by_two_model()
        analysis = AnalysisService(model, services, EngineOptions(eps=1e-8, n_cap=60)).run()
        estimate = SimulationService(model, services).simulate(
            SimConfig(horizon=5e4, replications=8, seed=5, hist_cap=20, workers=2))
        for k in range(2):
            assert abs(estimate.mean_k[k] - analysis.result.mean_k[k]) < Z * estimate.mean_k_se[k]
        assert abs(estimate.empty_probability - (1.0 - analysis.summary.rho)) < Z * estimate.empty_probability_se
