import json

import numpy as np
import pytest
from scipy import stats

from services.analysis_service import AnalysisService
from services.joint_service import (
    assemble_q, assemble_q_direct, ccdf, choose_batch_cut, fit_tail, gamma_field, iter_F_levels, marginals,
)
from services.model_loader import example_case
from services.model_service import PhBatch
from services.service_laws import Exponential
from utils.errors import BudgetExceeded, UsageError
from utils.fields import MultiIndexField, simplex_size
from utils.models import EngineOptions

from tests.conftest import single_server, two_by_two_model

EXAMPLE_ONE_G1 = {
    ("P", "GD"): 5.8760, ("P", "GI"): 5.8760, ("I", "GD"): 4.5417,
    ("I", "GI"): 4.0010, ("N", "GD"): 3.2822, ("N", "GI"): 2.2800,
}

# E[N] for g = 2, 3
EXAMPLE_ONE_LARGER = {
    ("P", "GD"): (9.9815, 13.9356), ("P", "GI"): (9.1466, 12.2898),
    ("I", "GD"): (8.5777, 12.4865), ("I", "GI"): (7.1857, 10.2714),
    ("N", "GD"): (7.2033, 11.0527), ("N", "GI"): (5.2800, 8.2800),
}

# lambda_1 = 0.4, lambda_2 = 0.1, g = 1
EXAMPLE_TWO = {
    ("P", "GD"): 11.5019, ("I", "GD"): 7.1517, ("I", "GI"): 8.7304,
    ("N", "GD"): 3.2168, ("N", "GI"): 6.0892,
}

# p(n_1, n_2) e at g = 1, four significant digits
JOINT_TABLE = {
    ("P", "GD"): {
        (0, 0): 2.500e-1, (1, 0): 2.472e-2, (2, 0): 8.593e-3, (3, 0): 3.481e-3,
        (0, 1): 6.530e-2, (1, 1): 4.108e-2, (2, 1): 2.193e-2, (3, 1): 1.118e-2,
        (0, 2): 3.249e-2, (1, 2): 3.341e-2, (2, 2): 2.444e-2,
        (0, 3): 1.497e-2, (1, 3): 2.141e-2,
        (0, 4): 6.630e-3,
    },
    ("P", "GI"): {
        (0, 0): 2.500e-1, (1, 0): 4.501e-2, (2, 0): 2.054e-2, (3, 0): 9.224e-3,
        (0, 1): 4.501e-2, (1, 1): 4.108e-2, (2, 1): 2.767e-2, (3, 1): 1.629e-2,
        (0, 2): 2.054e-2, (1, 2): 2.767e-2, (2, 2): 2.444e-2,
        (0, 3): 9.224e-3, (1, 3): 1.629e-2,
        (0, 4): 4.073e-3,
    },
}


def four_digits(value: float) -> float:
    """Half a unit in the fourth significant digit, plus the truncation error of the run."""
    return 0.5 * 10.0 ** (np.floor(np.log10(value)) - 3) + 2e-6


_runs = {}


def analysed(arrival, service, g=1.0, mode="joint", eps=1e-6, **rates):
    key = (arrival, service, g, mode, eps, tuple(sorted(rates.items())))
    if key not in _runs:
        options = EngineOptions(eps=eps, n_cap=300, mode=mode)
        _runs[key] = AnalysisService(*example_case(arrival, service, g, **rates), options).run()
    return _runs[key]


def naive_F(model, theta, n_g, m):
    """Coefficients of [I + C/theta + sum_k D_k G_k(z_k)/theta]^m by repeated polynomial products."""
    K, M = model.K, model.env_dim
    base = {(0,) * K: np.eye(M) + model.C / theta}
    for k, (batch, D) in enumerate(zip(model.batches, model.D_list)):
        g = batch.pmf_terms(n_g[k])
        for l in range(1, n_g[k] + 1):
            idx = [0] * K
            idx[k] = l
            base[tuple(idx)] = base.get(tuple(idx), np.zeros((M, M))) + g[l] * D / theta
    out = {(0,) * K: np.eye(M)}
    for _ in range(m):
        nxt = {}
        for a, X in out.items():
            for b, Y in base.items():
                c = tuple(i + j for i, j in zip(a, b))
                nxt[c] = nxt.get(c, np.zeros((M, M))) + X @ Y
        out = nxt
    return out


def synthetic_fields(ndim, M, extent, seed):
    rng = np.random.default_rng(seed)
    A = MultiIndexField(ndim, (M, M), extent)
    A.data[...] = rng.random(A.data.shape)
    A.truncate(extent)
    A.data *= 0.9 / A.total().sum(axis=-1).max()
    v = MultiIndexField(ndim, (M,), extent)
    v.data[...] = rng.random(v.data.shape)
    v.truncate(extent)
    return A, v


class TestFields:
    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            MultiIndexField(2, (3, 3), 100, budget=1000)

    def test_level_sums_and_aggregate(self):
        field = MultiIndexField(2, (1,), 3)
        field.data[...] = 1.0
        field.truncate(3)
        assert field.level_sums()[:, 0] == pytest.approx([1, 2, 3, 4])
        assert field.aggregate().data[:, 0] == pytest.approx([1, 2, 3, 4])
        assert simplex_size(2, 3) == 10
        assert len(list(field.items())) == 10

    def test_grow_keeps_entries(self):
        field = MultiIndexField(2, (2,), 1)
        field.data[1, 0] = [1.0, 2.0]
        field.grow(4)
        assert field.extent == 4
        assert field.get((1, 0)) == pytest.approx([1.0, 2.0])
        assert not field.get((5, 0)).any()


class TestBatchCut:
    def test_geometric_cut(self):
        model, _ = single_server(1.0, Exponential(1.0), PhBatch.geometric(2.0))
        assert choose_batch_cut(model, 1.0, 1e-3) == [10]

    def test_single_batch(self):
        model, _ = single_server(1.0, Exponential(1.0))
        assert choose_batch_cut(model, 1.0, 1e-3) == [1]

    def test_cap(self):
        model, _ = single_server(1.0, Exponential(1.0), PhBatch.geometric(2.0))
        assert choose_batch_cut(model, 1.0, 1e-12, n_cap=7) == [7]


class TestFLevels:
    def test_against_polynomial_powers(self, two_by_two):
        model, _ = two_by_two
        for level in iter_F_levels(model, 1.0, 6, 0.0, [2, 2], 50):
            expected = naive_F(model, 1.0, [2, 2], level.m)
            assert all(sum(n) <= level.field.extent for n in expected)
            for n, block in level.field.items():
                assert np.allclose(block, expected.get(n, 0.0), rtol=0.0, atol=1e-13)

    def test_row_mass_is_one(self, two_by_two):
        model, _ = two_by_two
        for level in iter_F_levels(model, 1.0, 8, 0.0, [2, 2], 50):
            assert level.field.total().sum(axis=-1) == pytest.approx([1.0, 1.0], abs=1e-13)

    def test_total_mode_is_the_aggregate(self, two_by_two):
        model, _ = two_by_two
        joint = iter_F_levels(model, 1.0, 8, 0.0, [2, 2], 50)
        total = iter_F_levels(model, 1.0, 8, 0.0, [2, 2], 50, axis_of=[0, 0])
        for a, b in zip(joint, total):
            assert np.allclose(a.field.aggregate().data, b.field.data, atol=1e-14)

    def test_cut_keeps_mass(self, two_by_two):
        model, _ = two_by_two
        eps_F = 1e-4
        for level in iter_F_levels(model, 1.0, 30, eps_F, [2, 2], 200):
            assert np.all(level.field.total().sum(axis=-1) >= (1.0 - eps_F) ** level.m - 1e-13)
            assert not level.cap_hit

    def test_cap_is_reported(self, two_by_two):
        model, _ = two_by_two
        levels = list(iter_F_levels(model, 1.0, 10, 1e-12, [2, 2], 3))
        assert all(level.field.extent <= 3 for level in levels)
        assert any(level.cap_hit for level in levels)


class TestAssembly:
    @pytest.mark.parametrize("batch", [PhBatch.from_pmf([0.3, 0.7]), PhBatch.geometric(1.5)])
    @pytest.mark.parametrize("axis", [0, 1])
    def test_resolvent_matches_triple_convolution(self, batch, axis):
        A, v = synthetic_fields(2, 2, 2, seed=11)
        Gamma, n_gamma, capped, gamma0 = gamma_field(batch, A, 0.0, 4)
        assert capped and n_gamma == 4
        fast = assemble_q(batch, 0.7, v, A, gamma0, axis, 4)
        slow = assemble_q_direct(batch, 0.7, v, A, Gamma, axis, 4)
        assert np.allclose(fast.data, slow.data, rtol=1e-11, atol=1e-13)

    def test_gamma_of_a_single_batch(self):
        A, _ = synthetic_fields(1, 2, 3, seed=3)
        Gamma, n_gamma, capped, gamma0 = gamma_field(PhBatch([1.0], [[0.0]]), A, 1e-6, 10)
        assert n_gamma == 0 and not capped
        assert np.array_equal(gamma0, np.eye(2))
        assert np.array_equal(Gamma.data[0], np.eye(2))


class TestSingleServer:
    def test_mm1(self, mm1):
        analysis = AnalysisService(*mm1, EngineOptions(eps=1e-10, n_cap=60)).run()
        result = analysis.result
        n = np.arange(41)
        assert result.p.data[:41, 0] == pytest.approx(0.5 ** (n + 1), abs=1e-9)
        assert result.q[0].data[:41, 0] == pytest.approx(0.5 ** (n + 1), abs=1e-9)
        assert result.mean_total == pytest.approx(1.0, rel=1e-6)
        assert result.bounds.passed

    def test_md1_departures(self, md1):
        analysis = AnalysisService(*md1, EngineOptions(eps=1e-11, n_cap=60)).run()
        a = stats.poisson.pmf(np.arange(20), 0.5)
        pi = [0.5]
        for j in range(15):
            tail = sum(pi[i] * a[j - i + 1] for i in range(1, j + 1))
            pi.append((pi[j] - pi[0] * a[j] - tail) / a[0])
        assert analysis.result.q[0].data[:16, 0] == pytest.approx(pi, abs=1e-9)
        assert analysis.result.mean_total == pytest.approx(analysis.little[0], rel=1e-8)


class TestTwoByTwo:
    @pytest.fixture(scope="class")
    def runs(self):
        model, services = two_by_two_model()
        return {mode: AnalysisService(model, services, EngineOptions(eps=1e-8, n_cap=60, mode=mode)).run()
                for mode in ("joint", "total")}

    def test_masses(self, runs):
        result, analysis = runs["joint"].result, runs["joint"]
        assert result.p.total().sum() <= 1.0 + 1e-9
        assert all(q.total().sum() <= 1.0 + 1e-9 for q in result.q)
        assert result.p.data[0, 0].sum() == pytest.approx(1.0 - analysis.summary.rho, abs=1e-7)

    def test_aggregate_matches_total_mode(self, runs):
        joint, total = runs["joint"].result, runs["total"].result
        assert np.allclose(joint.p.aggregate().data, total.p.data, rtol=0.0, atol=1e-10)
        assert joint.mean_total == pytest.approx(total.mean_total, rel=1e-10)

    def test_little_per_class(self, runs):
        analysis = runs["joint"]
        assert analysis.result.mean_k == pytest.approx(analysis.little, rel=1e-5)
        assert analysis.result.mean_total == pytest.approx(analysis.little.sum(), rel=1e-5)

    def test_bounds_report_is_plain_json(self, runs):
        report = json.loads(json.dumps(runs["joint"].result.bounds.to_dict()))
        assert all(type(ok) is bool for ok in report["checks"].values())
        assert report["passed"] is runs["joint"].result.bounds.passed

    def test_marginals_and_ccdf(self, runs):
        result = runs["joint"].result
        first, second = marginals(result.p)
        assert first.sum() == pytest.approx(second.sum(), abs=1e-14)
        masses = result.p.level_sums().sum(axis=-1)
        tail = ccdf(masses)
        assert tail[0] == pytest.approx(1.0 - masses[0])
        assert np.all(np.diff(tail) <= 1e-12)

    def test_bad_eps_F(self, two_by_two):
        with pytest.raises(UsageError, match="eps_F"):
            AnalysisService(*two_by_two, EngineOptions(eps=1e-6, eps_F=0.5, n_cap=20)).run()


class TestTail:
    def test_geometric_tail(self):
        r = 0.8
        n = np.arange(101)
        masses = (1.0 - r) * r ** n
        tail, ratio, flag = fit_tail(masses)
        far = np.arange(101, 3000)
        assert ratio == pytest.approx(r, rel=1e-10)
        assert flag is None
        assert tail == pytest.approx(float(far @ ((1.0 - r) * r ** far)), rel=1e-9)

    def test_slow_decay_is_flagged(self):
        masses = 1e-3 * 0.9995 ** np.arange(50)
        tail, ratio, flag = fit_tail(masses)
        assert flag == "unbounded-tail" and tail == 0.0

    def test_negligible_tail(self):
        assert fit_tail(0.5 ** np.arange(80)) == (0.0, None, None)
        assert fit_tail(np.array([0.5, 0.5])) == (0.0, None, None)


class TestExampleOne:
    @pytest.mark.parametrize("case", sorted(EXAMPLE_ONE_G1))
    def test_mean_total(self, case):
        result = analysed(*case).result
        assert result.mean_total == pytest.approx(EXAMPLE_ONE_G1[case], rel=1e-3)

    @pytest.mark.parametrize("case", sorted(EXAMPLE_ONE_G1))
    def test_little_per_class(self, case):
        analysis = analysed(*case)
        assert analysis.result.mean_k == pytest.approx(analysis.little, rel=1e-4)

    @pytest.mark.parametrize("case", sorted(JOINT_TABLE))
    def test_joint_table(self, case):
        rows = analysed(*case).result.p.data.sum(axis=-1)
        for n, expected in JOINT_TABLE[case].items():
            assert rows[n] == pytest.approx(expected, rel=0.0, abs=four_digits(expected)), n

    def test_busy_probability(self):
        masses = analysed("P", "GD").result.p.level_sums().sum(axis=-1)
        assert ccdf(masses)[0] == pytest.approx(0.75, abs=2e-6)

    def test_symmetric_classes(self):
        rows = analysed("P", "GI").result.p.data.sum(axis=-1)
        assert np.allclose(rows, rows.T, rtol=0.0, atol=1e-10)

    def test_service_assignment_leaves_total_unchanged(self):
        # with g = 1 and equal class rates the totals of (P, GD) and (P, GI) coincide
        gd = analysed("P", "GD", mode="total", eps=1e-10).result.p.level_sums().sum(axis=-1)
        gi = analysed("P", "GI", mode="total", eps=1e-10).result.p.level_sums().sum(axis=-1)
        size = min(len(gd), len(gi))
        assert np.allclose(gd[:size], gi[:size], rtol=0.0, atol=1e-8)

    def test_joint_aggregate_matches_total_mode(self):
        joint = analysed("N", "GD").result.p.aggregate().data
        total = analysed("N", "GD", mode="total").result.p.data
        assert np.allclose(joint, total, rtol=0.0, atol=1e-10)

    def test_bounds(self):
        result = analysed("I", "GD").result
        assert result.bounds.passed or result.bounds.cap_limited
        assert result.ledger.F_entries_computed > 0
        assert result.ledger.n_F[0] == 0

    @pytest.mark.slow
    @pytest.mark.parametrize("case", sorted(EXAMPLE_ONE_LARGER))
    @pytest.mark.parametrize("g", [2.0, 3.0])
    def test_larger_batches(self, case, g):
        result = analysed(*case, g=g, mode="total").result
        assert result.mean_total == pytest.approx(EXAMPLE_ONE_LARGER[case][int(g) - 2], rel=1e-3)


class TestExampleTwo:
    @pytest.mark.parametrize("case", sorted(EXAMPLE_TWO))
    def test_mean_total(self, case):
        analysis = analysed(*case, mode="total", lam1=0.4, lam2=0.1)
        assert analysis.result.mean_total == pytest.approx(EXAMPLE_TWO[case], rel=1e-3)
        assert analysis.result.mean_total == pytest.approx(analysis.little.sum(), rel=1e-4)
