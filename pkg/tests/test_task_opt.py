import numpy as np
import pytest

from coherent_cast import diffcore as dc
from coherent_cast import hierarchy, qp, reconcile, task_opt
from coherent_cast.errors import DataError, MissingLevelRow
from coherent_cast.metrics import co_mape

TABLE = {1: (2.0, 50.0, 0.5), 2: (1.0, 45.0, 0.7), 3: (0.9, 40.0, 0.8), 4: (0.7, 35.0, 1.0), 5: (0.5, 30.0, 2.0)}


@pytest.fixture
def table():
    return task_opt.default_penalties()


def single_node():
    return hierarchy.from_parent_map([("T", None)])


def five_levels():
    return hierarchy.from_level_counts([1, 2, 3, 4, 6])


class TestPenalties:
    def test_bundled_table(self, table):
        assert table.rows == TABLE

    def test_level_one_and_five(self, table):
        pen = task_opt.expand_penalties(table, five_levels())
        assert (pen.c_u[0], pen.c_o[0], pen.q[0]) == (2.0, 50.0, 0.5)
        assert (pen.c_u[-1], pen.c_o[-1], pen.q[-1]) == (0.5, 30.0, 2.0)

    def test_single_level(self, table):
        pen = task_opt.expand_penalties(table, single_node())
        np.testing.assert_array_equal([pen.c_u, pen.c_o, pen.q], [[2.0], [50.0], [0.5]])

    def test_missing_level(self):
        with pytest.raises(MissingLevelRow):
            task_opt.expand_penalties(task_opt.PenaltyTable({1: (1, 1, 1)}), hierarchy.fig1())

    def test_csv_round_trip(self, table, tmp_path):
        path = tmp_path / "p.csv"
        table.to_csv(path)
        assert path.read_text().splitlines()[0] == "level,c_u,c_o,q"
        assert task_opt.PenaltyTable.from_csv(path).rows == table.rows

    def test_rejects_negative(self):
        with pytest.raises(DataError):
            task_opt.PenaltyTable({1: (1.0, -1.0, 0.0)})


class TestTaskLoss:
    def test_exact(self, table):
        pen = task_opt.expand_penalties(table, hierarchy.fig1())
        y = np.arange(8.0)
        assert task_opt.task_loss(y, y, pen) == 0.0

    def test_under(self, table):
        pen = task_opt.expand_penalties(table, single_node())
        assert task_opt.task_loss([8.0], [10.0], pen) == pytest.approx(5.0, abs=1e-12)

    def test_over(self, table):
        pen = task_opt.expand_penalties(table, single_node())
        assert task_opt.task_loss([11.0], [10.0], pen) == pytest.approx(50.25, abs=1e-12)

    def test_split_sums_to_total(self, table, fig1, rng):
        pen = task_opt.expand_penalties(table, fig1)
        y, t = rng.uniform(0, 10, size=(8, 4)), rng.uniform(0, 10, size=(8, 4))
        split = task_opt.task_cost_split(y, t, pen, fig1)
        assert set(split) == {"under", "over", "quadratic"}
        assert all(len(v) == 3 for v in split.values())
        assert sum(sum(v) for v in split.values()) == pytest.approx(task_opt.task_loss(y, t, pen))

    def test_tensor_matches(self, table, fig1, rng):
        pen = task_opt.expand_penalties(table, fig1)
        y, t = rng.uniform(0, 10, size=(16, 3)), rng.uniform(0, 10, size=(16, 3))
        got = task_opt.task_loss_tensor(y, t, pen, copies=2).item()
        ref = task_opt.task_loss(y[:8], t[:8], pen) + task_opt.task_loss(y[8:], t[8:], pen)
        assert got == pytest.approx(ref, rel=1e-13)


class TestReformulation:
    def test_at_truth(self, table):
        pen = task_opt.expand_penalties(table, single_node())
        rep = task_opt.check_reformulation([10.0], pen, [[10.0]])
        assert rep.hinge_values[0] == 0.0 and abs(rep.slack_values[0]) <= 1e-12

    def test_worked_value(self, table):
        pen = task_opt.expand_penalties(table, single_node())
        rep = task_opt.check_reformulation([10.0], pen, [[8.0]])
        assert rep.hinge_values[0] == pytest.approx(5.0, abs=1e-12)
        assert rep.slack_values[0] == pytest.approx(5.0, abs=1e-9)

    def test_random_grid(self, table, three, rng):
        pen = task_opt.expand_penalties(table, three)
        rep = task_opt.check_reformulation(rng.uniform(0, 20, 3), pen, rng.uniform(0, 25, size=(100, 3)))
        assert rep.passed and rep.max_discrepancy <= 1e-9


class TestDecide:
    def pen3(self, table, three):
        return task_opt.expand_penalties(table, three)

    def test_coherent_forecast_kept(self, table, three):
        f = np.array([9.0, 4.0, 5.0])
        full = task_opt.decide_full(task_opt.SchedulingProblem(three, self.pen3(table, three), f))[:, 0]
        np.testing.assert_allclose(full[:3], f, atol=1e-6)
        np.testing.assert_allclose(full[3:], 0.0, atol=1e-6)
        ref = qp.brute_force_oracle(task_opt.decision_qp(f, three, self.pen3(table, three)), max_ineq=15)
        np.testing.assert_allclose(ref.z, full, atol=1e-6)

    def test_zero_forecast(self, table, three):
        full = task_opt.decide_full(task_opt.SchedulingProblem(three, self.pen3(table, three), np.zeros(3)))
        np.testing.assert_allclose(full, 0.0, atol=1e-7)

    def test_incoherent_forecast(self, table, three):
        pen = self.pen3(table, three)
        f = np.array([10.0, 4.0, 5.0])
        y = task_opt.decide(task_opt.SchedulingProblem(three, pen, f))
        ref = qp.brute_force_oracle(task_opt.decision_qp(f, three, pen), max_ineq=15).z[:3]
        np.testing.assert_allclose(y, ref, atol=1e-6)
        np.testing.assert_allclose(y, [9.0, 4.0, 5.0], atol=1e-6)
        assert abs(three.matrices.A @ y).max() <= 1e-9
        assert task_opt.task_loss(y, f, pen) <= task_opt.task_loss(reconcile.bottom_up(f, three), f, pen) + 1e-5

    def test_coherent_nonnegative_slacks(self, table, fig1, rng):
        pen = task_opt.expand_penalties(table, fig1)
        F = rng.uniform(-2, 10, size=(8, 12))
        full = task_opt.decide_full(task_opt.SchedulingProblem(fig1, pen, F))
        y, yu, yo = full[:8], full[8:16], full[16:]
        assert co_mape(y[:, (np.abs(y[:3]) > 1e-6).all(axis=0)], fig1) <= 1e-7
        assert np.abs(fig1.matrices.A @ y).max() <= 1e-8
        assert y.min() >= -1e-9
        assert np.all(np.minimum(yu, yo) <= 1e-7)

    def test_monotone_in_over_cost(self, table, three, rng):
        base = self.pen3(table, three)
        for _ in range(10):
            f = rng.uniform(0, 10, size=3)
            node = int(rng.integers(0, 3))
            c_o = base.c_o.copy()
            c_o[node] *= 3.0
            raised = task_opt.NodePenalties(base.c_u, c_o, base.q)
            lo = task_opt.decide(task_opt.SchedulingProblem(three, base, f))[node]
            hi = task_opt.decide(task_opt.SchedulingProblem(three, raised, f))[node]
            assert hi <= lo + 1e-7
        # the enumeration oracle agrees on the last instance
        ref = qp.brute_force_oracle(task_opt.decision_qp(f, three, raised), max_ineq=15).z[node]
        assert hi == pytest.approx(ref, abs=1e-6)

    def test_gradient_through_decisions(self, table, fig1):
        pen = task_opt.expand_penalties(table, fig1)
        rng = np.random.default_rng(5)
        F = dc.Param(hierarchy.aggregate_bottom(fig1, rng.uniform(2, 6, size=(5, 2))) + rng.normal(scale=0.5, size=(8, 2)))
        truth = hierarchy.aggregate_bottom(fig1, rng.uniform(2, 6, size=(5, 2)))
        report = dc.grad_check(lambda: task_opt.task_loss_tensor(task_opt.decide_layer(F, fig1, pen), truth, pen), [F], tol=1e-3)
        assert report.passed, report

    def test_layer_matches_plain(self, table, fig1, rng):
        pen = task_opt.expand_penalties(table, fig1)
        F = rng.uniform(0, 10, size=(16, 3))
        out = task_opt.decide_layer(F, fig1, pen, copies=2).value
        np.testing.assert_allclose(out[8:], task_opt.decide(task_opt.SchedulingProblem(fig1, pen, F[8:])), atol=1e-12)

    def test_rho_positive(self, table, three):
        with pytest.raises(DataError):
            task_opt.SchedulingProblem(three, self.pen3(table, three), np.zeros(3), rho=0.0)
