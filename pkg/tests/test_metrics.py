import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperbo.bo import BoConfig, BoTrace, Method, Pool
from hyperbo.dataset import extract_matching
from hyperbo.errors import ValidationError
from hyperbo.gp import GPParams, KernelFn, MeanFn
from hyperbo.harness import read_records, run_grid, write_records
from hyperbo.metrics import (
    RunRecord,
    model_diagnostics,
    performance_profile,
    regret_percentiles,
    speedup_factor,
    summarize_speedups,
)
from hyperbo.objectives import moment_estimates, multi_task_nll, pseudo_kl
from hyperbo.synth import SynthConfig, sample_tasks
from hyperbo.training import TrainConfig, init_params, train_gp

from oracles import percentile_linear


def rec(method, task, ys, seed=0, f_max=None):
    ys = np.asarray(ys, dtype=float)
    return RunRecord(method, task, seed, BoTrace(np.zeros((len(ys), 1)), ys, ys, None, f_max))


class TestProfile:
    def test_dominant_method(self):
        records = []
        for task in ("a", "b", "c"):
            records += [rec("best", task, [5, 6, 7]), rec("mid", task, [1, 2, 3]),
                        rec("low", task, [0, 0, 1])]
        rep = performance_profile(records, 1)
        np.testing.assert_array_equal(rep.fractions["best"], [1.0, 1.0, 1.0])

    def test_counting(self):
        records = []
        for task, v in zip("abc", (2.0, 2.0, 0.0)):
            records += [rec("m", task, [v]), rec("x", task, [1.0]), rec("z", task, [1.0])]
        assert performance_profile(records, 1).fractions["m"][0] == pytest.approx(2 / 3)

    def test_hand_table(self):
        # task a: A (1, 3), B (2, 2) -> criterion at t=2 is median(3, 2) = 2.5
        # task b: A (0, 1), B (1, 4) -> criterion at t=2 is median(1, 4) = 2.5
        records = [rec("A", "a", [1, 3]), rec("B", "a", [2, 2]),
                   rec("A", "b", [0, 1]), rec("B", "b", [1, 4])]
        rep = performance_profile(records, 2)
        assert rep.criterion == {"a": 2.5, "b": 2.5}
        np.testing.assert_array_equal(rep.fractions["A"], [0.0, 0.5])
        np.testing.assert_array_equal(rep.fractions["B"], [0.0, 0.5])

    def test_ties_do_not_count(self):
        records = [rec("A", "a", [1.0]), rec("B", "a", [1.0])]
        assert performance_profile(records, 1).fractions["A"][0] == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        records = [rec(m, t, rng.normal(size=5), s) for m in "ABC" for t in "xyz"
                   for s in range(2)]
        shuffled = [records[i] for i in rng.permutation(len(records))]
        a, b = performance_profile(records, 3), performance_profile(shuffled, 3)
        for m in "ABC":
            np.testing.assert_array_equal(a.fractions[m], b.fractions[m])
            assert np.all((a.fractions[m] >= 0) & (a.fractions[m] <= 1))

    def test_grid_mismatch(self):
        with pytest.raises(ValidationError):
            performance_profile([rec("A", "a", [1]), rec("B", "b", [1])], 1)
        with pytest.raises(ValidationError):
            performance_profile([rec("A", "a", [1]), rec("B", "a", [1, 2])], 1)


class TestPercentiles:
    def test_single_record(self):
        r = rec("A", "a", [0.1, 0.5, 0.7], f_max=1.0)
        out = regret_percentiles([r])["A"]
        for series in out:
            np.testing.assert_allclose(series, r.trace.regret)

    def test_three_values(self):
        recs = [rec("A", t, [1.0 - v], f_max=1.0) for t, v in zip("abc", (0.1, 0.2, 0.3))]
        assert regret_percentiles(recs)["A"][1][0] == pytest.approx(0.2)

    def test_oracle(self):
        vals = [0.9, 0.05, 0.4, 0.33, 0.7]
        recs = [rec("A", f"t{i}", [1.0 - v], f_max=1.0) for i, v in enumerate(vals)]
        got = regret_percentiles(recs)["A"][:, 0]
        regrets = [1.0 - (1.0 - v) for v in vals]
        expected = [percentile_linear(regrets, q) for q in (20, 50, 80)]
        np.testing.assert_allclose(got, expected, atol=1e-15)


class TestSpeedup:
    def test_self(self):
        rng = np.random.default_rng(0)
        recs = [rec("A", t, rng.normal(size=6), s) for t in "ab" for s in range(3)]
        assert speedup_factor(recs, recs) == {"a": 1.0, "b": 1.0}

    def test_censored(self):
        out = speedup_factor([rec("A", "a", [0.1, 1.0])], [rec("B", "a", [0.1, 0.2])])
        assert out["a"] == math.inf
        s = summarize_speedups({"a": math.inf, "b": 2.0, "c": 4.0})
        assert s == {"median": 3.0, "n_finite": 2, "n_not_reached": 1}

    def test_hand_traces(self):
        out = speedup_factor([rec("A", "a", [0.5, 0.9, 0.9])], [rec("B", "a", [0.5, 0.5, 0.9])])
        assert out["a"] == pytest.approx(1.5)


class TestDiagnostics:
    def setup_method(self):
        truth = GPParams(MeanFn("constant", 0.0), KernelFn("matern52", 0.0, (-1.0, -1.0)),
                         -4.0)
        self.ds, _ = sample_tasks(SynthConfig(truth, 2, 5, 12, 0.5, seed=0))
        self.test, _ = sample_tasks(SynthConfig(truth, 2, 1, 10, seed=1))
        self.m = extract_matching(self.ds)

    def test_identical_models(self):
        gp = init_params(("constant", "matern52"), 2, 3)
        table = model_diagnostics(gp, self.ds, self.m, self.test,
                                  models={"a": gp, "b": gp, "c": gp})
        a, b, c = table.rows
        for k in ("nll_held_out", "nll_all", "pseudo_kl"):
            assert a[k] == b[k] == c[k]

    def test_plumbing_and_dominance(self):
        cfg = TrainConfig(steps=60, restarts=1, mean_family=("constant",),
                          kernel_family=("matern52",))
        res = train_gp(self.ds, self.m, cfg)
        table = model_diagnostics(res.best, self.ds, self.m, self.test, steps=30).as_dict()
        multi, init = table["multi_task"], table["init"]
        assert multi["nll_all"] <= init["nll_all"]
        assert abs(multi["nll_all"] - multi_task_nll(res.best, self.ds)) <= 1e-12
        assert abs(multi["pseudo_kl"] - pseudo_kl(moment_estimates(self.m), res.best)) <= 1e-12


class TestHarness:
    def pools(self):
        rng = np.random.default_rng(0)
        return {f"t{i}": Pool(rng.uniform(size=(25, 2)), rng.normal(size=25)) for i in range(2)}

    def test_csv_round_trip(self, tmp_path):
        prior = GPParams(MeanFn("constant", 0.0), KernelFn("matern52", 0.0, (-1.0, -1.0)), -5.0)
        recs = run_grid(self.pools(), [Method("hyperbo", prior, "nll"), Method("rand")],
                        range(2), BoConfig(iterations=6), threads=1)
        write_records(recs, tmp_path)
        back = read_records(tmp_path)
        assert [r.key for r in back] == [r.key for r in recs]
        for a, b in zip(recs, back):
            np.testing.assert_array_equal(a.trace.X, b.trace.X)
            np.testing.assert_array_equal(a.trace.y, b.trace.y)
            np.testing.assert_array_equal(a.trace.regret, b.trace.regret)
        for k in (1, 6):
            pa, pb = performance_profile(recs, k), performance_profile(back, k)
            for m in pa.methods:
                np.testing.assert_array_equal(pa.fractions[m], pb.fractions[m])
        ra, rb = regret_percentiles(recs), regret_percentiles(back)
        for m in ra:
            np.testing.assert_array_equal(ra[m], rb[m])

    def test_thread_count_irrelevant(self):
        a = run_grid(self.pools(), [Method("rand"), Method("stbo")], range(2),
                     BoConfig(iterations=5), threads=1)
        b = run_grid(self.pools(), [Method("rand"), Method("stbo")], range(2),
                     BoConfig(iterations=5), threads=3)
        for x, y in zip(a, b):
            assert x.key == y.key
            np.testing.assert_array_equal(x.trace.y, y.trace.y)

    def test_thread_env(self, monkeypatch):
        from hyperbo.harness import thread_cap
        monkeypatch.setenv("HYPERBO_THREADS", "2")
        assert thread_cap() == 2
        monkeypatch.setenv("HYPERBO_THREADS", "zero")
        with pytest.raises(ValidationError):
            thread_cap()
