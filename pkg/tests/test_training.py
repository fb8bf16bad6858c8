import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperbo.bo import STBOH_PRIORS, StbohObjective, fit_stboh, softclip, softclip_inv, \
    stboh_initial
from hyperbo.dataset import extract_matching
from hyperbo.errors import NumericalError, ValidationError
from hyperbo.gp import KERNEL_KINDS, MEAN_KINDS, GPParams, KernelFn, MeanFn
from hyperbo.objectives import ObjectiveKind, divergence, moment_estimates, multi_task_nll
from hyperbo.synth import SynthConfig, sample_tasks
from hyperbo.training import (
    TrainConfig,
    adam_minimize,
    best_so_far,
    init_params,
    objective_gradient,
    objective_value,
    train_gp,
)

from oracles import central_fd

TRUTH = GPParams(MeanFn("constant", 0.5), KernelFn("squared_exponential", 0.0, (-1.0, -1.0)),
                 math.log(0.01))


def small_study(n_tasks=4, points=6, matched=1.0, seed=0):
    return sample_tasks(SynthConfig(TRUTH, 2, n_tasks, points, matched, seed=seed))[0]


def fd_check(gp, ds, m, kind):
    g = objective_gradient(gp, ds, m, kind)

    def f(v):
        return objective_value(GPParams.from_vector(gp.structure, 2, v), ds, m, kind)

    fd = central_fd(f, gp.vector(), h=1e-5)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)


class TestInitParams:
    def test_reproducible(self):
        assert init_params(("linear", "matern52"), 3, 7, 1) == \
            init_params(("linear", "matern52"), 3, 7, 1)

    def test_restarts_differ(self):
        assert init_params(("constant", "matern52"), 3, 7, 0) != \
            init_params(("constant", "matern52"), 3, 7, 1)

    @given(st.integers(0, 2**32), st.integers(0, 10),
           st.sampled_from([(m, k) for m in MEAN_KINDS for k in KERNEL_KINDS]))
    def test_positive_noise(self, seed, restart, structure):
        gp = init_params(structure, 2, seed, restart)
        assert gp.noise_variance > 0
        assert gp.structure == structure


class TestGradient:
    @pytest.mark.parametrize("structure", [(m, k) for m in MEAN_KINDS for k in KERNEL_KINDS])
    @pytest.mark.parametrize("kind", ["nll", "kl", "nllkl"])
    def test_finite_differences(self, structure, kind):
        ds = small_study(3, 4)
        m = extract_matching(ds)
        gp = init_params(structure, 2, 3)
        assert fd_check(gp, ds, m, ObjectiveKind.parse(kind)) <= 1e-4

    def test_epsilon_mode(self):
        ds = small_study(2, 4)
        m = extract_matching(ds)
        gp = init_params(("constant", "matern52"), 2, 4)
        g = objective_gradient(gp, ds, m, ObjectiveKind("kl"), "epsilon_jitter")

        def f(v):
            return objective_value(GPParams.from_vector(gp.structure, 2, v), ds, m,
                                   ObjectiveKind("kl"), "epsilon_jitter")

        fd = central_fd(f, gp.vector())
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_linearity(self):
        ds = small_study(3, 5)
        m = extract_matching(ds)
        gp = init_params(("linear", "squared_exponential"), 2, 5)
        g_nll = objective_gradient(gp, ds, m, ObjectiveKind("nll"))
        g_kl = objective_gradient(gp, ds, m, ObjectiveKind("kl"))
        g_mix = objective_gradient(gp, ds, m, ObjectiveKind("nll_kl", 10.0))
        np.testing.assert_allclose(g_mix, g_nll + 10 * g_kl, atol=1e-9)

    def test_stationary_constant(self):
        # symmetric data around 0.7 with a diagonal-ish Gram: the mean gradient vanishes there
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        obs = [(X, np.array([0.2, 1.2])), (X, np.array([1.2, 0.2]))]
        from hyperbo.objectives import TaskBatches
        gp = GPParams(MeanFn("constant", 0.7), KernelFn("matern52", 0.0, (-3.0, -3.0)), -2.0)
        _, g = TaskBatches(obs).nll(gp)
        assert abs(g[0]) <= 1e-12


class TestAdam:
    def test_quadratic(self):
        x, f, vals = adam_minimize(lambda x: (float(x @ x), 2 * x), [3.0, -2.0], 2000, 0.05)
        assert f < 1e-6
        assert np.all(np.isfinite(vals))

    def test_rejects_non_finite_steps(self):
        def fun(x):
            if x[0] < 0.5:
                raise NumericalError("bad region")
            return float((x[0] - 0.0) ** 2), np.array([2 * x[0]])

        x, f, vals = adam_minimize(fun, [1.0], 300, 0.1)
        assert x[0] >= 0.5
        assert np.isnan(vals).any()

    def test_bad_start(self):
        with pytest.raises(NumericalError):
            adam_minimize(lambda x: (math.nan, x), [1.0], 5)

    def test_best_so_far(self):
        np.testing.assert_array_equal(best_so_far(np.array([3.0, np.nan, 1.0, 2.0])),
                                      [3.0, 3.0, 1.0, 1.0])


class TestTrainGP:
    def setup_method(self):
        self.ds = small_study(6, 10)
        self.cfg = TrainConfig(steps=40, restarts=2, mean_family=("constant", "linear"),
                               kernel_family=("squared_exponential", "matern32"))

    def test_deterministic(self):
        a = train_gp(self.ds, None, self.cfg)
        b = train_gp(self.ds, None, self.cfg)
        assert a.best == b.best
        assert a.final_objective == b.final_objective
        for ta, tb in zip(a.traces, b.traces):
            np.testing.assert_array_equal(ta.values, tb.values)

    def test_every_structure_restarts_times(self):
        r = train_gp(self.ds, None, self.cfg)
        seen = [(t.structure, t.restart) for t in r.traces]
        assert seen == [(s, i) for s in self.cfg.structures for i in range(2)]

    def test_best_dominates_initializations(self):
        r = train_gp(self.ds, None, self.cfg)
        for s in self.cfg.structures:
            for i in range(2):
                assert r.final_objective <= multi_task_nll(init_params(s, 2, 0, i), self.ds)
        for t in r.traces:
            assert np.all(np.diff(t.best_so_far) <= 0)
        assert r.final_objective == pytest.approx(multi_task_nll(r.best, self.ds), rel=1e-12)

    def test_kl_improves(self):
        ds = sample_tasks(SynthConfig(TRUTH, 2, 64, 12, 0.5, seed=3))[0]
        m = extract_matching(ds)
        cfg = TrainConfig(ObjectiveKind("kl"), steps=150, restarts=1, learning_rate=0.05,
                          mean_family=("constant",), kernel_family=("squared_exponential",))
        r = train_gp(ds, m, cfg)
        est = moment_estimates(m)
        start = init_params(("constant", "squared_exponential"), 2, 0, 0)
        assert divergence(est, r.best) < divergence(est, start)
        assert r.diagnostics["kl"] == pytest.approx(divergence(est, r.best), abs=1e-9)

    def test_kl_needs_matching(self):
        with pytest.raises(ValidationError):
            train_gp(self.ds, None, TrainConfig(ObjectiveKind("kl"), steps=2, restarts=1))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(kernel_family=("rbf",))
        with pytest.raises(ValidationError):
            TrainConfig(steps=0)


class TestStboh:
    def test_band(self):
        obj = StbohObjective(2, np.zeros((0, 2)), np.zeros(0))
        assert obj.low[0] == pytest.approx(-3.326348, abs=1e-6)
        assert obj.high[0] == pytest.approx(1.326348, abs=1e-6)

    @given(st.floats(-1e3, 1e3))
    def test_softclip_in_band(self, x):
        v = softclip(x, -3.326348, 1.326348)
        assert -3.326348 <= v <= 1.326348

    @given(st.floats(-3.2, 1.2))
    def test_softclip_inverse(self, y):
        assert softclip(softclip_inv(y, -3.326348, 1.326348), -3.326348, 1.326348) == \
            pytest.approx(y, abs=1e-9)

    def test_prior_only_optimum(self):
        start = GPParams(MeanFn("constant", 0.0), KernelFn("matern52", 0.5, (0.7, -0.4)), -4.0)
        gp = fit_stboh(np.zeros((0, 2)), np.zeros(0), start, steps=3000, learning_rate=0.02)
        v = gp.vector()
        np.testing.assert_allclose(v[1:], [-1.0, 0.0, 0.0, -6.0], atol=1e-3)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        obj = StbohObjective(2, rng.uniform(size=(5, 2)), rng.normal(size=5))
        u = obj.unconstrained(stboh_initial(2)) + rng.normal(0, 0.3, 5)
        _, g = obj(u)
        fd = central_fd(lambda v: obj(v)[0], u)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)

    def test_priors(self):
        assert STBOH_PRIORS == {"amplitude": (-1.0, 1.0), "length_scale": (0.0, 1.0),
                                "noise": (-6.0, 3.0)}
