import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperbo.dataset import (
    ParamSpec,
    SearchSpace,
    SubDataset,
    Trial,
    TuningDataset,
    extract_matching,
    load_study,
    save_study,
    study_to_dict,
    task_observations,
    warp_input,
    warp_objective,
    warp_online,
)
from hyperbo.errors import DomainError, IngestionError, ValidationError

TABLE2_SPACE = [
    {"name": "eta", "low": 1e-5, "high": 10.0, "scaling": "log"},
    {"name": "p", "low": 0.1, "high": 2.0, "scaling": "linear"},
    {"name": "one_minus_beta", "low": 1e-3, "high": 1.0, "scaling": "log"},
    {"name": "lam", "low": 0.01, "high": 0.99, "scaling": "linear"},
]


def write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestLoadStudy:
    def test_minimal_study(self, tmp_path):
        doc = {
            "space": [{"name": "lr", "low": 1e-4, "high": 1.0, "scaling": "log"}],
            "tasks": [{"task_id": "a", "trials": [
                {"params": {"lr": 0.01}, "objective": 0.1, "feasible": True}]}],
        }
        ds = load_study(write(tmp_path, doc))
        assert len(ds.tasks) == 1
        assert len(ds.tasks[0].trials) == 1
        assert ds.tasks[0].trials[0].objective == 0.1

    def test_missing_parameter(self, tmp_path):
        doc = {
            "space": [{"name": "lr", "low": 1e-4, "high": 1.0, "scaling": "log"},
                      {"name": "wd", "low": 0.0, "high": 1.0, "scaling": "linear"}],
            "tasks": [{"task_id": "a", "trials": [
                {"params": {"lr": 0.01}, "objective": 0.1, "feasible": True}]}],
        }
        with pytest.raises(IngestionError, match="missing"):
            load_study(write(tmp_path, doc))

    def test_unknown_parameter(self, tmp_path):
        doc = {
            "space": [{"name": "lr", "low": 1e-4, "high": 1.0, "scaling": "log"}],
            "tasks": [{"task_id": "a", "trials": [
                {"params": {"lr": 0.01, "mom": 0.9}, "objective": 0.1, "feasible": True}]}],
        }
        with pytest.raises(IngestionError, match="unknown"):
            load_study(write(tmp_path, doc))

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(IngestionError):
            load_study(path)

    def test_bad_space(self, tmp_path):
        doc = {"space": [{"name": "lr", "low": 0.0, "high": 1.0, "scaling": "log"}],
               "tasks": []}
        with pytest.raises(IngestionError):
            load_study(write(tmp_path, doc))

    def test_infeasible_trial_without_objective(self, tmp_path):
        doc = {
            "space": [{"name": "x", "low": 0.0, "high": 1.0, "scaling": "linear"}],
            "tasks": [{"task_id": "a", "trials": [
                {"params": {"x": 0.5}, "objective": None, "feasible": False},
                {"params": {"x": 0.2}, "objective": 0.3, "feasible": True}]}],
        }
        ds = load_study(write(tmp_path, doc))
        assert ds.tasks[0].trials[0].objective is None
        (X, y), = task_observations(ds)
        assert X.shape == (1, 1)

    def test_table2_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        space = SearchSpace(tuple(ParamSpec(**p) for p in TABLE2_SPACE))
        trials = []
        for _ in range(20):
            u = rng.uniform(size=4)
            params = {p.name: p.unwarp(v) for p, v in zip(space.dims, u)}
            trials.append(Trial(params, float(rng.uniform(0, 1)), True))
        ds = TuningDataset(space, (SubDataset("t0", tuple(trials)),))
        save_study(ds, tmp_path / "a.json")
        again = load_study(tmp_path / "a.json")
        assert study_to_dict(again) == study_to_dict(ds)
        save_study(again, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
        assert [p.scaling for p in again.space.dims] == ["log", "linear", "log", "linear"]


class TestWarpInput:
    def test_linear_midpoint(self):
        space = SearchSpace((ParamSpec("x", 0.0, 10.0, "linear"),))
        assert warp_input(space, {"x": 5.0})[0] == 0.5

    def test_log_endpoints(self):
        space = SearchSpace((ParamSpec("eta", 1e-5, 10.0, "log"),))
        assert warp_input(space, {"eta": 1e-5})[0] == 0.0
        assert warp_input(space, {"eta": 10.0})[0] == 1.0

    def test_log_interior(self):
        space = SearchSpace((ParamSpec("eta", 1e-5, 10.0, "log"),))
        # (ln 0.01 - ln 1e-5) / (ln 10 - ln 1e-5) = 3 / 6
        assert warp_input(space, {"eta": 0.01})[0] == pytest.approx(0.5, abs=1e-12)

    def test_out_of_range(self):
        space = SearchSpace((ParamSpec("x", 0.0, 1.0, "linear"),))
        with pytest.raises(DomainError):
            warp_input(space, {"x": 1.5})

    @given(st.floats(1e-5, 10.0), st.floats(1e-5, 10.0))
    def test_log_monotone(self, a, b):
        spec = ParamSpec("eta", 1e-5, 10.0, "log")
        if a < b:
            assert spec.warp(a) < spec.warp(b)
        assert 0.0 <= spec.warp(a) <= 1.0

    @given(st.floats(0.0, 1.0))
    def test_bijective(self, u):
        for spec in (ParamSpec("a", 1e-3, 1.0, "log"), ParamSpec("b", 0.1, 2.0)):
            assert spec.warp(min(max(spec.unwarp(u), spec.low), spec.high)) == pytest.approx(
                u, abs=1e-12)


class TestWarpObjective:
    def test_one(self):
        assert warp_objective(1.0) == pytest.approx(0.0, abs=1e-9)

    def test_tenth(self):
        assert warp_objective(0.1) == pytest.approx(2.302585, abs=1e-6)

    def test_zero(self):
        assert warp_objective(0.0) == pytest.approx(23.025851, abs=1e-6)

    def test_negative(self):
        with pytest.raises(DomainError):
            warp_objective(-0.1)


class TestWarpOnline:
    def test_max_maps_to_two(self):
        out = warp_online([0.3, 1.7, -0.5, 0.9], [True] * 4)
        assert out[1] == 2.0

    def test_infeasible(self):
        out = warp_online([0.3, None, 0.9], [True, False, True])
        assert out[1] == -2.0

    def test_asymptote(self):
        out = warp_online([0.0, 1.0, -1e3], [True] * 3)
        assert -2.0 < out[2] < -2.0 + 1e-12 or out[2] == -2.0
        out = warp_online([0.0, 1.0, -30.0], [True] * 3)
        assert -2.0 < out[2] < -1.99999

    def test_lower_median(self):
        # median of {1, 2, 3, 4} is 2 with the lower-middle convention
        y = np.array([1.0, 2.0, 3.0, 4.0])
        sp = np.logaddexp(0, y - 2.0)
        expected = sp / sp[-1] * 4 - 2
        np.testing.assert_allclose(warp_online(list(y), [True] * 4), expected, atol=1e-15)

    def test_all_infeasible(self):
        with pytest.raises(ValidationError):
            warp_online([None, None], [False, False])

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
           st.lists(st.booleans(), min_size=12, max_size=12))
    def test_range_and_order(self, ys, flags):
        flags = flags[:len(ys)]
        flags[0] = True
        out = warp_online(ys, flags)
        assert np.all(out >= -2.0) and np.all(out <= 2.0)
        feas = [(y, o) for y, o, f in zip(ys, out, flags) if f]
        for y1, o1 in feas:
            for y2, o2 in feas:
                if y1 < y2:
                    assert o1 <= o2


def _grid_dataset(task_points):
    space = SearchSpace((ParamSpec("x", 0.0, 1.0), ParamSpec("z", 0.0, 1.0)))
    tasks = []
    for i, pts in enumerate(task_points):
        trials = tuple(Trial({"x": a, "z": b}, 0.1 + 0.01 * i + 0.001 * k, True)
                       for k, (a, b) in enumerate(pts))
        tasks.append(SubDataset(f"t{i}", trials))
    return TuningDataset(space, tuple(tasks))


class TestExtractMatching:
    def test_full_overlap(self):
        grid = [(a, b) for a in (0.0, 0.5, 1.0) for b in (0.25, 0.75)]
        m = extract_matching(_grid_dataset([grid, grid[::-1], grid]), tol=0.0)
        assert m.values.shape == (6, 3)

    def test_disjoint(self):
        m = extract_matching(_grid_dataset([[(0.1, 0.1)], [(0.2, 0.2)]]))
        assert m.values.shape == (0, 2)

    def test_shared_pair(self):
        a, b = (0.1, 0.2), (0.7, 0.4)
        tasks = [[a, (0.9, 0.9), b], [(0.3, 0.3), b, a], [a, b, (0.5, 0.5), (0.6, 0.6)]]
        ds = _grid_dataset(tasks)
        m = extract_matching(ds)
        # brute-force set intersection of the warped inputs
        sets = [set(map(tuple, X)) for X, _ in task_observations(ds)]
        common = set.intersection(*sets)
        assert m.values.shape == (len(common), 3) == (2, 3)
        assert set(map(tuple, m.inputs)) == common
        obs = task_observations(ds)
        for j, x in enumerate(m.inputs):
            for i, (X, y) in enumerate(obs):
                k = int(np.flatnonzero(np.all(X == x, axis=1))[0])
                assert m.values[j, i] == y[k]

    def test_first_occurrence_wins(self):
        ds = _grid_dataset([[(0.1, 0.1), (0.1, 0.1)], [(0.1, 0.1)]])
        m = extract_matching(ds)
        assert m.values.shape == (1, 2)
        assert m.values[0, 0] == warp_objective(0.1)

    def test_tolerance(self):
        ds = _grid_dataset([[(0.1, 0.1)], [(0.1 + 1e-12, 0.1)]])
        assert extract_matching(ds, tol=0.0).n_points == 0
        assert extract_matching(ds).n_points == 1


def test_dataset_validation():
    space = SearchSpace((ParamSpec("x", 0.0, 1.0),))
    with pytest.raises(ValidationError):
        TuningDataset(space, ())
    with pytest.raises(ValidationError):
        SubDataset("a", ())
    with pytest.raises(ValidationError):
        SearchSpace((ParamSpec("x", 0.0, 1.0), ParamSpec("x", 0.0, 2.0)))
    with pytest.raises(ValidationError):
        ParamSpec("x", 1.0, 1.0)
