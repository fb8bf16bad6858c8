"""Benchmark summaries: performance profiles, regret percentiles, speedups, model diagnostics.

Every report is a pure function of its run records.  Records are sorted by
``(method, task, seed)`` before any reduction, so input order never changes
a result.  When a (method, task) pair has several seeds, its best-so-far
curve is the mean over seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from hyperbo.bo import BoTrace
from hyperbo.dataset import MatchingDataset, TuningDataset, task_observations
from hyperbo.errors import ValidationError
from hyperbo.gp import GPParams, nll_subdataset
from hyperbo.objectives import TaskBatches, moment_estimates, multi_task_nll, pseudo_kl
from hyperbo.training import adam_minimize, init_params


@dataclass
class RunRecord:
    method: str
    task: str
    seed: int
    trace: BoTrace
    seconds: float = 0.0

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.method, self.task, self.seed)


@dataclass
class ProfileReport:
    """Fraction of tasks on which each method is strictly better than the criterion.

    ``fractions[m][t - 1]`` is the value at iteration ``t``.
    """

    methods: tuple[str, ...]
    tasks: tuple[str, ...]
    criterion_iteration: int
    criterion: dict[str, float]
    fractions: dict[str, np.ndarray]
    definition: str = ("per task: median over all methods (the profiled one included) of "
                       "the seed-mean best-so-far value at the criterion iteration")

    def rows(self):
        """``(iteration, series, value)`` rows."""
        for m in self.methods:
            for t, v in enumerate(self.fractions[m], start=1):
                yield t, m, float(v)


def _sorted(records: Iterable[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: r.key)


def _grid(records: Sequence[RunRecord]):
    """Check the (method x task x seed) grid is complete and traces share one length."""
    if not records:
        raise ValidationError("no run records")
    methods = tuple(sorted({r.method for r in records}))
    tasks = tuple(sorted({r.task for r in records}))
    seeds = {}
    for r in records:
        seeds.setdefault((r.method, r.task), set()).add(r.seed)
    ref = seeds[(methods[0], tasks[0])] if (methods[0], tasks[0]) in seeds else None
    for m in methods:
        for t in tasks:
            if seeds.get((m, t)) != ref:
                raise ValidationError(f"record grid mismatch at method {m!r}, task {t!r}")
    lengths = {len(r.trace) for r in records}
    if len(lengths) != 1:
        raise ValidationError(f"traces have different lengths {sorted(lengths)}")
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        raise ValidationError("duplicate (method, task, seed) records")
    return methods, tasks, lengths.pop()


def mean_curves(records: Iterable[RunRecord]) -> dict[tuple[str, str], np.ndarray]:
    """Seed-mean best-so-far curve for every (method, task)."""
    groups: dict[tuple[str, str], list[np.ndarray]] = {}
    for r in _sorted(records):
        groups.setdefault((r.method, r.task), []).append(r.trace.best_so_far)
    return {k: np.mean(np.stack(v), axis=0) for k, v in groups.items()}


def performance_profile(records: Iterable[RunRecord], criterion_iteration: int) -> ProfileReport:
    """Per-iteration fraction of tasks where each method strictly beats the criterion."""
    records = _sorted(records)
    methods, tasks, T = _grid(records)
    if not 1 <= criterion_iteration <= T:
        raise ValidationError(f"criterion_iteration must lie in [1, {T}]")
    curves = mean_curves(records)
    criterion = {t: float(np.median([curves[(m, t)][criterion_iteration - 1] for m in methods]))
                 for t in tasks}
    fractions = {}
    for m in methods:
        wins = np.stack([curves[(m, t)] > criterion[t] for t in tasks])
        fractions[m] = wins.sum(axis=0) / len(tasks)
    return ProfileReport(methods, tasks, criterion_iteration, criterion, fractions)


def regret_percentiles(records: Iterable[RunRecord],
                       q: tuple[float, ...] = (20.0, 50.0, 80.0)) -> dict[str, np.ndarray]:
    """Per method, an array of shape ``(len(q), T)`` of regret percentiles.

    Percentiles pool every (task, seed) regret at each iteration and use
    linear interpolation between order statistics with inclusive endpoints.
    """
    records = _sorted(records)
    if not records:
        raise ValidationError("no run records")
    out = {}
    for m in sorted({r.method for r in records}):
        regrets = []
        for r in records:
            if r.method != m:
                continue
            if r.trace.regret is None:
                raise ValidationError(f"record {r.key} has no f_max, so no regret")
            regrets.append(r.trace.regret)
        out[m] = np.percentile(np.stack(regrets), q, axis=0, method="linear")
    return out


def _first_hit(curve: np.ndarray, target: float) -> float:
    hits = np.flatnonzero(curve >= target)
    return float(hits[0] + 1) if len(hits) else math.inf


def speedup_factor(records_a: Iterable[RunRecord],
                   records_b: Iterable[RunRecord]) -> dict[str, float]:
    """Per task, how many times longer B takes to reach A's final best value.

    The ratio is ``(first iteration where B reaches it) / (first iteration
    where A does)`` on the seed-mean best-so-far curves, and ``inf`` when B
    never does.
    """
    ca, cb = mean_curves(records_a), mean_curves(records_b)
    ta = sorted({t for _, t in ca})
    tb = sorted({t for _, t in cb})
    if ta != tb:
        raise ValidationError("methods were not run on the same tasks")
    out = {}
    for task in ta:
        (a,) = [v for (m, t), v in ca.items() if t == task]
        (b,) = [v for (m, t), v in cb.items() if t == task]
        target = a[-1]
        out[task] = _first_hit(b, target) / _first_hit(a, target)
    return out


def summarize_speedups(ratios: dict[str, float]) -> dict[str, float | int]:
    """Median of finite ratios and the count of censored tasks, kept separate."""
    finite = [v for v in ratios.values() if math.isfinite(v)]
    return {
        "median": float(np.median(finite)) if finite else math.nan,
        "n_finite": len(finite),
        "n_not_reached": len(ratios) - len(finite),
    }


# ---------------------------------------------------------------------------
# model quality


@dataclass
class DiagnosticsTable:
    """One row per model with held-out NLL, training NLL and pseudo-KL."""

    rows: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict[str, dict]:
        return {r["model"]: r for r in self.rows}


def diagnostics_row(name: str, model: GPParams, dataset: TuningDataset,
                    matching: MatchingDataset | None, held_out) -> dict:
    X, y = held_out
    row = {"model": name, "nll_held_out": nll_subdataset(model, X, y),
           "nll_all": multi_task_nll(model, dataset), "pseudo_kl": None}
    if matching is not None and matching.n_points and matching.n_tasks >= 2:
        row["pseudo_kl"] = pseudo_kl(moment_estimates(matching), model)
    return row


def fit_single_task(structure, X, y, seed: int = 0, steps: int = 1000,
                    learning_rate: float = 1e-2) -> GPParams:
    """Marginal-likelihood fit on one task's data, from the restart-0 initialization."""
    d = X.shape[1]
    start = init_params(structure, d, seed, 0)
    batches = TaskBatches([(X, y)])
    bx, _, _ = adam_minimize(lambda v: batches.nll(GPParams.from_vector(structure, d, v)),
                             start.vector(), steps, learning_rate)
    return GPParams.from_vector(structure, d, bx)


def model_diagnostics(trained: GPParams, dataset: TuningDataset,
                      matching: MatchingDataset | None, test_task: TuningDataset,
                      seed: int = 0, steps: int = 1000, learning_rate: float = 1e-2,
                      models: dict[str, GPParams] | None = None) -> DiagnosticsTable:
    """Compare an untrained, a single-task and the multi-task model.

    The single-task model is fit on the first half of the test task's
    observations; held-out NLL uses the second half.  ``models`` overrides
    the three compared models by name.
    """
    (X, y), *_ = task_observations(test_task)
    if len(y) < 2:
        raise ValidationError("the test task needs at least two observations")
    half = len(y) // 2
    if models is None:
        structure = trained.structure
        models = {
            "init": init_params(structure, X.shape[1], seed, 0),
            "single_task": fit_single_task(structure, X[:half], y[:half], seed, steps,
                                           learning_rate),
            "multi_task": trained,
        }
    table = DiagnosticsTable()
    for name, model in models.items():
        table.rows.append(diagnostics_row(name, model, dataset, matching,
                                          (X[half:], y[half:])))
    return table
