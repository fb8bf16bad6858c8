"""Synthetic tuning studies drawn from a known hierarchical GP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from hyperbo.dataset import (
    ParamSpec,
    SearchSpace,
    SubDataset,
    Trial,
    TuningDataset,
    unwarp_input,
)
from hyperbo.errors import ValidationError
from hyperbo.gp import GPParams, GPPosterior, cholesky_jitter, kernel_eval, mean_eval


def unit_space(d: int) -> SearchSpace:
    return SearchSpace(tuple(ParamSpec(f"x{i}", 0.0, 1.0, "linear") for i in range(d)))


@dataclass(frozen=True)
class SynthConfig:
    truth: GPParams
    d: int
    n_tasks: int
    points_per_task: int | tuple[int, ...] = 64
    matched_fraction: float = 0.0
    seed: int = 0
    space: SearchSpace | None = None

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValidationError("need at least one task")
        if not 0.0 <= self.matched_fraction <= 1.0:
            raise ValidationError("matched_fraction must lie in [0, 1]")
        counts = self.counts()
        if len(counts) != self.n_tasks or min(counts) < 1:
            raise ValidationError("points_per_task must be >= 1 for every task")
        if self.space is not None and len(self.space) != self.d:
            raise ValidationError("search space dimension does not match d")

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.points_per_task, int):
            return (self.points_per_task,) * self.n_tasks
        return tuple(int(m) for m in self.points_per_task)

    @property
    def n_matched(self) -> int:
        return int(round(min(self.counts()) * self.matched_fraction))


class TaskFunction:
    """One sampled task: the conditional mean of the truth GP given its latent draws.

    Calling it on warped inputs returns latent function values.  Stored
    inputs return their stored latent value exactly.
    """

    def __init__(self, truth: GPParams, inputs: np.ndarray, latent: np.ndarray):
        self.truth = truth
        self.inputs = np.asarray(inputs, dtype=float)
        self.latent = np.asarray(latent, dtype=float)
        self._post = GPPosterior(truth.with_noise(-math.inf), self.inputs, self.latent)

    def __call__(self, Xq) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        out, _ = self._post.predict(Xq)
        eq = np.all(Xq[:, None, :] == self.inputs[None, :, :], axis=-1)
        hit = eq.any(axis=1)
        out[hit] = self.latent[np.argmax(eq[hit], axis=1)]
        return out


def sample_tasks(config: SynthConfig) -> tuple[TuningDataset, list[TaskFunction]]:
    """Draw ``n_tasks`` functions from the truth GP and noisy observations of each.

    A shared block of ``round(min M_i * matched_fraction)`` inputs is used by
    every task; all other inputs are fresh uniform draws per task.
    """
    truth = config.truth
    d = config.d
    space = config.space or unit_space(d)
    root = np.random.SeedSequence(int(config.seed) % 2**64)
    grid_seq, *task_seqs = root.spawn(config.n_tasks + 1)
    n_matched = config.n_matched
    grid = np.random.default_rng(grid_seq).uniform(size=(n_matched, d))
    noise_sd = math.sqrt(truth.noise_variance)
    tasks, handles = [], []
    for i, (m, seq) in enumerate(zip(config.counts(), task_seqs)):
        rng = np.random.default_rng(seq)
        X = np.vstack([grid, rng.uniform(size=(m - n_matched, d))])
        K = kernel_eval(truth.kernel, X, X)
        L, _ = cholesky_jitter(K, truth.kernel.jitter_scale())
        f = mean_eval(truth.mean, X) + L @ rng.standard_normal(m)
        y = f + noise_sd * rng.standard_normal(m)
        trials = tuple(Trial(unwarp_input(space, x), float(v), True) for x, v in zip(X, y))
        tasks.append(SubDataset(f"task{i:03d}", trials))
        handles.append(TaskFunction(truth, X, f))
    return TuningDataset(space, tuple(tasks), "value"), handles


def task_max(handle, d: int, resolution: int = 4096, seed: int = 0) -> float:
    """Largest value of ``handle`` over a scrambled Halton set of ``resolution`` points.

    This is a lower bound on the true maximum.  Sets for equal ``seed`` are
    nested, so more resolution never lowers the estimate.
    """
    if resolution < 1000:
        raise ValidationError("task_max needs a resolution of at least 1000 points")
    pts = qmc.Halton(d, scramble=True, seed=seed).random(resolution)
    vals = np.concatenate([handle(pts[i:i + 8192]) for i in range(0, resolution, 8192)])
    return float(np.max(vals))


def truth_sidecar(truth: GPParams, dataset: TuningDataset,
                  handles: Sequence[TaskFunction]) -> dict:
    return {
        "truth": truth.to_dict(),
        "tasks": [
            {"task_id": t.task_id, "inputs": h.inputs.tolist(), "latent": h.latent.tolist()}
            for t, h in zip(dataset.tasks, handles)
        ],
    }


def load_sidecar(path: str | Path) -> tuple[GPParams, dict[str, TaskFunction]]:
    doc = json.loads(Path(path).read_text())
    truth = GPParams.from_dict(doc["truth"])
    handles = {
        t["task_id"]: TaskFunction(truth, np.array(t["inputs"], dtype=float),
                                   np.array(t["latent"], dtype=float))
        for t in doc["tasks"]
    }
    return truth, handles
