"""Fitting a GP prior to many tasks by multi-restart gradient descent."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hyperbo.dataset import MatchingDataset, TuningDataset, task_observations
from hyperbo.errors import DomainError, NumericalError, ValidationError
from hyperbo.gp import KERNEL_KINDS, MEAN_KINDS, STATIONARY_KINDS, GPParams, KernelFn, MeanFn
from hyperbo.objectives import (
    DIAG_EPSILON,
    MomentEstimates,
    ObjectiveKind,
    TaskBatches,
    divergence,
    kl_objective,
    moment_estimates,
    multi_task_nll,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

Structure = tuple[str, str]


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveKind = field(default_factory=ObjectiveKind)
    steps: int = 1000
    restarts: int = 4
    seed: int = 0
    learning_rate: float = 1e-2
    mean_family: tuple[str, ...] = ("constant", "linear")
    kernel_family: tuple[str, ...] = ("squared_exponential", "matern52", "dot_product")
    degenerate_mode: str = "pseudo_kl"
    observation_mode: str = "offline"

    def __post_init__(self):
        object.__setattr__(self, "mean_family", tuple(self.mean_family))
        object.__setattr__(self, "kernel_family", tuple(self.kernel_family))
        if self.steps < 1 or self.restarts < 1:
            raise ValidationError("steps and restarts must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be positive")
        if not self.mean_family or not self.kernel_family:
            raise ValidationError("mean and kernel families must be nonempty")
        for m in self.mean_family:
            if m not in MEAN_KINDS:
                raise ValidationError(f"unknown mean kind {m!r}")
        for k in self.kernel_family:
            if k not in KERNEL_KINDS:
                raise ValidationError(f"unknown kernel kind {k!r}")
        if self.degenerate_mode not in ("pseudo_kl", "epsilon_jitter"):
            raise ValidationError(f"unknown degenerate mode {self.degenerate_mode!r}")

    @property
    def structures(self) -> list[Structure]:
        return [(m, k) for m in self.mean_family for k in self.kernel_family]


@dataclass
class RestartTrace:
    structure: Structure
    restart: int
    values: np.ndarray
    best_so_far: np.ndarray
    best: GPParams | None
    error: str | None = None

    @property
    def final(self) -> float:
        return float(self.best_so_far[-1]) if len(self.best_so_far) else math.inf


@dataclass
class TrainResult:
    best: GPParams
    structure: Structure
    final_objective: float
    traces: list[RestartTrace]
    diagnostics: dict[str, float | None]

    def to_dict(self) -> dict:
        return {
            "params": self.best.to_dict(),
            "structure": list(self.structure),
            "final_objective": self.final_objective,
            "diagnostics": self.diagnostics,
        }

    def trace_rows(self):
        """``(mean, kernel, restart, step, value, best_so_far)`` rows for CSV output."""
        for tr in self.traces:
            for step, (v, b) in enumerate(zip(tr.values, tr.best_so_far)):
                yield (*tr.structure, tr.restart, step, float(v), float(b))


# ---------------------------------------------------------------------------
# initialization


def init_params(structure: Structure, d: int, seed: int, restart: int = 0) -> GPParams:
    """Random starting point for one restart; a separate stream per ``(seed, restart)``."""
    mk, kk = structure
    rng = np.random.default_rng([int(seed) % 2**64, int(restart)])
    if mk == "constant":
        mean = MeanFn("constant", constant=rng.normal())
    else:
        mean = MeanFn("linear", weights=rng.normal(0.0, 0.1, d), bias=rng.normal())
    if kk in STATIONARY_KINDS:
        kernel = KernelFn(kk, log_amplitude=rng.normal(),
                          log_length_scales=rng.normal(size=d))
    else:
        kernel = KernelFn(kk, log_bias_variance=rng.normal(),
                          log_weight_variance=rng.normal())
    return GPParams(mean, kernel, float(rng.normal(-4.0, 1.0)))


# ---------------------------------------------------------------------------
# objectives


class TrainingObjective:
    """Objective value and gradient over the free-parameter vector of one structure."""

    def __init__(self, structure: Structure, d: int, kind: ObjectiveKind,
                 batches: TaskBatches | None, est: MomentEstimates | None,
                 degenerate_mode: str = "pseudo_kl"):
        if kind.uses_nll and batches is None:
            raise ValidationError("NLL objectives need training observations")
        if kind.uses_kl and est is None:
            raise ValidationError("KL objectives need a nonempty matching dataset")
        self.structure = structure
        self.d = d
        self.kind = kind
        self.batches = batches
        self.est = est
        self.epsilon = DIAG_EPSILON if degenerate_mode == "epsilon_jitter" else 0.0

    def params(self, vec) -> GPParams:
        return GPParams.from_vector(self.structure, self.d, vec)

    def evaluate(self, gp: GPParams, with_grad: bool = True):
        value = 0.0
        grad = np.zeros(len(gp.vector())) if with_grad else None
        if self.kind.uses_nll:
            v, g = self.batches.nll(gp, with_grad)
            value += v
            if with_grad:
                grad += g
        if self.kind.uses_kl:
            w = 1.0 if self.kind.kind == "kl" else self.kind.lam
            v, g = kl_objective(gp, self.est, self.epsilon, with_grad)
            value += w * v
            if with_grad:
                grad += w * g
        return value, grad

    def __call__(self, vec):
        return self.evaluate(self.params(vec))


def _prepare(dataset: TuningDataset | None, matching: MatchingDataset | None,
             kind: ObjectiveKind, mode: str = "offline"):
    batches = None
    if kind.uses_nll:
        if dataset is None:
            raise ValidationError("NLL objectives need a dataset")
        batches = TaskBatches(task_observations(dataset, mode))
    est = None
    if kind.uses_kl:
        if matching is None or matching.n_points == 0:
            raise ValidationError("KL objectives need a nonempty matching dataset")
        est = moment_estimates(matching)
    return batches, est


def _dim(dataset: TuningDataset | None, matching: MatchingDataset | None) -> int:
    if dataset is not None:
        return len(dataset.space)
    return matching.inputs.shape[1]


def objective_value(gp: GPParams, dataset: TuningDataset | None,
                    matching: MatchingDataset | None, kind: ObjectiveKind,
                    degenerate_mode: str = "pseudo_kl") -> float:
    batches, est = _prepare(dataset, matching, kind)
    obj = TrainingObjective(gp.structure, _dim(dataset, matching), kind, batches, est,
                            degenerate_mode)
    return obj.evaluate(gp, with_grad=False)[0]


def objective_gradient(gp: GPParams, dataset: TuningDataset | None,
                       matching: MatchingDataset | None, kind: ObjectiveKind,
                       degenerate_mode: str = "pseudo_kl") -> np.ndarray:
    """Analytic gradient of the training objective, ordered as :meth:`GPParams.vector`."""
    batches, est = _prepare(dataset, matching, kind)
    obj = TrainingObjective(gp.structure, _dim(dataset, matching), kind, batches, est,
                            degenerate_mode)
    _, grad = obj.evaluate(gp)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("objective gradient is not finite")
    return grad


# ---------------------------------------------------------------------------
# optimizer


def adam_minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0,
                  steps: int, learning_rate: float = 1e-2,
                  project: Callable[[np.ndarray], np.ndarray] | None = None):
    """Adam with step rejection.

    A step whose loss or gradient is not finite (or raises a numerical error)
    is undone: the iterate goes back to the last good point and the learning
    rate halves.  Returns ``(best_x, best_value, values)`` where ``values``
    holds NaN at rejected steps.  Raises :class:`NumericalError` if the start
    point itself cannot be evaluated.
    """
    b1, b2 = ADAM_BETAS
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    prev = None
    lr = learning_rate
    best_x, best_f = None, math.inf
    values = np.full(steps, np.nan)
    t = 0
    for step in range(steps):
        try:
            with np.errstate(all="ignore"):
                f, g = fun(x)
            ok = math.isfinite(f) and bool(np.all(np.isfinite(g)))
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
            ok = False
        if not ok:
            if prev is None:
                raise NumericalError("objective not finite at the starting point")
            x = prev.copy()
            lr *= 0.5
            continue
        values[step] = f
        if f < best_f:
            best_f, best_x = f, x.copy()
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        prev = x
        x = x - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        if project is not None:
            x = project(x)
    return best_x, best_f, values


def best_so_far(values: np.ndarray) -> np.ndarray:
    filled = np.where(np.isfinite(values), values, np.inf)
    return np.minimum.accumulate(filled)


# ---------------------------------------------------------------------------
# structure search


def train_gp(dataset: TuningDataset | None, matching: MatchingDataset | None = None,
             config: TrainConfig | None = None) -> TrainResult:
    """Fit a GP prior by minimizing ``config.objective`` over every structure.

    Each (mean, kernel) pair gets ``config.restarts`` random starts optimized
    for ``config.steps`` Adam steps.  The returned parameters are the global
    best-so-far; ties go to the earlier structure, then the earlier restart.
    """
    config = config or TrainConfig()
    kind = config.objective
    batches, est = _prepare(dataset, matching, kind, config.observation_mode)
    d = _dim(dataset, matching)

    traces: list[RestartTrace] = []
    best: tuple[float, GPParams, Structure] | None = None
    for structure in config.structures:
        obj = TrainingObjective(structure, d, kind, batches, est, config.degenerate_mode)
        for r in range(config.restarts):
            start = init_params(structure, d, config.seed, r)
            try:
                bx, bf, values = adam_minimize(obj, start.vector(), config.steps,
                                               config.learning_rate)
            except NumericalError as exc:
                log.warning("restart %d of %s failed: %s", r, structure, exc)
                traces.append(RestartTrace(structure, r, np.full(config.steps, np.nan),
                                           np.full(config.steps, np.inf), None, str(exc)))
                continue
            gp = obj.params(bx)
            tr = RestartTrace(structure, r, values, best_so_far(values), gp)
            traces.append(tr)
            if best is None or tr.final < best[0]:
                best = (tr.final, gp, structure)
    if best is None:
        causes = "; ".join(f"{t.structure}#{t.restart}: {t.error}" for t in traces)
        raise NumericalError(f"all restarts failed: {causes}")

    final, gp, structure = best
    if est is None and matching is not None and matching.n_points and matching.n_tasks >= 2:
        est = moment_estimates(matching)
    diagnostics = fit_diagnostics(gp, dataset, est, config.degenerate_mode)
    return TrainResult(gp, structure, final, traces, diagnostics)


def fit_diagnostics(gp: GPParams, dataset: TuningDataset | None,
                    est: MomentEstimates | None, mode: str = "pseudo_kl") -> dict:
    out: dict[str, float | None] = {"nll": None, "kl": None}
    if dataset is not None:
        try:
            out["nll"] = multi_task_nll(gp, dataset)
        except NumericalError:
            pass
    if est is not None:
        try:
            out["kl"] = divergence(est, gp, mode)
        except (DomainError, NumericalError):
            pass
    return out
