"""Search spaces, tuning studies, and the input/output warpings.

All GP math in this package runs on warped inputs in the unit hypercube and
on warped objective values, where larger is better.  The helpers here turn a
:class:`TuningDataset` read from disk into those arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from hyperbo.errors import DomainError, IngestionError, ValidationError

OBJECTIVE_OFFSET = 1e-10
DEFAULT_MATCH_TOL = 1e-9

# objective kinds whose raw values are minimized and get the -log warp
_LOG_WARPED_KINDS = ("error_rate", "loss")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    low: float
    high: float
    scaling: str = "linear"

    def __post_init__(self):
        if self.scaling not in ("linear", "log"):
            raise ValidationError(
                f"parameter {self.name!r}: unknown scaling {self.scaling!r}"
            )
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ValidationError(f"parameter {self.name!r}: bounds must be finite")
        if not self.low < self.high:
            raise ValidationError(
                f"parameter {self.name!r}: low={self.low} must be < high={self.high}"
            )
        if self.scaling == "log" and self.low <= 0:
            raise ValidationError(
                f"parameter {self.name!r}: log scaling needs low > 0, got {self.low}"
            )

    def warp(self, value: float) -> float:
        if not self.low <= value <= self.high:
            raise DomainError(
                f"parameter {self.name!r}: value {value} outside "
                f"[{self.low}, {self.high}]"
            )
        if self.scaling == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return (math.log(value) - lo) / (hi - lo)
        return (value - self.low) / (self.high - self.low)

    def unwarp(self, u: float) -> float:
        """Inverse of :meth:`warp` for ``u`` in [0, 1]."""
        if self.scaling == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return math.exp(lo + u * (hi - lo))
        return self.low + u * (self.high - self.low)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[ParamSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if len(self.dims) < 1:
            raise ValidationError("search space needs at least one parameter")
        names = [p.name for p in self.dims]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate parameter names in {names}")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.dims]

    def __len__(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class Trial:
    params: Mapping[str, float]
    objective: float | None
    feasible: bool = True


@dataclass(frozen=True)
class SubDataset:
    task_id: str
    trials: tuple[Trial, ...]

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        if len(self.trials) < 1:
            raise ValidationError(f"task {self.task_id!r} has no trials")


@dataclass(frozen=True)
class TuningDataset:
    space: SearchSpace
    tasks: tuple[SubDataset, ...]
    objective_kind: str = "error_rate"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if len(self.tasks) < 1:
            raise ValidationError("dataset needs at least one task")
        names = set(self.space.names)
        for task in self.tasks:
            for j, trial in enumerate(task.trials):
                missing = names - set(trial.params)
                if missing:
                    raise ValidationError(
                        f"task {task.task_id!r} trial {j}: missing parameters "
                        f"{sorted(missing)}"
                    )
                unknown = set(trial.params) - names
                if unknown:
                    raise ValidationError(
                        f"task {task.task_id!r} trial {j}: unknown parameters "
                        f"{sorted(unknown)}"
                    )
                if trial.feasible and trial.objective is None:
                    raise ValidationError(
                        f"task {task.task_id!r} trial {j}: feasible trial "
                        "without an objective"
                    )
                for spec in self.space.dims:
                    v = trial.params[spec.name]
                    if not spec.low <= v <= spec.high:
                        raise ValidationError(
                            f"task {task.task_id!r} trial {j}: {spec.name}={v} "
                            f"outside [{spec.low}, {spec.high}]"
                        )

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def task(self, task_id: str) -> SubDataset:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ValidationError(f"no task with id {task_id!r}")

    def subset(self, task_ids: Sequence[str]) -> "TuningDataset":
        return TuningDataset(
            self.space, tuple(self.task(t) for t in task_ids), self.objective_kind
        )

    def without(self, task_id: str) -> "TuningDataset":
        self.task(task_id)
        return self.subset([t for t in self.task_ids if t != task_id])


@dataclass(frozen=True)
class MatchingDataset:
    """Inputs evaluated on every task, with an ``M x N`` value matrix."""

    inputs: np.ndarray
    values: np.ndarray
    task_ids: tuple[str, ...] = field(default=())

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# warpings


def warp_input(space: SearchSpace, params: Mapping[str, float]) -> np.ndarray:
    """Map native parameter values to the unit hypercube, one coordinate per dim."""
    return np.array([spec.warp(float(params[spec.name])) for spec in space.dims])


def unwarp_input(space: SearchSpace, u: Sequence[float]) -> dict[str, float]:
    return {spec.name: spec.unwarp(float(v)) for spec, v in zip(space.dims, u)}


def warp_objective(r: float) -> float:
    """``-ln(r + 1e-10)``: error rates become a maximization target."""
    if r < 0:
        raise DomainError(f"error rate must be >= 0, got {r}")
    return -math.log(r + OBJECTIVE_OFFSET)


def _softplus(x):
    return np.logaddexp(0.0, x)


def warp_online(values: Sequence[float | None], feasible: Sequence[bool]) -> np.ndarray:
    """Squash one task's values into [-2, 2], sending infeasible entries to -2.

    Feasible values go through ``softplus(y - med) / softplus(y_max - med) * 4 - 2``
    where ``med`` is the lower median of the feasible values.
    """
    if len(values) != len(feasible):
        raise ValidationError("values and feasible flags differ in length")
    feasible = np.asarray(feasible, dtype=bool)
    if not feasible.any():
        raise ValidationError("warp_online needs at least one feasible value")
    y = np.array([np.nan if v is None else float(v) for v in values])
    ok = y[feasible]
    med = np.sort(ok)[(len(ok) - 1) // 2]
    top = _softplus(ok.max() - med)
    out = np.full(len(y), -2.0)
    out[feasible] = _softplus(ok - med) / top * 4.0 - 2.0
    return out


def objective_warp(kind: str):
    """Return the per-value objective warp for an ``objective_kind`` tag."""
    if kind in _LOG_WARPED_KINDS:
        return warp_objective
    return float


def task_observations(
    dataset: TuningDataset, mode: str = "offline"
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Warped ``(X, y)`` arrays for every task, in task order.

    ``offline`` keeps feasible trials only; ``online`` keeps every trial and
    applies :func:`warp_online` per task on top of the objective warp.
    """
    if mode not in ("offline", "online"):
        raise ValidationError(f"unknown observation mode {mode!r}")
    warp = objective_warp(dataset.objective_kind)
    out = []
    for task in dataset.tasks:
        trials = task.trials
        if mode == "offline":
            trials = [t for t in trials if t.feasible]
        X = np.array([warp_input(dataset.space, t.params) for t in trials])
        X = X.reshape(len(trials), len(dataset.space))
        vals = [warp(t.objective) if t.feasible else None for t in trials]
        if mode == "online":
            y = warp_online(vals, [t.feasible for t in trials])
        else:
            y = np.array(vals, dtype=float)
        out.append((X, y))
    return out


def extract_matching(
    dataset: TuningDataset, tol: float = DEFAULT_MATCH_TOL, mode: str = "offline"
) -> MatchingDataset:
    """Collect warped inputs that every task evaluated, within ``tol`` per coordinate.

    Within a task the first occurrence of a repeated input wins.  The result
    may be empty.
    """
    if tol < 0:
        raise ValidationError("tol must be >= 0")
    obs = task_observations(dataset, mode)
    d = len(dataset.space)
    X0, _ = obs[0]
    # unique rows of the first task, first occurrence wins
    cand: list[np.ndarray] = []
    for x in X0:
        if not any(np.max(np.abs(x - c)) <= tol for c in cand):
            cand.append(x)
    if not cand:
        return MatchingDataset(np.zeros((0, d)), np.zeros((0, len(obs))),
                               tuple(dataset.task_ids))
    C = np.array(cand)
    keep = np.ones(len(C), dtype=bool)
    index = np.zeros((len(C), len(obs)), dtype=int)
    for i, (X, _) in enumerate(obs):
        if len(X) == 0:
            keep[:] = False
            break
        close = np.max(np.abs(C[:, None, :] - X[None, :, :]), axis=-1) <= tol
        hit = close.any(axis=1)
        keep &= hit
        index[:, i] = np.argmax(close, axis=1)
    values = np.array(
        [[obs[i][1][index[j, i]] for i in range(len(obs))] for j in np.flatnonzero(keep)]
    ).reshape(int(keep.sum()), len(obs))
    return MatchingDataset(C[keep], values, tuple(dataset.task_ids))


# ---------------------------------------------------------------------------
# study files


def _require(obj: Mapping[str, Any], key: str, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise IngestionError(f"{where}: missing required key {key!r}")
    return obj[key]


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise IngestionError(f"{where}: expected a number, got {v!r}")
    return float(v)


def study_from_dict(doc: Mapping[str, Any]) -> TuningDataset:
    space_doc = _require(doc, "space", "study")
    if not isinstance(space_doc, list):
        raise IngestionError("study: 'space' must be a list")
    try:
        dims = []
        for k, p in enumerate(space_doc):
            where = f"space[{k}]"
            dims.append(
                ParamSpec(
                    name=str(_require(p, "name", where)),
                    low=_number(_require(p, "low", where), where + ".low"),
                    high=_number(_require(p, "high", where), where + ".high"),
                    scaling=str(p.get("scaling", "linear")),
                )
            )
        space = SearchSpace(tuple(dims))
    except IngestionError:
        raise
    except ValidationError as exc:
        raise IngestionError(f"invalid search space: {exc}") from exc

    tasks_doc = _require(doc, "tasks", "study")
    if not isinstance(tasks_doc, list):
        raise IngestionError("study: 'tasks' must be a list")
    names = set(space.names)
    tasks = []
    for i, t in enumerate(tasks_doc):
        where = f"tasks[{i}]"
        task_id = str(_require(t, "task_id", where))
        trials_doc = _require(t, "trials", where)
        if not isinstance(trials_doc, list) or not trials_doc:
            raise IngestionError(f"{where}: 'trials' must be a nonempty list")
        trials = []
        for j, tr in enumerate(trials_doc):
            w = f"{where}.trials[{j}]"
            params = _require(tr, "params", w)
            if not isinstance(params, Mapping):
                raise IngestionError(f"{w}: 'params' must be an object")
            unknown = set(params) - names
            if unknown:
                raise IngestionError(f"{w}: unknown parameter(s) {sorted(unknown)}")
            missing = names - set(params)
            if missing:
                raise IngestionError(f"{w}: missing parameter(s) {sorted(missing)}")
            feasible = tr.get("feasible", True)
            if not isinstance(feasible, bool):
                raise IngestionError(f"{w}: 'feasible' must be a boolean")
            obj = tr.get("objective")
            if obj is not None:
                obj = _number(obj, w + ".objective")
            elif feasible:
                raise IngestionError(f"{w}: feasible trial needs an objective")
            trials.append(
                Trial({k: _number(v, f"{w}.params.{k}") for k, v in params.items()},
                      obj, feasible)
            )
        tasks.append(SubDataset(task_id, tuple(trials)))
    try:
        return TuningDataset(space, tuple(tasks),
                             str(doc.get("objective_kind", "error_rate")))
    except ValidationError as exc:
        raise IngestionError(str(exc)) from exc


def study_to_dict(dataset: TuningDataset) -> dict[str, Any]:
    return {
        "objective_kind": dataset.objective_kind,
        "space": [
            {"name": p.name, "low": p.low, "high": p.high, "scaling": p.scaling}
            for p in dataset.space.dims
        ],
        "tasks": [
            {
                "task_id": t.task_id,
                "trials": [
                    {
                        "params": {n: tr.params[n] for n in dataset.space.names},
                        "objective": tr.objective,
                        "feasible": tr.feasible,
                    }
                    for tr in t.trials
                ],
            }
            for t in dataset.tasks
        ],
    }


def load_study(path: str | Path) -> TuningDataset:
    """Read and validate a study JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IngestionError(f"study file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: not valid JSON ({exc})") from exc
    return study_from_dict(doc)


def save_study(dataset: TuningDataset, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips bit-exactly
    Path(path).write_text(json.dumps(study_to_dict(dataset), indent=1))
