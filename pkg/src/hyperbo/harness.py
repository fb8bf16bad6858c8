"""Running method x task x seed grids and storing the traces as CSV files."""

from __future__ import annotations

import csv
import math
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from hyperbo.bo import BoConfig, BoTrace, Method, Pool, run_bo
from hyperbo.errors import IngestionError, ValidationError
from hyperbo.metrics import RunRecord

THREADS_ENV = "HYPERBO_THREADS"
_NAME = re.compile(r"^(?P<method>.+)__(?P<task>.+)__seed(?P<seed>-?\d+)\.csv$")


def thread_cap() -> int:
    """Worker threads for grids and file loading: ``HYPERBO_THREADS`` or the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def run_grid(targets: Mapping[str, Pool | Callable], methods: Sequence[Method],
             seeds: Iterable[int], config: BoConfig, d: int | None = None,
             f_max: Mapping[str, float] | None = None,
             threads: int | None = None) -> list[RunRecord]:
    """Run every (method, task, seed) triple.

    Each run owns its random streams, so results do not depend on the
    thread count.  Records come back ordered by (method, task, seed).
    """
    jobs = [(m, task, s) for m in methods for task in sorted(targets) for s in seeds]
    threads = threads or thread_cap()

    def one(job):
        m, task, s = job
        cfg = BoConfig(config.iterations, config.acquisition, s, config.mode,
                       config.candidate_count, config.dedupe, config.output_warp)
        fm = f_max.get(task) if f_max else None
        t0 = time.perf_counter()
        trace = run_bo(targets[task], m, cfg, d=d, f_max=fm)
        return RunRecord(m.name, task, s, trace, time.perf_counter() - t0)

    if threads == 1:
        out = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, jobs))
    return sorted(out, key=lambda r: r.key)


# ---------------------------------------------------------------------------
# CSV storage


def record_filename(record: RunRecord) -> str:
    for part in (record.method, record.task):
        if "__" in part or "/" in part:
            raise ValidationError(f"name {part!r} may not contain '__' or '/'")
    return f"{record.method}__{record.task}__seed{record.seed}.csv"


def _fmt(v: float) -> str:
    return repr(float(v))


def write_record(record: RunRecord, directory: str | Path) -> Path:
    """Write one trace with columns iteration, x_0..x_{d-1}, y, raw_objective,
    best_so_far, regret.  Floats use their shortest exact repr."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr = record.trace
    d = tr.X.shape[1]
    regret = tr.regret
    path = directory / record_filename(record)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *[f"x_{i}" for i in range(d)], "y", "raw_objective",
                    "best_so_far", "regret"])
        for t in range(len(tr)):
            w.writerow([t + 1, *map(_fmt, tr.X[t]), _fmt(tr.y[t]), _fmt(tr.raw[t]),
                        _fmt(tr.best_so_far[t]),
                        "" if regret is None else _fmt(regret[t])])
    return path


def write_records(records: Iterable[RunRecord], directory: str | Path) -> list[Path]:
    return [write_record(r, directory) for r in records]


def read_record(path: str | Path) -> RunRecord:
    path = Path(path)
    m = _NAME.match(path.name)
    if not m:
        raise IngestionError(f"{path.name}: expected <method>__<task>__seed<k>.csv")
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x_"))
        arr = np.array([[float(v) if v != "" else math.nan for v in row[1:]] for row in body])
        if len(body) == 0 or arr.shape[1] != d + 4:
            raise ValueError("unexpected column count")
    except (OSError, ValueError, IndexError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    X, y, raw, regret = arr[:, :d], arr[:, d], arr[:, d + 1], arr[:, d + 3]
    f_max = None
    if not np.isnan(regret).all():
        # regret = f_max - best_so_far, exactly as written
        f_max = float(regret[0] + arr[0, d + 2])
    stored = regret if f_max is not None else None
    trace = BoTrace(X, y, raw, None, f_max, stored)
    return RunRecord(m["method"], m["task"], int(m["seed"]), trace)


def read_records(directory: str | Path) -> list[RunRecord]:
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise IngestionError(f"no run CSVs in {directory}")
    threads = thread_cap()
    if threads == 1:
        records = [read_record(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(read_record, paths))
    return sorted(records, key=lambda r: r.key)


def write_series(rows: Iterable[tuple], path: str | Path,
                 header: Sequence[str] = ("iteration", "series", "value")) -> Path | None:
    """Write plot-ready rows; ``path`` of ``"-"`` means standard output."""
    def emit(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])

    if str(path) == "-":
        emit(sys.stdout)
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        emit(fh)
    return path
