"""Command-line entry point: ``hyperbo <subcommand> ...``.

Exit codes: 0 on success, 2 on validation or input errors, 3 on numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from hyperbo.acquisition import AcquisitionKind
from hyperbo.bo import METHODS, BoConfig, Method, Pool
from hyperbo.dataset import extract_matching, load_study, save_study
from hyperbo.errors import NumericalError, ValidationError
from hyperbo.gp import KERNEL_KINDS, MEAN_KINDS, STATIONARY_KINDS, GPParams, KernelFn, MeanFn
from hyperbo.harness import read_records, run_grid, write_records, write_series
from hyperbo.metrics import (
    model_diagnostics,
    performance_profile,
    regret_percentiles,
    speedup_factor,
    summarize_speedups,
)
from hyperbo.objectives import ObjectiveKind
from hyperbo.synth import SynthConfig, load_sidecar, sample_tasks, task_max, truth_sidecar
from hyperbo.training import TrainConfig, train_gp

log = logging.getLogger("hyperbo")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _seeds(text: str) -> list[int]:
    """``"0-19"``, ``"3"`` or ``"1,4,9"``."""
    out = []
    for part in _csv_list(text):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part.rsplit("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValidationError("no seeds given")
    return out


def _write_json(doc, path: str | None):
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)
    if path is None or path == "-":
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def _load_prior(path: str) -> GPParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read prior {path}: {exc}") from exc
    return GPParams.from_dict(doc.get("params", doc))


def _methods(args) -> list[Method]:
    out = []
    for name in _csv_list(args.method):
        if name == "hyperbo":
            if not args.params:
                raise ValidationError("method hyperbo needs --params")
            out.append(Method("hyperbo", _load_prior(args.params), args.tag))
        else:
            out.append(Method(name))
    return out


def _bo_config(args, mode: str) -> BoConfig:
    acq = AcquisitionKind.parse(args.acquisition, n_tasks=args.n_train_tasks)
    return BoConfig(args.iterations, acq, 0, mode, args.candidates, args.dedupe,
                    args.output_warp)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    ds = load_study(args.study)
    matching = extract_matching(ds, args.tol)
    cfg = TrainConfig(ObjectiveKind.parse(args.objective), args.steps, args.restarts, args.seed,
                      args.lr, _csv_list(args.means), _csv_list(args.kernels),
                      args.degenerate_mode)
    res = train_gp(ds, matching if matching.n_points else None, cfg)
    doc = res.to_dict()
    doc["objective"] = str(cfg.objective)
    doc["matching_points"] = matching.n_points
    _write_json(doc, args.out)
    if args.trace:
        write_series(res.trace_rows(), args.trace,
                     ("mean", "kernel", "restart", "step", "value", "best_so_far"))
    return 0


def cmd_bo_offline(args) -> int:
    ds = load_study(args.study)
    tasks = _csv_list(args.tasks) if args.tasks else ds.task_ids
    pools = {t: Pool.from_task(ds, t) for t in tasks}
    records = run_grid(pools, _methods(args), _seeds(args.seeds), _bo_config(args, "offline"))
    write_records(records, args.out)
    _summary(records)
    return 0


def cmd_bo_online(args) -> int:
    truth, handles = load_sidecar(args.sidecar)
    tasks = _csv_list(args.tasks) if args.tasks else tuple(sorted(handles))
    missing = [t for t in tasks if t not in handles]
    if missing:
        raise ValidationError(f"unknown tasks {missing}")
    d = handles[tasks[0]].inputs.shape[1]
    f_max = {t: task_max(handles[t], d, args.resolution) for t in tasks}
    oracles = {t: (lambda h: (lambda x: float(h(np.asarray(x)[None])[0])))(handles[t])
               for t in tasks}
    records = run_grid(oracles, _methods(args), _seeds(args.seeds),
                       _bo_config(args, "online"), d=d, f_max=f_max)
    write_records(records, args.out)
    _summary(records)
    return 0


def _summary(records):
    by = {}
    for r in records:
        if r.trace.regret is not None:
            by.setdefault(r.method, []).append(r.trace.regret[-1])
    for m, v in sorted(by.items()):
        print(f"{m}: median final regret {np.median(v):.6g} over {len(v)} runs")


def _truth_from_args(args) -> GPParams:
    if args.truth:
        return _load_prior(args.truth)
    d = args.d
    if args.mean not in MEAN_KINDS or args.kernel not in KERNEL_KINDS:
        raise ValidationError("unknown mean or kernel kind")
    mean = MeanFn("constant", args.mean_value) if args.mean == "constant" else \
        MeanFn("linear", weights=[args.mean_value] * d, bias=0.0)
    if args.kernel in STATIONARY_KINDS:
        kernel = KernelFn(args.kernel, math.log(args.amplitude),
                          [math.log(args.length_scale)] * d)
    else:
        kernel = KernelFn(args.kernel, log_bias_variance=0.0,
                          log_weight_variance=math.log(args.amplitude ** 2))
    return GPParams(mean, kernel, math.log(args.noise) if args.noise > 0 else -math.inf)


def cmd_synth_gen(args) -> int:
    truth = _truth_from_args(args)
    d = args.d
    cfg = SynthConfig(truth, d, args.tasks, args.points, args.matched, args.seed)
    ds, handles = sample_tasks(cfg)
    save_study(ds, args.out)
    if args.sidecar:
        _write_json(truth_sidecar(truth, ds, handles), args.sidecar)
    print(f"wrote {len(ds.tasks)} tasks to {args.out}")
    return 0


def cmd_report(args) -> int:
    if args.kind == "diagnostics":
        return _report_diagnostics(args)
    records = read_records(args.runs)
    if args.kind == "profile":
        rep = performance_profile(records, args.criterion_iteration)
        write_series(rep.rows(), args.out)
    elif args.kind == "percentiles":
        pct = regret_percentiles(records)
        rows = []
        for m, arr in pct.items():
            for name, series in zip(("p20", "p50", "p80"), arr):
                rows.extend((t, f"{m}:{name}", float(v)) for t, v in enumerate(series, 1))
        write_series(rows, args.out)
    elif args.kind == "speedup":
        if not (args.a and args.b):
            raise ValidationError("speedup needs --a and --b")
        a = [r for r in records if r.method == args.a]
        b = [r for r in records if r.method == args.b]
        if not a or not b:
            raise ValidationError("no records for one of the compared methods")
        ratios = speedup_factor(a, b)
        rows = [(t, "not reached" if math.isinf(v) else float(v)) for t, v in ratios.items()]
        write_series(rows, args.out, ("task", "ratio"))
        summary = summarize_speedups(ratios)
        print(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v)
                          for k, v in summary.items()}))
    return 0


def _report_diagnostics(args) -> int:
    if not (args.params and args.study and args.test_study):
        raise ValidationError("diagnostics needs --params, --study and --test-study")
    ds = load_study(args.study)
    test = load_study(args.test_study)
    task = args.task or test.task_ids[0]
    table = model_diagnostics(_load_prior(args.params), ds, extract_matching(ds),
                              test.subset([task]), args.seed, args.steps, args.lr)
    _write_json(table.rows, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_bo_args(p):
    p.add_argument("--method", default="hyperbo",
                   help=f"comma list from {', '.join(METHODS)}")
    p.add_argument("--params", help="fitted prior JSON (from `fit`) for hyperbo")
    p.add_argument("--tag", default="", help="label for hyperbo runs, e.g. nll or kl")
    p.add_argument("--tasks", help="comma list of task ids (default: all)")
    p.add_argument("--seeds", default="0", help="e.g. 0-19 or 1,3,5")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--acquisition", default="pi0.1",
                   help="pi<margin>, ei, ucb:<zeta> or ucb-theory:<delta>")
    p.add_argument("--n-train-tasks", type=int, default=0,
                   help="training-task count for ucb-theory")
    p.add_argument("--candidates", type=int, default=5000)
    p.add_argument("--dedupe", action="store_true", help="skip already-picked pool points")
    p.add_argument("--output-warp", choices=("none", "softplus"), default="none")
    p.add_argument("--out", required=True, help="directory for run CSVs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyperbo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a GP prior on a study")
    p.add_argument("--study", required=True)
    p.add_argument("--objective", default="nll", help="nll, kl, nllkl or nllkl:<lambda>")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--means", default="constant,linear")
    p.add_argument("--kernels", default="squared_exponential,matern52,dot_product")
    p.add_argument("--degenerate-mode", choices=("pseudo_kl", "epsilon_jitter"),
                   default="pseudo_kl")
    p.add_argument("--tol", type=float, default=1e-9, help="matching tolerance")
    p.add_argument("--out", help="output JSON (default: stdout)")
    p.add_argument("--trace", help="optional CSV of per-step objective values")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bo-offline", help="replay BO on recorded pools")
    p.add_argument("--study", required=True)
    _add_bo_args(p)
    p.set_defaults(func=cmd_bo_offline)

    p = sub.add_parser("bo-online", help="run BO against synthetic task functions")
    p.add_argument("--sidecar", required=True, help="truth sidecar from synth-gen")
    p.add_argument("--resolution", type=int, default=4096, help="grid size for f_max")
    _add_bo_args(p)
    p.set_defaults(func=cmd_bo_online)

    p = sub.add_parser("synth-gen", help="sample a synthetic study from a known GP")
    p.add_argument("--truth", help="GP params JSON; overrides the flags below")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--mean", default="constant")
    p.add_argument("--mean-value", type=float, default=0.0)
    p.add_argument("--kernel", default="squared_exponential")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--length-scale", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.01, help="noise variance")
    p.add_argument("--tasks", type=int, default=32)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--matched", type=float, default=0.0, help="matched fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", help="where to write the truth sidecar JSON")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("report", help="summaries of stored runs")
    p.add_argument("kind", choices=("profile", "percentiles", "speedup", "diagnostics"))
    p.add_argument("--runs", help="directory of run CSVs")
    p.add_argument("--criterion-iteration", type=int, default=30)
    p.add_argument("--a", help="speedup: reference method (e.g. h-nll)")
    p.add_argument("--b", help="speedup: compared method (e.g. rand)")
    p.add_argument("--params", help="diagnostics: fitted prior JSON")
    p.add_argument("--study", help="diagnostics: training study")
    p.add_argument("--test-study", help="diagnostics: study holding the held-out task")
    p.add_argument("--task", help="diagnostics: held-out task id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out", required=False, default="-")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and args.kind != "diagnostics" and not args.runs:
        print("error: report needs --runs", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
