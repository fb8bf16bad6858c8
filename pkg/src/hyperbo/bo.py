"""Bayesian-optimization loops: HyperBO with a frozen prior, and the baselines.

Two kinds of target are supported.  A :class:`Pool` is a finite set of
recorded trials replayed offline: candidates are exactly the pool's inputs and
picking one returns its recorded value.  Any other callable is an online
objective on the warped unit hypercube, returning a value or ``None`` for an
infeasible evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from hyperbo.acquisition import AcquisitionKind, argmax_candidates
from hyperbo.dataset import TuningDataset, objective_warp, warp_input, warp_online
from hyperbo.errors import NumericalError, ValidationError
from hyperbo.gp import GPParams, GPPosterior, KernelFn, MeanFn
from hyperbo.objectives import TaskBatches
from hyperbo.training import adam_minimize, init_params

METHODS = ("hyperbo", "rand", "stbo", "stboh")
REFIT_STEPS = 100
REFIT_LR = 0.05
INFEASIBLE_VALUE = -2.0

STBOH_UCB = 1.8
# (loc, scale) of the Gaussian priors on log amplitude, log length scale, log noise
STBOH_PRIORS = {"amplitude": (-1.0, 1.0), "length_scale": (0.0, 1.0), "noise": (-6.0, 3.0)}
SOFTCLIP_QUANTILES = (0.01, 0.99)


@dataclass(frozen=True)
class BoConfig:
    iterations: int = 30
    acquisition: AcquisitionKind = field(default_factory=AcquisitionKind)
    seed: int = 0
    mode: str = "offline"
    candidate_count: int = 5000
    dedupe: bool = False
    output_warp: str = "none"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.mode not in ("offline", "online"):
            raise ValidationError(f"unknown BO mode {self.mode!r}")
        if self.candidate_count < 1:
            raise ValidationError("candidate_count must be >= 1")
        if self.output_warp not in ("none", "softplus"):
            raise ValidationError(f"unknown output warp {self.output_warp!r}")


@dataclass(frozen=True)
class Method:
    kind: str
    prior: GPParams | None = None
    tag: str = ""

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValidationError(f"unknown method {self.kind!r}")
        if self.kind == "hyperbo" and self.prior is None:
            raise ValidationError("HyperBO needs a trained prior")

    @property
    def name(self) -> str:
        if self.kind == "hyperbo":
            return f"h-{self.tag}" if self.tag else "hyperbo"
        return self.kind


@dataclass(frozen=True)
class Pool:
    """Finite candidate set with recorded warped values (and raw objectives)."""

    X: np.ndarray
    y: np.ndarray
    raw: np.ndarray | None = None

    def __post_init__(self):
        if len(self.y) < 1:
            raise ValidationError("pool must be nonempty")

    @property
    def f_max(self) -> float:
        return float(np.max(self.y))

    @classmethod
    def from_task(cls, dataset: TuningDataset, task_id: str) -> "Pool":
        warp = objective_warp(dataset.objective_kind)
        trials = [t for t in dataset.task(task_id).trials if t.feasible]
        if not trials:
            raise ValidationError(f"task {task_id!r} has no feasible trials")
        X = np.array([warp_input(dataset.space, t.params) for t in trials])
        raw = np.array([t.objective for t in trials], dtype=float)
        return cls(X, np.array([warp(r) for r in raw]), raw)


@dataclass
class BoTrace:
    X: np.ndarray
    y: np.ndarray
    raw: np.ndarray
    pool_index: np.ndarray | None = None
    f_max: float | None = None
    # regret series read back from storage; overrides the recomputed one
    stored_regret: np.ndarray | None = None

    @property
    def best_so_far(self) -> np.ndarray:
        y = np.where(np.isnan(self.y), -np.inf, self.y)
        return np.maximum.accumulate(y)

    @property
    def recommendation(self) -> int:
        """Index of the best observation; the earliest wins ties."""
        y = np.where(np.isnan(self.y), -np.inf, self.y)
        return int(np.argmax(y))

    @property
    def regret(self) -> np.ndarray | None:
        if self.stored_regret is not None:
            return self.stored_regret
        if self.f_max is None:
            return None
        return simple_regret(self.y, self.f_max)

    def __len__(self) -> int:
        return len(self.y)


def simple_regret(trace, f_max: float) -> np.ndarray:
    """``f_max`` minus the running best value, one entry per iteration."""
    y = trace.y if isinstance(trace, BoTrace) else np.asarray(trace, dtype=float)
    y = np.where(np.isnan(y), -np.inf, y)
    return f_max - np.maximum.accumulate(y)


# ---------------------------------------------------------------------------
# candidate maximization


def candidate_points(d: int, count: int, seed: int) -> np.ndarray:
    """Scrambled Halton points; sets drawn with the same seed are nested."""
    return qmc.Halton(d, scramble=True, seed=seed).random(count)


def _score(post: GPPosterior, acq: AcquisitionKind, C: np.ndarray, best_y: float | None,
           t: int) -> np.ndarray:
    mu, var = post.predict(C, include_noise=True)
    std = np.sqrt(var)
    if best_y is None:
        best_y = float(np.max(mu))
    return acq.score(mu, std, best_y, t)


def maximize_acquisition_online(post: GPPosterior, acquisition: AcquisitionKind,
                                candidate_count: int, seed: int,
                                best_y: float | None = None, t: int = 1) -> np.ndarray:
    """Best point among ``candidate_count`` quasi-random candidates and the observed inputs."""
    d = post.X.shape[1] if len(post) else _prior_dim(post.prior)
    C = candidate_points(d, candidate_count, seed)
    if len(post):
        C = np.vstack([C, post.X])
    return C[argmax_candidates(_score(post, acquisition, C, best_y, t))]


def _prior_dim(gp: GPParams) -> int:
    if gp.kernel.stationary:
        return len(gp.kernel.log_length_scales)
    if gp.mean.kind == "linear":
        return len(gp.mean.weights)
    raise ValidationError("cannot infer the input dimension from this prior")


# ---------------------------------------------------------------------------
# single-task refits for the baselines


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def _smin_floor(width):
    # value of the smooth minimum -ln(e^-s + e^-w) at s = 0
    return -np.logaddexp(0.0, -width)


def softclip(x, low, high):
    """Smooth increasing bijection from the real line onto ``(low, high)``.

    ``s = softplus(x - low)`` is capped by the smooth minimum
    ``-ln(e^-s + e^-w)`` with ``w = high - low``, then rescaled affinely so the
    limits are exactly ``low`` and ``high``.  Near the middle of a wide band
    it is close to the identity.
    """
    w = high - low
    s = _softplus(x - low)
    m = -np.logaddexp(-s, -w)
    f = _smin_floor(w)
    return low + w * (m - f) / (w - f)


def softclip_grad(x, low, high):
    sig = lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))
    w = high - low
    s = _softplus(x - low)
    f = _smin_floor(w)
    return w / (w - f) * sig(w - s) * sig(x - low)


def softclip_inv(y, low, high):
    w = high - low
    f = _smin_floor(w)
    m = f + (y - low) * (w - f) / w
    s = -np.log(np.exp(-m) - np.exp(-w))
    return low + _softplus_inv(s)


def _band(loc: float, scale: float) -> tuple[float, float]:
    lo, hi = norm.ppf(SOFTCLIP_QUANTILES)
    return loc + scale * lo, loc + scale * hi


class StbohObjective:
    """NLL plus Gaussian negative log-priors, over softly clipped log parameters.

    The optimizer works on unconstrained values ``u``; the clipped log
    parameter is ``softclip(u)`` on its prior's 1st-99th percentile band.
    The constant mean is left unconstrained.
    """

    def __init__(self, d: int, X: np.ndarray, y: np.ndarray):
        self.d = d
        self.batches = TaskBatches([(X, y)]) if len(y) else None
        pri = STBOH_PRIORS
        self.loc = np.array([pri["amplitude"][0]] + [pri["length_scale"][0]] * d
                            + [pri["noise"][0]])
        self.scale = np.array([pri["amplitude"][1]] + [pri["length_scale"][1]] * d
                              + [pri["noise"][1]])
        bands = [_band(l, s) for l, s in zip(self.loc, self.scale)]
        self.low = np.array([b[0] for b in bands])
        self.high = np.array([b[1] for b in bands])

    def params(self, u) -> GPParams:
        theta = softclip(u[1:], self.low, self.high)
        return GPParams(MeanFn("constant", constant=float(u[0])),
                        KernelFn("matern52", log_amplitude=theta[0],
                                 log_length_scales=theta[1:-1]),
                        float(theta[-1]))

    def unconstrained(self, gp: GPParams) -> np.ndarray:
        theta = gp.vector()[1:]
        theta = np.clip(theta, self.low + 1e-9, self.high - 1e-9)
        return np.concatenate([[gp.mean.constant], softclip_inv(theta, self.low, self.high)])

    def __call__(self, u):
        gp = self.params(u)
        theta = gp.vector()[1:]
        z = (theta - self.loc) / self.scale
        value = 0.5 * float(z @ z)
        g_theta = z / self.scale
        g_const = 0.0
        if self.batches is not None:
            v, g = self.batches.nll(gp)
            value += v
            g_const = g[0]
            g_theta = g_theta + g[1:]
        grad = np.concatenate([[g_const], g_theta * softclip_grad(u[1:], self.low, self.high)])
        return value, grad


def stboh_initial(d: int) -> GPParams:
    pri = STBOH_PRIORS
    return GPParams(MeanFn("constant", constant=0.0),
                    KernelFn("matern52", log_amplitude=pri["amplitude"][0],
                             log_length_scales=[pri["length_scale"][0]] * d),
                    pri["noise"][0])


def fit_stboh(X, y, start: GPParams, steps: int = REFIT_STEPS,
              learning_rate: float = REFIT_LR) -> GPParams:
    d = len(start.kernel.log_length_scales)
    obj = StbohObjective(d, np.asarray(X, float).reshape(len(y), d), np.asarray(y, float))
    bx, _, _ = adam_minimize(obj, obj.unconstrained(start), steps, learning_rate)
    return obj.params(bx)


def fit_stbo(X, y, start: GPParams, steps: int = REFIT_STEPS,
             learning_rate: float = REFIT_LR) -> GPParams:
    batches = TaskBatches([(np.asarray(X, float), np.asarray(y, float))])
    structure, d = start.structure, len(start.kernel.log_length_scales)

    def fun(vec):
        return batches.nll(GPParams.from_vector(structure, d, vec))

    bx, _, _ = adam_minimize(fun, start.vector(), steps, learning_rate)
    return GPParams.from_vector(structure, d, bx)


# ---------------------------------------------------------------------------
# the loop


def _method_stream(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**64, METHODS.index(kind)])


def run_bo(target: Pool | Callable, method: Method, config: BoConfig, d: int | None = None,
           f_max: float | None = None) -> BoTrace:
    """Run ``config.iterations`` steps of ``method`` on an offline pool or online objective."""
    offline = isinstance(target, Pool)
    if offline:
        d = target.X.shape[1]
        f_max = target.f_max if f_max is None else f_max
    elif d is None:
        if method.prior is None:
            raise ValidationError("online runs need the input dimension d")
        d = _prior_dim(method.prior)
    rng = _method_stream(config.seed, method.kind)
    acq = config.acquisition
    if method.kind == "stboh":
        acq = AcquisitionKind("ucb", STBOH_UCB)

    T = config.iterations
    X = np.zeros((T, d))
    y = np.full(T, np.nan)
    raw = np.full(T, np.nan)
    idx = np.zeros(T, dtype=int) if offline else None
    feasible = np.zeros(T, dtype=bool)
    model = method.prior
    if method.kind == "stbo":
        model = init_params(("constant", "matern32"), d, int(rng.integers(2**63)))
    elif method.kind == "stboh":
        model = stboh_initial(d)

    for t in range(T):
        X_obs = X[:t]
        y_gp = _gp_values(y[:t], feasible[:t], config.output_warp)
        if method.kind == "rand" or (method.kind in ("stbo", "stboh") and t == 0):
            if offline:
                j = int(rng.integers(len(target.y)))
            else:
                x = rng.uniform(size=d)
        else:
            if method.kind in ("stbo", "stboh"):
                fit = fit_stbo if method.kind == "stbo" else fit_stboh
                try:
                    with np.errstate(all="ignore"):
                        model = fit(X_obs, y_gp, model)
                except NumericalError:
                    pass
            try:
                post = GPPosterior(model, X_obs, y_gp)
            except NumericalError:
                post = GPPosterior(model, X_obs[:0], y_gp[:0])
            best_y = float(np.max(y_gp)) if t else None
            if offline:
                C = target.X
                scores = _score(post, acq, C, best_y, t + 1)
                if config.dedupe and t:
                    scores = np.where(np.isin(np.arange(len(C)), idx[:t]), -np.inf, scores)
                    if np.all(np.isneginf(scores)):
                        scores = _score(post, acq, C, best_y, t + 1)
                j = argmax_candidates(scores)
            else:
                x = maximize_acquisition_online(post, acq, config.candidate_count,
                                                int(rng.integers(2**63)), best_y, t + 1)
        if offline:
            idx[t] = j
            X[t] = target.X[j]
            y[t] = target.y[j]
            raw[t] = target.raw[j] if target.raw is not None else target.y[j]
            feasible[t] = True
        else:
            X[t] = x
            try:
                value = target(x)
                value = None if value is None else float(np.ravel(value)[0])
            except Exception:
                value = None
            if value is None or not math.isfinite(value):
                feasible[t] = False
                y[t] = INFEASIBLE_VALUE if config.output_warp == "none" else np.nan
            else:
                feasible[t] = True
                y[t] = raw[t] = value
    return BoTrace(X, y, raw, idx, f_max)


def _gp_values(y: np.ndarray, feasible: np.ndarray, warp: str) -> np.ndarray:
    if warp == "none" or len(y) == 0:
        return y
    if not feasible.any():
        return np.full(len(y), INFEASIBLE_VALUE)
    return warp_online([v if f else None for v, f in zip(y, feasible)], feasible)


def run_hyperbo(target: Pool | Callable, prior: GPParams, config: BoConfig, **kw) -> BoTrace:
    """HyperBO: BO with the prior held fixed for the whole run."""
    return run_bo(target, Method("hyperbo", prior), config, **kw)


def run_offline(pool: Pool, method: Method, config: BoConfig) -> BoTrace:
    return run_bo(pool, method, config)


def run_random(target: Pool | Callable, config: BoConfig, d: int | None = None,
               f_max: float | None = None) -> BoTrace:
    return run_bo(target, Method("rand"), config, d=d, f_max=f_max)


def run_stbo(target: Pool | Callable, config: BoConfig, d: int | None = None,
             f_max: float | None = None) -> BoTrace:
    return run_bo(target, Method("stbo"), config, d=d, f_max=f_max)


def run_stboh(target: Pool | Callable, config: BoConfig, d: int | None = None,
              f_max: float | None = None) -> BoTrace:
    return run_bo(target, Method("stboh"), config, d=d, f_max=f_max)
