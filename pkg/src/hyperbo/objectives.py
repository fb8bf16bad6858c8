"""Training objectives: multi-task NLL, sample moments and Gaussian divergences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from hyperbo.dataset import MatchingDataset, TuningDataset, task_observations
from hyperbo.errors import DomainError, ValidationError
from hyperbo.gp import (
    GPParams,
    MemoryGP,
    cholesky_jitter,
    gram,
    kernel_grads,
    mean_eval,
    mean_grads,
    nll_batch,
    nll_subdataset,
    pairwise_sqdiff,
)

RANK_RTOL = 1e-9
DIAG_EPSILON = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)

Observations = Sequence[tuple[np.ndarray, np.ndarray]]
Model = Union[GPParams, MemoryGP]


@dataclass(frozen=True)
class ObjectiveKind:
    """``nll``, ``kl`` or ``nll_kl`` (NLL plus ``lam`` times the divergence)."""

    kind: str = "nll"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nll", "kl", "nll_kl"):
            raise ValidationError(f"unknown objective {self.kind!r}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be finite and >= 0, got {self.lam}")

    @property
    def uses_nll(self) -> bool:
        return self.kind in ("nll", "nll_kl")

    @property
    def uses_kl(self) -> bool:
        return self.kind in ("kl", "nll_kl")

    @classmethod
    def parse(cls, text: str) -> "ObjectiveKind":
        """Parse ``nll``, ``kl``, ``nllkl`` (lambda 10) or ``nllkl:<lambda>``."""
        text = text.strip().lower()
        if text in ("nll", "kl"):
            return cls(text)
        if text.startswith("nllkl"):
            lam = float(text.split(":", 1)[1]) if ":" in text else 10.0
            return cls("nll_kl", lam)
        raise ValidationError(f"unknown objective {text!r}")

    def __str__(self) -> str:
        return f"nllkl:{self.lam:g}" if self.kind == "nll_kl" else self.kind


@dataclass(frozen=True)
class MomentEstimates:
    inputs: np.ndarray
    mu_tilde: np.ndarray
    k_tilde: np.ndarray
    rank: int
    n_tasks: int

    @property
    def n_points(self) -> int:
        return len(self.mu_tilde)


def numerical_rank(K: np.ndarray) -> int:
    eig = np.linalg.eigvalsh(K)
    top = eig[-1] if len(eig) else 0.0
    if top <= 0:
        return 0
    return int(np.sum(eig > RANK_RTOL * top))


# ---------------------------------------------------------------------------
# NLL


def _observations(data) -> Observations:
    if isinstance(data, TuningDataset):
        return task_observations(data)
    return data


def _moments_nll(model, X, y) -> float:
    mu, K = model.moments(X)
    L, _ = cholesky_jitter(K, float(np.mean(np.diag(K))) or 1.0)
    z = np.linalg.solve(L, y - mu)
    return float(0.5 * z @ z + np.sum(np.log(np.diag(L))) + 0.5 * len(y) * _LOG_2PI)


def multi_task_nll(gp: Model, dataset: TuningDataset | Observations) -> float:
    """Sum of per-task negative log marginal likelihoods, added in task order.

    ``gp`` may also be a :class:`MemoryGP`, whose moments are used as-is.
    """
    obs = _observations(dataset)
    if len(obs) == 0:
        raise ValidationError("multi_task_nll needs at least one task")
    total = 0.0
    for X, y in obs:
        if len(y):
            if isinstance(gp, GPParams):
                total += nll_subdataset(gp, X, y)
            else:
                total += _moments_nll(gp, X, y)
    return total


class TaskBatches:
    """Sub-datasets grouped by size and stacked, for batched NLL evaluation.

    Groups keep first-appearance order, so the reduction order is fixed.
    Each group is cut into chunks of at most ``chunk`` tasks so the working
    arrays stay cache-sized and cost grows linearly with the task count.
    """

    def __init__(self, obs: Observations, chunk: int = 16):
        groups: dict[int, list[int]] = {}
        for i, (X, y) in enumerate(obs):
            if len(y):
                groups.setdefault(len(y), []).append(i)
        self.groups = []
        for idx in groups.values():
            for start in range(0, len(idx), chunk):
                part = idx[start:start + chunk]
                X = np.stack([obs[i][0] for i in part])
                y = np.stack([obs[i][1] for i in part])
                self.groups.append((X, y, pairwise_sqdiff(X)))
        self.n_tasks = len(obs)

    def nll(self, gp: GPParams, with_grad: bool = True):
        total = 0.0
        grad = np.zeros(len(gp.vector())) if with_grad else None
        for X, y, sqdiff in self.groups:
            v, g = nll_batch(gp, X, y, with_grad, sqdiff)
            total += v
            if with_grad:
                grad += g
        return total, grad


# ---------------------------------------------------------------------------
# moments and divergences


def moment_estimates(matching: MatchingDataset, unbiased: bool = False) -> MomentEstimates:
    """Sample mean and biased sample covariance across tasks at matched inputs.

    With ``unbiased`` the covariance is rescaled by ``N / (N - 1)``.
    """
    y = np.asarray(matching.values, dtype=float)
    M, N = y.shape
    if M < 1:
        raise ValidationError("moment estimates need at least one matched input")
    if N < 2:
        raise ValidationError("moment estimates need at least two tasks")
    mu = y.mean(axis=1)
    dev = y - mu[:, None]
    K = dev @ dev.T / N
    if unbiased:
        K = K * (N / (N - 1))
    K = 0.5 * (K + K.T)
    return MomentEstimates(np.asarray(matching.inputs, dtype=float), mu, K,
                           numerical_rank(K), N)


def _model_factor(model: Model, X: np.ndarray, epsilon: float):
    """Model mean at ``X`` and a Cholesky factor of its (noisy) covariance."""
    if isinstance(model, GPParams):
        mu = mean_eval(model.mean, X)
        K, L, _ = gram(model, X)
        if epsilon:
            L, _ = cholesky_jitter(K + epsilon * np.eye(len(K)), model.kernel.jitter_scale())
        return mu, L
    mu, K = model.moments(X)
    K = K + epsilon * np.eye(len(K))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        L, _ = cholesky_jitter(K, float(np.mean(np.diag(K))) or 1.0)
    return mu, L


def _fit_terms(est: MomentEstimates, model: Model, epsilon: float = 0.0):
    """``tr(K^-1 Kt)``, the Mahalanobis term and ``ln|K|`` for the model side."""
    mu, L = _model_factor(model, est.inputs, epsilon)
    Kt = est.k_tilde + epsilon * np.eye(est.n_points)
    Linv = np.linalg.solve(L, np.eye(len(L)))
    trace = float(np.sum((Linv @ Kt) * Linv))
    z = Linv @ (mu - est.mu_tilde)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return trace, float(z @ z), logdet


def gaussian_kl(mu0, S0, mu1, S1) -> float:
    """KL(N(mu0, S0) || N(mu1, S1)) for full-rank covariances, in nats."""
    mu0, mu1 = np.asarray(mu0, float), np.asarray(mu1, float)
    L0 = np.linalg.cholesky(S0)
    L1 = np.linalg.cholesky(S1)
    L1inv = np.linalg.solve(L1, np.eye(len(L1)))
    trace = np.sum((L1inv @ S0) * L1inv)
    z = L1inv @ (mu1 - mu0)
    logdet = 2.0 * (np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0))))
    return float(0.5 * (trace + z @ z + logdet - len(mu0)))


def kl_divergence(est: MomentEstimates, model: Model, epsilon: float = 0.0) -> float:
    """KL from the sample Gaussian to the model's Gaussian on the matched inputs.

    ``epsilon`` is added to both covariance diagonals first.  Without it the
    sample covariance must be full rank; use :func:`pseudo_kl` otherwise.
    """
    M = est.n_points
    Kt = est.k_tilde + epsilon * np.eye(M)
    if epsilon == 0.0 and est.rank < M:
        raise DomainError(
            f"sample covariance has rank {est.rank} < {M}; "
            "use pseudo_kl or a diagonal epsilon"
        )
    try:
        Lt = np.linalg.cholesky(Kt)
    except np.linalg.LinAlgError as exc:
        raise DomainError("sample covariance is not positive definite") from exc
    trace, quad, logdet = _fit_terms(est, model, epsilon)
    logdet_t = 2.0 * float(np.sum(np.log(np.diag(Lt))))
    return 0.5 * (trace + quad + logdet - logdet_t - M)


def pseudo_kl(est: MomentEstimates, model: Model) -> float:
    """Divergence from a possibly rank-deficient sample Gaussian to the model.

    The sample covariance is written as ``A A^T`` with ``A`` of full column
    rank ``R`` (eigenpairs above ``1e-9`` of the top eigenvalue).  Can be
    negative when ``R < M``.
    """
    M = est.n_points
    eig = np.linalg.eigvalsh(est.k_tilde)
    top = eig[-1]
    kept = eig[eig > RANK_RTOL * top] if top > 0 else eig[:0]
    R = len(kept)
    if R == 0:
        raise DomainError("sample covariance has rank 0; ln|A^T A| is undefined")
    trace, quad, logdet = _fit_terms(est, model)
    return 0.5 * (trace + quad + logdet - float(np.sum(np.log(kept)))
                  + (M - R) * _LOG_2PI - R)


def divergence(est: MomentEstimates, model: Model, mode: str = "pseudo_kl") -> float:
    """Reported divergence: pseudo-KL (exact KL at full rank) or epsilon-jittered KL."""
    if mode == "pseudo_kl":
        if est.rank == est.n_points:
            return kl_divergence(est, model)
        return pseudo_kl(est, model)
    if mode == "epsilon_jitter":
        return kl_divergence(est, model, epsilon=DIAG_EPSILON)
    raise ValidationError(f"unknown degenerate mode {mode!r}")


def kl_objective(gp: GPParams, est: MomentEstimates, epsilon: float = 0.0,
                 with_grad: bool = True):
    """Parameter-dependent part of the divergence, with its gradient.

    Returns ``0.5 * (tr(K^-1 Kt) + r^T K^-1 r + ln|K|)`` with ``r = mu - mu_tilde``.
    It differs from both the KL and the pseudo-KL by a constant that does not
    depend on ``gp``.
    """
    X = est.inputs
    M = len(X)
    K, L, _ = gram(gp, X)
    if epsilon:
        L, _ = cholesky_jitter(K + epsilon * np.eye(M), gp.kernel.jitter_scale())
    Kt = est.k_tilde + epsilon * np.eye(M)
    r = mean_eval(gp.mean, X) - est.mu_tilde
    Linv = np.linalg.solve(L, np.eye(M))
    Kinv = Linv.T @ Linv
    a = Kinv @ r
    value = 0.5 * (float(np.sum(Kinv * Kt)) + float(r @ a)
                   + 2.0 * float(np.sum(np.log(np.diag(L)))))
    if not with_grad:
        return value, None
    G = 0.5 * (Kinv - Kinv @ (Kt + np.outer(r, r)) @ Kinv)
    g_mean = mean_grads(gp.mean, X) @ a
    g_kern = np.einsum("pij,ij->p", kernel_grads(gp.kernel, X), G)
    g_noise = gp.noise_variance * np.trace(G)
    return value, np.concatenate([g_mean, g_kern, [g_noise]])


def combined_objective(gp: Model, dataset: TuningDataset | Observations,
                       matching: MatchingDataset | None, lam: float = 10.0,
                       mode: str = "pseudo_kl") -> float:
    """Multi-task NLL plus ``lam`` times the reported divergence on the matching data."""
    value = multi_task_nll(gp, dataset)
    if lam == 0:
        return value
    if matching is None or matching.n_points == 0:
        raise ValidationError("a nonzero lambda needs a nonempty matching dataset")
    return value + lam * divergence(moment_estimates(matching), gp, mode)
