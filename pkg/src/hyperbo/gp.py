"""Gaussian-process primitives on the warped unit hypercube.

Means, kernels and Gram matrices accept inputs with arbitrary leading batch
dimensions, ``(..., n, d)``, so that many equally sized sub-datasets can be
handled in one call during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.linalg.lapack import dtrtri

from hyperbo.errors import NumericalError, ValidationError

MEAN_KINDS = ("constant", "linear")
KERNEL_KINDS = ("squared_exponential", "matern32", "matern52", "dot_product")
STATIONARY_KINDS = KERNEL_KINDS[:3]

JITTER_START = 1e-10
JITTER_MAX = 1e-4

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)
_LOG_2PI = math.log(2.0 * math.pi)


def _as_tuple(v) -> tuple[float, ...]:
    return tuple(float(x) for x in np.ravel(np.asarray(v, dtype=float)))


@dataclass(frozen=True)
class MeanFn:
    kind: str = "constant"
    constant: float = 0.0
    weights: tuple[float, ...] = ()
    bias: float = 0.0

    def __post_init__(self):
        if self.kind not in MEAN_KINDS:
            raise ValidationError(f"unknown mean kind {self.kind!r}")
        object.__setattr__(self, "weights", _as_tuple(self.weights))
        if self.kind == "linear" and not self.weights:
            raise ValidationError("linear mean needs at least one weight")

    def vector(self) -> np.ndarray:
        if self.kind == "constant":
            return np.array([self.constant])
        return np.array([*self.weights, self.bias])

    @classmethod
    def from_vector(cls, kind: str, vec) -> "MeanFn":
        vec = np.asarray(vec, dtype=float)
        if kind == "constant":
            return cls("constant", constant=float(vec[0]))
        return cls("linear", weights=vec[:-1], bias=float(vec[-1]))

    @staticmethod
    def n_params(kind: str, d: int) -> int:
        return 1 if kind == "constant" else d + 1


@dataclass(frozen=True)
class KernelFn:
    """Covariance function with positive parameters stored as logs.

    Stationary kinds use ``log_amplitude`` (log of ``a`` in ``a**2 * ...``) and
    one log length scale per input dimension.  ``dot_product`` computes
    ``exp(log_bias_variance) + exp(log_weight_variance) * x.x'``.
    """

    kind: str = "squared_exponential"
    log_amplitude: float = 0.0
    log_length_scales: tuple[float, ...] = ()
    log_bias_variance: float = 0.0
    log_weight_variance: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "log_length_scales", _as_tuple(self.log_length_scales))
        if self.kind in STATIONARY_KINDS and not self.log_length_scales:
            raise ValidationError(f"{self.kind} kernel needs length scales")

    @property
    def stationary(self) -> bool:
        return self.kind in STATIONARY_KINDS

    @property
    def amplitude_sq(self) -> float:
        return math.exp(2.0 * self.log_amplitude)

    def jitter_scale(self) -> float:
        if self.stationary:
            return self.amplitude_sq
        return math.exp(self.log_bias_variance) + math.exp(self.log_weight_variance)

    def vector(self) -> np.ndarray:
        if self.stationary:
            return np.array([self.log_amplitude, *self.log_length_scales])
        return np.array([self.log_bias_variance, self.log_weight_variance])

    @classmethod
    def from_vector(cls, kind: str, vec) -> "KernelFn":
        vec = np.asarray(vec, dtype=float)
        if kind in STATIONARY_KINDS:
            return cls(kind, log_amplitude=float(vec[0]), log_length_scales=vec[1:])
        return cls(kind, log_bias_variance=float(vec[0]),
                   log_weight_variance=float(vec[1]))

    @staticmethod
    def n_params(kind: str, d: int) -> int:
        return d + 1 if kind in STATIONARY_KINDS else 2


@dataclass(frozen=True)
class GPParams:
    mean: MeanFn = field(default_factory=MeanFn)
    kernel: KernelFn = field(default_factory=lambda: KernelFn(log_length_scales=(0.0,)))
    log_noise_variance: float = -4.0

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    @property
    def structure(self) -> tuple[str, str]:
        return (self.mean.kind, self.kernel.kind)

    def vector(self) -> np.ndarray:
        """Free parameters: mean params, kernel log-params, log noise variance."""
        return np.concatenate([self.mean.vector(), self.kernel.vector(),
                               [self.log_noise_variance]])

    @classmethod
    def from_vector(cls, structure: tuple[str, str], d: int, vec) -> "GPParams":
        mk, kk = structure
        vec = np.asarray(vec, dtype=float)
        nm = MeanFn.n_params(mk, d)
        nk = KernelFn.n_params(kk, d)
        if vec.shape != (nm + nk + 1,):
            raise ValidationError(
                f"parameter vector for {structure} in d={d} needs "
                f"{nm + nk + 1} entries, got {vec.shape}"
            )
        return cls(MeanFn.from_vector(mk, vec[:nm]),
                   KernelFn.from_vector(kk, vec[nm:nm + nk]),
                   float(vec[-1]))

    @staticmethod
    def n_params(structure: tuple[str, str], d: int) -> int:
        return MeanFn.n_params(structure[0], d) + KernelFn.n_params(structure[1], d) + 1

    def with_noise(self, log_noise_variance: float) -> "GPParams":
        return replace(self, log_noise_variance=float(log_noise_variance))

    def moments(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and noisy covariance ``k(X) + sigma^2 I`` at ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        K = kernel_eval(self.kernel, X, X)
        K[np.diag_indices_from(K)] += self.noise_variance
        return mean_eval(self.mean, X), K

    def to_dict(self) -> dict[str, Any]:
        m, k = self.mean, self.kernel
        mean = {"kind": m.kind}
        if m.kind == "constant":
            mean["constant"] = m.constant
        else:
            mean["weights"] = list(m.weights)
            mean["bias"] = m.bias
        kern: dict[str, Any] = {"kind": k.kind}
        if k.stationary:
            kern["log_amplitude"] = k.log_amplitude
            kern["log_length_scales"] = list(k.log_length_scales)
        else:
            kern["log_bias_variance"] = k.log_bias_variance
            kern["log_weight_variance"] = k.log_weight_variance
        return {"mean": mean, "kernel": kern,
                "log_noise_variance": self.log_noise_variance}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "GPParams":
        try:
            m, k = doc["mean"], doc["kernel"]
            mean = MeanFn(m["kind"], constant=m.get("constant", 0.0),
                          weights=m.get("weights", ()), bias=m.get("bias", 0.0))
            kernel = KernelFn(
                k["kind"],
                log_amplitude=k.get("log_amplitude", 0.0),
                log_length_scales=k.get("log_length_scales", ()),
                log_bias_variance=k.get("log_bias_variance", 0.0),
                log_weight_variance=k.get("log_weight_variance", 0.0),
            )
            return cls(mean, kernel, float(doc["log_noise_variance"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed GP parameters: {exc!r}") from exc


# ---------------------------------------------------------------------------
# means and kernels


def _check_dims(X: np.ndarray, d: int, what: str):
    if X.shape[-1] != d:
        raise ValidationError(f"{what} expects {d}-dimensional inputs, got {X.shape[-1]}")


def mean_eval(mean: MeanFn, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if mean.kind == "constant":
        return np.full(X.shape[:-1], mean.constant)
    _check_dims(X, len(mean.weights), "linear mean")
    return X @ np.asarray(mean.weights) + mean.bias


def mean_grads(mean: MeanFn, X: np.ndarray) -> np.ndarray:
    """Derivatives of the mean at ``X``, shape ``(p, ..., n)``."""
    X = np.asarray(X, dtype=float)
    ones = np.ones(X.shape[:-1])
    if mean.kind == "constant":
        return ones[None]
    return np.concatenate([np.moveaxis(X, -1, 0), ones[None]])


def pairwise_sqdiff(X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Per-dimension squared differences with shape ``(d, ..., n, m)``.

    Independent of kernel parameters, so callers that evaluate many kernels
    on the same inputs can compute this once.
    """
    X = np.asarray(X, dtype=float)
    X2 = X if X2 is None else np.asarray(X2, dtype=float)
    diff = X[..., :, None, :] - X2[..., None, :, :]
    return np.moveaxis(diff * diff, -1, 0)


def _scaled_sqdiff(kernel: KernelFn, X: np.ndarray, X2: np.ndarray,
                   sqdiff: np.ndarray | None = None) -> np.ndarray:
    """``((x_l - x'_l) / l_l)**2`` with shape ``(d, ..., n, m)``."""
    ls = np.exp(np.asarray(kernel.log_length_scales))
    _check_dims(X, len(ls), kernel.kind)
    _check_dims(X2, len(ls), kernel.kind)
    if sqdiff is None:
        sqdiff = pairwise_sqdiff(X, X2)
    inv = (1.0 / ls**2).reshape((-1,) + (1,) * (sqdiff.ndim - 1))
    return sqdiff * inv


def kernel_eval(kernel: KernelFn, X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Cross-covariance matrix between the rows of ``X`` and ``X2``."""
    X = np.asarray(X, dtype=float)
    X2 = X if X2 is None else np.asarray(X2, dtype=float)
    if kernel.kind == "dot_product":
        if X.shape[-1] != X2.shape[-1]:
            raise ValidationError("dot_product kernel: input dimensions differ")
        return (math.exp(kernel.log_bias_variance)
                + math.exp(kernel.log_weight_variance) * (X @ np.swapaxes(X2, -1, -2)))
    a2 = kernel.amplitude_sq
    r2 = _scaled_sqdiff(kernel, X, X2).sum(0)
    if kernel.kind == "squared_exponential":
        return a2 * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if kernel.kind == "matern32":
        return a2 * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
    return a2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)


def kernel_grads(kernel: KernelFn, X: np.ndarray) -> np.ndarray:
    """Derivatives of ``k(X, X)`` w.r.t. the kernel's log-parameters.

    Returns shape ``(p, ..., n, n)`` in the order of :meth:`KernelFn.vector`.
    """
    return kernel_with_grads(kernel, X)[1]


def kernel_with_grads(kernel: KernelFn, X: np.ndarray,
                      sqdiff: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``k(X, X)`` together with :func:`kernel_grads`, sharing the distance work.

    ``sqdiff`` may carry a precomputed :func:`pairwise_sqdiff` of ``X``.
    """
    X = np.asarray(X, dtype=float)
    if kernel.kind == "dot_product":
        bv = math.exp(kernel.log_bias_variance)
        lin = math.exp(kernel.log_weight_variance) * (X @ np.swapaxes(X, -1, -2))
        return bv + lin, np.stack([np.full(lin.shape, bv), lin])
    a2 = kernel.amplitude_sq
    sq = _scaled_sqdiff(kernel, X, X, sqdiff)
    r2 = sq.sum(0)
    if kernel.kind == "squared_exponential":
        K = a2 * np.exp(-0.5 * r2)
        # dK/dlog l = K * sq_l
        factor = K
    elif kernel.kind == "matern32":
        r = np.sqrt(r2)
        e = np.exp(-_SQRT3 * r)
        K = a2 * (1.0 + _SQRT3 * r) * e
        factor = 3.0 * a2 * e
    else:
        r = np.sqrt(r2)
        e = np.exp(-_SQRT5 * r)
        K = a2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * e
        factor = (5.0 / 3.0) * a2 * (1.0 + _SQRT5 * r) * e
    ls_grads = factor * sq
    return K, np.concatenate([(2.0 * K)[None], ls_grads])


# ---------------------------------------------------------------------------
# factorization


def cholesky_jitter(K: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of ``K + jitter * I`` using an escalating jitter ladder.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to ``1e-4 * scale``.
    Batched input is factorized per matrix on failure, so one bad matrix does
    not change the jitter of the others.  Returns ``(L, jitter)`` where
    ``jitter`` has the batch shape.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[-1]
    eye = np.eye(n)
    base = JITTER_START * scale
    try:
        L = np.linalg.cholesky(K + base * eye)
        if np.all(np.isfinite(L)):
            return L, np.full(K.shape[:-2], base)
    except np.linalg.LinAlgError:
        pass
    flat = K.reshape(-1, n, n)
    Ls = np.empty_like(flat)
    jit = np.empty(len(flat))
    for b, Kb in enumerate(flat):
        level = JITTER_START
        while True:
            try:
                Lb = np.linalg.cholesky(Kb + level * scale * eye)
                if np.all(np.isfinite(Lb)):
                    break
            except np.linalg.LinAlgError:
                pass
            level *= 10.0
            if level > JITTER_MAX * (1 + 1e-9):
                raise NumericalError(
                    f"Gram matrix not factorizable with jitter up to {JITTER_MAX:g}"
                )
        Ls[b] = Lb
        jit[b] = level * scale
    return Ls.reshape(K.shape), jit.reshape(K.shape[:-2])


def _tri_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of (a stack of) lower-triangular matrices."""
    flat = L.reshape(-1, *L.shape[-2:])
    out = np.empty_like(flat)
    for b, Lb in enumerate(flat):
        inv, info = dtrtri(Lb, lower=1)
        if info != 0:
            raise NumericalError("triangular inverse failed")
        out[b] = inv
    return out.reshape(L.shape)


def gram(gp: GPParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noisy Gram matrix of ``X`` with its jittered Cholesky factor.

    Returns ``(K, L, jitter)`` where ``L @ L.T == K + jitter * I``.
    """
    K = kernel_eval(gp.kernel, X, X)
    K = K + gp.noise_variance * np.eye(K.shape[-1])
    L, jit = cholesky_jitter(K, gp.kernel.jitter_scale())
    return K, L, jit


# ---------------------------------------------------------------------------
# conditioning


class GPPosterior:
    """A prior GP conditioned on observations ``(X, y)``.

    Parameters
    ----------
    prior : GPParams
        Mean, kernel and noise of the prior.  Never modified.
    X : np.ndarray
        Observed inputs, shape ``(n, d)``; ``n`` may be zero.
    y : np.ndarray
        Observed values, shape ``(n,)``.
    """

    def __init__(self, prior: GPParams, X, y):
        self.prior = prior
        self.y = np.asarray(y, dtype=float).reshape(-1)
        X = np.asarray(X, dtype=float)
        if len(self.y):
            X = X.reshape(len(self.y), -1)
        else:
            X = np.zeros((0, X.shape[-1] if X.ndim == 2 else 0))
        self.X = X
        if len(self.y):
            _, self.cholesky, _ = gram(prior, self.X)
            resid = self.y - mean_eval(prior.mean, self.X)
            self._Linv = _tri_inverse(self.cholesky)
            self.alpha = self._Linv.T @ (self._Linv @ resid)
        else:
            self.cholesky = np.zeros((0, 0))
            self._Linv = np.zeros((0, 0))
            self.alpha = np.zeros(0)

    def __len__(self) -> int:
        return len(self.y)

    def predict(self, Xq, full_cov: bool = False, include_noise: bool = False):
        """Posterior mean and variance (or covariance) of the latent function.

        With ``include_noise`` the observation noise variance is added to the
        returned (co)variance diagonal.
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        mu = mean_eval(self.prior.mean, Xq)
        kernel = self.prior.kernel
        if full_cov:
            cov = kernel_eval(kernel, Xq, Xq)
        else:
            cov = _kernel_diag(kernel, Xq)
        if len(self.y):
            Kqx = kernel_eval(kernel, Xq, self.X)
            mu = mu + Kqx @ self.alpha
            V = self._Linv @ Kqx.T
            if full_cov:
                cov = cov - V.T @ V
                cov = 0.5 * (cov + cov.T)
            else:
                cov = cov - np.einsum("ij,ij->j", V, V)
        if include_noise:
            if full_cov:
                cov = cov + self.prior.noise_variance * np.eye(len(Xq))
            else:
                cov = cov + self.prior.noise_variance
        if not full_cov:
            cov = np.maximum(cov, 0.0)
        return mu, cov


def _kernel_diag(kernel: KernelFn, X: np.ndarray) -> np.ndarray:
    if kernel.stationary:
        return np.full(len(X), kernel.amplitude_sq)
    return (math.exp(kernel.log_bias_variance)
            + math.exp(kernel.log_weight_variance) * np.einsum("ij,ij->i", X, X))


def posterior(gp: GPParams, X, y, Xq) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean vector and latent covariance matrix at ``Xq``."""
    return GPPosterior(gp, X, y).predict(Xq, full_cov=True)


# ---------------------------------------------------------------------------
# marginal likelihood


def nll_subdataset(gp: GPParams, X, y) -> float:
    """Negative log marginal likelihood of one sub-dataset, in nats."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 1:
        raise ValidationError("nll_subdataset needs at least one observation")
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    value, _ = nll_batch(gp, X[None], y[None], with_grad=False)
    return value


def nll_batch(gp: GPParams, X: np.ndarray, y: np.ndarray, with_grad: bool = True,
              sqdiff: np.ndarray | None = None):
    """Summed NLL over a stack of equally sized sub-datasets.

    ``X`` has shape ``(B, n, d)`` and ``y`` shape ``(B, n)``.  Returns
    ``(value, grad)`` with ``grad`` ordered as :meth:`GPParams.vector`, or
    ``None`` when ``with_grad`` is false.  ``sqdiff`` optionally caches
    :func:`pairwise_sqdiff` of ``X``.
    """
    B, n = y.shape
    if with_grad:
        K, dK = kernel_with_grads(gp.kernel, X, sqdiff)
    else:
        K = kernel_eval(gp.kernel, X, X)
    K = K + gp.noise_variance * np.eye(n)
    L, _ = cholesky_jitter(K, gp.kernel.jitter_scale())
    resid = y - mean_eval(gp.mean, X)
    Linv = _tri_inverse(L)
    z = np.matmul(Linv, resid[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum()
    value = 0.5 * np.sum(z * z) + 0.5 * logdet + 0.5 * B * n * _LOG_2PI
    if not with_grad:
        return float(value), None
    alpha = np.matmul(np.swapaxes(Linv, -1, -2), z[..., None])[..., 0]
    Kinv = np.matmul(np.swapaxes(Linv, -1, -2), Linv)
    W = 0.5 * (Kinv - alpha[:, :, None] * alpha[:, None, :])
    dmu = mean_grads(gp.mean, X)
    g_mean = -(dmu.reshape(len(dmu), -1) @ alpha.ravel())
    g_kern = dK.reshape(len(dK), -1) @ W.ravel()
    g_noise = gp.noise_variance * np.trace(W, axis1=-2, axis2=-1).sum()
    return float(value), np.concatenate([g_mean, g_kern, [g_noise]])


# ---------------------------------------------------------------------------
# memory-based GP


@dataclass(frozen=True)
class MemoryGP:
    """Lookup GP returning stored moments of the nearest anchor point.

    Noise-free: its :meth:`moments` carry no extra noise variance.
    """

    anchors: np.ndarray
    mean_values: np.ndarray
    cov_values: np.ndarray

    def nearest(self, Xq) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        d2 = ((Xq[:, None, :] - self.anchors[None, :, :]) ** 2).sum(-1)
        # argmin returns the first index on ties
        return np.argmin(d2, axis=1)

    def mean(self, Xq) -> np.ndarray:
        return self.mean_values[self.nearest(Xq)]

    def cov(self, Xq, Xq2=None) -> np.ndarray:
        i = self.nearest(Xq)
        j = i if Xq2 is None else self.nearest(Xq2)
        return self.cov_values[np.ix_(i, j)]

    def moments(self, X) -> tuple[np.ndarray, np.ndarray]:
        idx = self.nearest(X)
        return self.mean_values[idx], self.cov_values[np.ix_(idx, idx)]


def build_memory_gp(inputs, mu_tilde, k_tilde) -> MemoryGP:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    mu = np.asarray(mu_tilde, dtype=float).reshape(-1)
    K = np.asarray(k_tilde, dtype=float)
    M = len(mu)
    if M == 0:
        raise ValidationError("memory GP needs at least one anchor")
    if inputs.shape[0] != M or K.shape != (M, M):
        raise ValidationError("anchor, mean and covariance sizes disagree")
    if not np.allclose(K, K.T, atol=1e-12, rtol=0):
        raise ValidationError("covariance is not symmetric")
    eig = np.linalg.eigvalsh(K)
    if eig[0] < -1e-9 * max(eig[-1], 1.0):
        raise ValidationError(f"covariance not PSD (min eigenvalue {eig[0]:g})")
    return MemoryGP(inputs.copy(), mu.copy(), K.copy())
