"""Acquisition scores and their maximization over a candidate set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from hyperbo.errors import DomainError, ValidationError

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class AcquisitionKind:
    """One of ``pi`` (thresholded PI), ``ei``, ``ucb`` or ``ucb_theory``.

    ``param`` is the PI margin, the UCB coefficient, or the confidence level
    ``delta`` of the calibrated UCB schedule.
    """

    kind: str = "pi"
    param: float = 0.1
    n_tasks: int = 0

    def __post_init__(self):
        if self.kind not in ("pi", "ei", "ucb", "ucb_theory"):
            raise ValidationError(f"unknown acquisition {self.kind!r}")
        if self.kind in ("pi", "ucb") and not self.param >= 0:
            raise ValidationError(f"{self.kind} parameter must be >= 0")
        if self.kind == "ucb_theory" and not 0 < self.param < 1:
            raise ValidationError("ucb-theory delta must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str, n_tasks: int = 0) -> "AcquisitionKind":
        """Parse ``pi<margin>``, ``ei``, ``ucb:<zeta>`` or ``ucb-theory:<delta>``."""
        t = text.strip().lower()
        try:
            if t == "ei":
                return cls("ei", 0.0)
            if t.startswith("ucb-theory:"):
                return cls("ucb_theory", float(t.split(":", 1)[1]), n_tasks)
            if t.startswith("ucb:"):
                return cls("ucb", float(t.split(":", 1)[1]))
            if t.startswith("pi"):
                rest = t[2:].lstrip(":")
                return cls("pi", float(rest) if rest else 0.1)
        except ValueError as exc:
            raise ValidationError(f"bad acquisition spec {text!r}") from exc
        raise ValidationError(f"unknown acquisition {text!r}")

    def __str__(self) -> str:
        if self.kind == "pi":
            return f"pi{self.param:g}"
        if self.kind == "ei":
            return "ei"
        if self.kind == "ucb":
            return f"ucb:{self.param:g}"
        return f"ucb-theory:{self.param:g}"

    def score(self, mean, std, best_y: float, t: int = 1) -> np.ndarray:
        """Vectorized score for posterior means/stds at iteration ``t`` (1-based)."""
        if self.kind == "pi":
            return pi_score(mean, std, best_y, self.param)
        if self.kind == "ei":
            return ei_score(mean, std, best_y)
        if self.kind == "ucb":
            return ucb_score(mean, std, self.param)
        zeta = theoretical_ucb_zeta(self.n_tasks, t, self.param)
        return ucb_score(mean, std, zeta)


def pi_score(post_mean, post_std, best_y, margin=0.1):
    """``(mean - (best_y + margin)) / std``; a rank-equivalent of PI."""
    std = np.maximum(np.asarray(post_std, dtype=float), STD_FLOOR)
    return (np.asarray(post_mean, dtype=float) - (best_y + margin)) / std


def ucb_score(post_mean, post_std, zeta):
    return np.asarray(post_mean, dtype=float) + zeta * np.asarray(post_std, dtype=float)


def ei_score(post_mean, post_std, best_y):
    mean = np.asarray(post_mean, dtype=float)
    std = np.asarray(post_std, dtype=float)
    gap = mean - best_y
    safe = np.where(std > 0, std, 1.0)
    with np.errstate(over="ignore"):
        z = gap / safe
        ei = gap * norm.cdf(z) + safe * norm.pdf(z)
    ei = np.where(std > 0, ei, np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def theoretical_ucb_zeta(n_tasks: int, t: int, delta: float) -> float:
    """UCB coefficient calibrated to ``n_tasks`` training tasks at iteration ``t``.

    Valid for ``n_tasks >= 4 ln(6/delta) + t + 2``; raises :class:`DomainError`
    otherwise.
    """
    N = n_tasks
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if t < 1:
        raise DomainError(f"iteration t must be >= 1, got {t}")
    l6 = math.log(6.0 / delta)
    if N < 4.0 * l6 + t + 2:
        raise DomainError(
            f"need N >= 4 ln(6/delta) + t + 2 = {4.0 * l6 + t + 2:.4g}, got N={N}"
        )
    inner = 1.0 - 2.0 * math.sqrt(l6 / (N - t))
    if inner <= 0:
        raise DomainError(f"radical 1 - 2 sqrt(b) is {inner:.4g} <= 0")
    iota_num = 6.0 * N * (N - 3 + t + 2.0 * math.sqrt(t * l6) + 2.0 * l6)
    iota_den = delta * N * (N - t - 1)
    top = math.sqrt(iota_num / iota_den) + math.sqrt(2.0 * N * math.log(3.0 / delta))
    return top / math.sqrt((N - 1) * inner)


def argmax_candidates(scores) -> int:
    """Index of the largest score; the lowest index wins ties."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    if len(s) == 0:
        raise ValidationError("no candidates to choose from")
    bad = np.flatnonzero(np.isnan(s))
    if len(bad):
        raise ValidationError(f"NaN acquisition score at candidate {int(bad[0])}")
    return int(np.argmax(s))
