"""Partial-annotation CRF losses and their gradients w.r.t. lattice scores.

Each loss has the form ``log Z(full) - log Z(subset)`` for some weighted
subset of paths, so its gradient is the difference between full-lattice
expectations and subset expectations of the path indicator features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .lattice import Lattice, Marginals, ScoredPath, kbest_viterbi, logsumexp, path_score, posterior_marginals
from .qdist import QFactorized


class LatticeGradient(NamedTuple):
    d_emit: np.ndarray
    d_trans: np.ndarray
    d_start: np.ndarray
    d_stop: np.ndarray

    def __add__(self, other):
        return LatticeGradient(*(a + b for a, b in zip(self, other)))

    def scale(self, c: float) -> "LatticeGradient":
        return LatticeGradient(*(c * a for a in self))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self])


class LossBreakdown(NamedTuple):
    total: float
    weighted_term: float
    kbest_term: float
    lam: float


@dataclass(frozen=True)
class LossConfig:
    kind: str = "adak"  # "nll" | "fuzzy" | "weighted" | "adak"
    k: int = 5
    gamma: float = 2.0
    kbest_refresh: str = "per_epoch"  # "per_epoch" | "per_step"

    def __post_init__(self):
        if self.kind not in ("nll", "fuzzy", "weighted", "adak"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.kbest_refresh not in ("per_epoch", "per_step"):
            raise ValueError(f"unknown kbest_refresh {self.kbest_refresh!r}")


def _expectations(m: Marginals) -> LatticeGradient:
    return LatticeGradient(m.unary, m.pairwise.sum(axis=0), m.unary[0], m.unary[-1])


def path_indicators(labels: Sequence[int], L: int) -> LatticeGradient:
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    d_emit = np.zeros((n, L))
    d_emit[np.arange(n), y] = 1.0
    d_trans = np.zeros((L, L))
    np.add.at(d_trans, (y[:-1], y[1:]), 1.0)
    d_start = np.zeros(L)
    d_start[y[0]] = 1.0
    d_stop = np.zeros(L)
    d_stop[y[-1]] = 1.0
    return LatticeGradient(d_emit, d_trans, d_start, d_stop)


def _minus(full: LatticeGradient, sub: LatticeGradient) -> LatticeGradient:
    return LatticeGradient(*(a - b for a, b in zip(full, sub)))


def nll_loss(lattice: Lattice, gold: Sequence[int] | ScoredPath) -> tuple[float, LatticeGradient]:
    labels = gold.labels if isinstance(gold, ScoredPath) else gold
    full = posterior_marginals(lattice)
    loss = full.log_z - path_score(lattice, labels)
    return loss, _minus(_expectations(full), path_indicators(labels, lattice.L))


def fuzzy_loss(lattice: Lattice, mask: np.ndarray) -> tuple[float, LatticeGradient]:
    full = posterior_marginals(lattice)
    sub = posterior_marginals(lattice, mask)
    return full.log_z - sub.log_z, _minus(_expectations(full), _expectations(sub))


def weighted_crf_loss(lattice: Lattice, mask: np.ndarray, q: QFactorized, _full: Marginals | None = None) -> tuple[float, LatticeGradient]:
    """``-log sum_{y in mask} q(y) p(y)`` with ``q`` folded into the emissions."""
    mask = np.asarray(mask, dtype=bool)
    if q.logw.shape != mask.shape:
        raise ValueError("q and mask shapes differ")
    if np.any(np.isfinite(q.logw) & ~mask):
        raise ValueError("q puts weight on labels the mask disallows")
    full = posterior_marginals(lattice) if _full is None else _full
    augmented = lattice.with_emit(lattice.emit + np.where(mask, q.logw, 0.0))
    sub = posterior_marginals(augmented, mask & np.isfinite(q.logw))
    # q.logw does not depend on lattice scores, so d/d emit of the augmented
    # partition is just its marginal
    return full.log_z - sub.log_z, _minus(_expectations(full), _expectations(sub))


def _path_set_expectation(lattice: Lattice, paths: Sequence[Sequence[int]]) -> tuple[float, LatticeGradient]:
    scores = np.array([path_score(lattice, p) for p in paths])
    log_mass = float(logsumexp(scores, axis=0))
    weights = np.exp(scores - log_mass)
    acc = None
    for w, p in zip(weights, paths):
        ind = path_indicators(p, lattice.L).scale(w)
        acc = ind if acc is None else acc + ind
    return log_mass, acc


def kbest_aux_loss(
    lattice: Lattice, mask: np.ndarray | None, k: int, paths: Sequence[Sequence[int]] | None = None, _full: Marginals | None = None
) -> tuple[float, LatticeGradient, list[tuple[int, ...]]]:
    """``-log sum_{y in top-k} p(y)``; the path set is a constant for the gradient.

    Pass ``paths`` to reuse a previously decoded set.
    """
    if paths is None:
        paths = [p.labels for p in kbest_viterbi(lattice, mask, k)]
    paths = [tuple(int(y) for y in p) for p in paths]
    full = posterior_marginals(lattice) if _full is None else _full
    log_mass, sub = _path_set_expectation(lattice, paths)
    return full.log_z - log_mass, _minus(_expectations(full), sub), paths


def lambda_at(b: int, total_steps: int, gamma: float) -> float:
    """Annealed mixing weight ``exp(gamma * (b / B - 1))``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= b <= total_steps:
        raise ValueError(f"step {b} outside [0, {total_steps}]")
    return math.exp(gamma * (b / total_steps - 1.0))


def adak_loss(
    lattice: Lattice,
    mask: np.ndarray,
    q: QFactorized,
    k: int,
    lam: float,
    paths: Sequence[Sequence[int]] | None = None,
) -> tuple[LossBreakdown, LatticeGradient]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    full = posterior_marginals(lattice)
    w_loss, w_grad = weighted_crf_loss(lattice, mask, q, full)
    k_loss, k_grad, _ = kbest_aux_loss(lattice, mask, k, paths, full)
    total = (1.0 - lam) * w_loss + lam * k_loss
    grad = w_grad.scale(1.0 - lam) + k_grad.scale(lam)
    return LossBreakdown(total, w_loss, k_loss, lam), grad
