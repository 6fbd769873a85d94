"""Token-factorized path distributions ``q`` in hard, soft and tempered modes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import NEG_INF, Lattice, _check_mask, log_unary_marginals, logsumexp, viterbi


@dataclass(frozen=True)
class QFactorized:
    """``logw[t, y]`` is the log weight of label ``y`` at token ``t``; rows
    normalize to one and masked cells are ``-inf``."""

    mode: str  # "hard" | "soft" | "interpolated" | "uniform"
    logw: np.ndarray
    temperature: float | None = None

    def probs(self) -> np.ndarray:
        return np.exp(self.logw)


def _normalize_rows(logw: np.ndarray) -> np.ndarray:
    return logw - logsumexp(logw, axis=1)[:, None]


def one_hot_q(labels, L: int, mode: str = "hard") -> QFactorized:
    logw = np.full((len(labels), L), NEG_INF)
    logw[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 0.0
    return QFactorized(mode, logw)


def uniform_q(mask: np.ndarray) -> QFactorized:
    mask = np.asarray(mask, dtype=bool)
    logw = np.where(mask, -np.log(mask.sum(axis=1, keepdims=True)), NEG_INF)
    return QFactorized("uniform", logw)


def estimate_q_hard(lattice: Lattice, mask: np.ndarray | None = None) -> QFactorized:
    return one_hot_q(viterbi(lattice, mask).labels, lattice.L)


def estimate_q_interpolated(lattice: Lattice, mask: np.ndarray | None, temperature: float) -> QFactorized:
    """Token marginals of ``q(y) ∝ p(y)^(1/T)`` over the allowed paths."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    mask = _check_mask(lattice, mask)
    tempered = lattice if temperature == 1.0 else lattice.scaled(1.0 / temperature)
    logw = np.where(mask, log_unary_marginals(tempered, mask), NEG_INF)
    return QFactorized("interpolated", _normalize_rows(logw), temperature)


def estimate_q_soft(lattice: Lattice, mask: np.ndarray | None = None) -> QFactorized:
    q = estimate_q_interpolated(lattice, mask, 1.0)
    return QFactorized("soft", q.logw, 1.0)


@dataclass(frozen=True)
class TemperatureSchedule:
    t_start: float = 2.0
    t_end: float = 0.5
    iterations: int = 5

    def __post_init__(self):
        if not self.t_start >= self.t_end > 0:
            raise ValueError("need t_start >= t_end > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def temperature_at(iteration: int, schedule: TemperatureSchedule) -> float:
    """Geometric interpolation from ``t_start`` (first) to ``t_end`` (last)."""
    if not 0 <= iteration < schedule.iterations:
        raise ValueError(f"iteration {iteration} outside schedule of {schedule.iterations}")
    if schedule.iterations == 1:
        return schedule.t_start
    frac = iteration / (schedule.iterations - 1)
    if iteration == schedule.iterations - 1:
        return schedule.t_end
    return schedule.t_start * (schedule.t_end / schedule.t_start) ** frac


def estimate_q(lattice: Lattice, mask: np.ndarray | None, mode: str, temperature: float = 1.0) -> QFactorized:
    if mode == "hard":
        return estimate_q_hard(lattice, mask)
    if mode == "soft":
        return estimate_q_soft(lattice, mask)
    if mode == "interpolated":
        return estimate_q_interpolated(lattice, mask, temperature)
    raise ValueError(f"unknown q mode {mode!r}")
