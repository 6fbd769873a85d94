"""Dynamic programming over a masked linear-chain lattice.

Scores are natural-log potentials. A path ``y`` scores

    start[y0] + emit[0, y0] + sum_t (trans[y_{t-1}, y_t] + emit[t, y_t]) + stop[y_{n-1}]

Disallowed cells are folded in as ``-inf`` emissions, so every recursion
below handles ``-inf`` absorbingly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

NEG_INF = -np.inf
ENUMERATION_LIMIT = 10**6


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    emit: np.ndarray  # (n, L)
    trans: np.ndarray  # (L, L), trans[prev, next]
    start: np.ndarray  # (L,)
    stop: np.ndarray  # (L,)

    def __post_init__(self):
        emit = np.asarray(self.emit, dtype=np.float64)
        if emit.ndim != 2 or emit.shape[0] < 1 or emit.shape[1] < 1:
            raise ValueError(f"emit must be a non-empty (n, L) array, got shape {emit.shape}")
        L = emit.shape[1]
        trans = np.asarray(self.trans, dtype=np.float64)
        start = np.asarray(self.start, dtype=np.float64)
        stop = np.asarray(self.stop, dtype=np.float64)
        if trans.shape != (L, L) or start.shape != (L,) or stop.shape != (L,):
            raise ValueError("trans/start/stop shapes do not match emit")
        object.__setattr__(self, "emit", emit)
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "stop", stop)

    @property
    def n(self) -> int:
        return self.emit.shape[0]

    @property
    def L(self) -> int:
        return self.emit.shape[1]

    @classmethod
    def zeros(cls, n: int, L: int) -> "Lattice":
        return cls(np.zeros((n, L)), np.zeros((L, L)), np.zeros(L), np.zeros(L))

    def scaled(self, factor: float) -> "Lattice":
        return Lattice(self.emit * factor, self.trans * factor, self.start * factor, self.stop * factor)

    def with_emit(self, emit: np.ndarray) -> "Lattice":
        return Lattice(emit, self.trans, self.start, self.stop)


class ScoredPath(NamedTuple):
    labels: tuple[int, ...]
    score: float


def full_mask(n: int, L: int) -> np.ndarray:
    return np.ones((n, L), dtype=bool)


def mask_from_partial(partial: Sequence[int | None], L: int) -> np.ndarray:
    """Allowed-label mask for partial label indices (``None`` = unannotated)."""
    mask = np.ones((len(partial), L), dtype=bool)
    for t, lab in enumerate(partial):
        if lab is not None:
            mask[t] = False
            mask[t, lab] = True
    return mask


def _check_mask(lattice: Lattice, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return full_mask(lattice.n, lattice.L)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != lattice.emit.shape:
        raise MaskError(f"mask shape {mask.shape} does not match lattice {lattice.emit.shape}")
    if not mask.any(axis=1).all():
        raise MaskError("mask has a row with no allowed label")
    return mask


def masked_emit(lattice: Lattice, mask: np.ndarray | None) -> np.ndarray:
    mask = _check_mask(lattice, mask)
    return np.where(mask, lattice.emit, NEG_INF)


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def path_score(lattice: Lattice, labels: Sequence[int]) -> float:
    labels = [int(y) for y in labels]
    if len(labels) != lattice.n:
        raise ValueError(f"path length {len(labels)} != lattice length {lattice.n}")
    if any(not 0 <= y < lattice.L for y in labels):
        raise ValueError("label index out of range")
    # same association order as the recursions, so DP scores match exactly
    s = lattice.start[labels[0]] + lattice.emit[0, labels[0]]
    for t in range(1, lattice.n):
        s = s + lattice.trans[labels[t - 1], labels[t]] + lattice.emit[t, labels[t]]
    return float(s + lattice.stop[labels[-1]])


def _lse_cols(x: np.ndarray) -> np.ndarray:
    # caller silences divide-by-zero from all -inf columns
    m = np.maximum.reduce(x, axis=0)
    m[m == NEG_INF] = 0.0
    return np.log(np.add.reduce(np.exp(x - m), axis=0)) + m


def _lse_rows(x: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(x, axis=1)
    m[m == NEG_INF] = 0.0
    return np.log(np.add.reduce(np.exp(x - m[:, None]), axis=1)) + m


def _forward(emit: np.ndarray, lattice: Lattice) -> np.ndarray:
    trans = lattice.trans
    alpha = np.empty_like(emit)
    alpha[0] = lattice.start + emit[0]
    with np.errstate(divide="ignore"):
        for t in range(1, len(emit)):
            alpha[t] = _lse_cols(alpha[t - 1][:, None] + trans) + emit[t]
    return alpha


def _backward(emit: np.ndarray, lattice: Lattice) -> np.ndarray:
    trans = lattice.trans
    beta = np.empty_like(emit)
    beta[-1] = lattice.stop
    with np.errstate(divide="ignore"):
        for t in range(len(emit) - 2, -1, -1):
            beta[t] = _lse_rows(trans + (emit[t + 1] + beta[t + 1])[None, :])
    return beta


def forward(lattice: Lattice, mask: np.ndarray | None = None) -> np.ndarray:
    """Forward log-messages ``alpha[t, y]`` (stop scores not included)."""
    return _forward(masked_emit(lattice, mask), lattice)


def backward(lattice: Lattice, mask: np.ndarray | None = None) -> np.ndarray:
    """Backward log-messages ``beta[t, y]`` (stop scores included)."""
    return _backward(masked_emit(lattice, mask), lattice)


def log_partition(lattice: Lattice, mask: np.ndarray | None = None) -> float:
    alpha = forward(lattice, mask)
    return float(logsumexp(alpha[-1] + lattice.stop, axis=0))


class Marginals(NamedTuple):
    log_z: float
    unary: np.ndarray  # (n, L)
    pairwise: np.ndarray  # (n - 1, L, L), pairwise[t - 1, a, b] = P(y_{t-1}=a, y_t=b)


def posterior_marginals(lattice: Lattice, mask: np.ndarray | None = None) -> Marginals:
    emit = masked_emit(lattice, mask)
    alpha = _forward(emit, lattice)
    beta = _backward(emit, lattice)
    log_z = float(logsumexp(alpha[-1] + lattice.stop, axis=0))
    if not np.isfinite(log_z):
        raise MaskError("no allowed path has finite score")
    unary = np.exp(alpha + beta - log_z)
    pair = np.exp(alpha[:-1, :, None] + lattice.trans[None] + (emit[1:] + beta[1:])[:, None, :] - log_z)
    return Marginals(log_z, unary, pair)


def log_unary_marginals(lattice: Lattice, mask: np.ndarray | None = None) -> np.ndarray:
    """Log token marginals, without the underflow of ``log(exp(.))``."""
    emit = masked_emit(lattice, mask)
    alpha = _forward(emit, lattice)
    beta = _backward(emit, lattice)
    log_z = logsumexp(alpha[-1] + lattice.stop, axis=0)
    if not np.isfinite(log_z):
        raise MaskError("no allowed path has finite score")
    return alpha + beta - log_z


def viterbi(lattice: Lattice, mask: np.ndarray | None = None) -> ScoredPath:
    """Best allowed path; ties go to the lowest label index."""
    emit = masked_emit(lattice, mask)
    n = lattice.n
    delta = lattice.start + emit[0]
    back = np.zeros((n, lattice.L), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + lattice.trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(lattice.L)] + emit[t]
    final = delta + lattice.stop
    y = int(np.argmax(final))
    score = float(final[y])
    if score == NEG_INF:
        raise MaskError("no allowed path has finite score")
    labels = [y]
    for t in range(n - 1, 0, -1):
        y = int(back[t, y])
        labels.append(y)
    return ScoredPath(tuple(reversed(labels)), score)


def kbest_viterbi(lattice: Lattice, mask: np.ndarray | None = None, k: int = 5) -> list[ScoredPath]:
    """Top-``k`` allowed paths ordered by (score desc, label sequence asc).

    Generalized Viterbi keeping ``k`` prefixes per state. Prefix order is
    tracked through a global lexicographic rank, which is preserved when a
    common suffix is appended; pruning to ``k`` per state is therefore exact
    for the composite order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    emit = masked_emit(lattice, mask)
    n, L = emit.shape
    W = L * k
    # slot (label, j) holds the j-th best prefix ending in label
    scores = np.full((L, k), NEG_INF)
    scores[:, 0] = lattice.start + emit[0]
    rank = np.full((L, k), np.iinfo(np.int64).max, dtype=np.int64)
    rank[:, 0] = np.arange(L)
    parents = np.zeros((n, L, k), dtype=np.int64)  # flat index of parent slot
    for t in range(1, n):
        # cand[b, a*k + j] = scores[a, j] + trans[a, b] + emit[t, b]
        cand = (scores[None, :, :] + lattice.trans.T[:, :, None]).reshape(L, W) + emit[t][:, None]
        cand_rank = np.broadcast_to(rank.reshape(1, W), (L, W))
        order = np.lexsort((cand_rank, -cand), axis=-1)[:, :k]
        scores = np.take_along_axis(cand, order, axis=1)
        parents[t] = order
        parent_rank = np.take_along_axis(cand_rank, order, axis=1)
        valid = scores > NEG_INF
        # rank the new prefixes: parent prefix first, then own label
        big = np.iinfo(np.int64).max
        key_parent = np.where(valid, parent_rank, big)
        key_label = np.broadcast_to(np.arange(L)[:, None], (L, k))
        flat_order = np.lexsort((key_label.ravel(), key_parent.ravel()))
        new_rank = np.empty(W, dtype=np.int64)
        new_rank[flat_order] = np.arange(W)
        rank = np.where(valid, new_rank.reshape(L, k), big)
    final = (scores + lattice.stop[:, None]).ravel()
    order = np.lexsort((rank.ravel(), -final))[:k]
    out = []
    for slot in order:
        score = float(final[slot])
        if score == NEG_INF:
            break
        labels = []
        s = int(slot)
        for t in range(n - 1, -1, -1):
            labels.append(s // k)
            if t > 0:
                s = int(parents[t, s // k, s % k])
        out.append(ScoredPath(tuple(reversed(labels)), score))
    if not out:
        raise MaskError("no allowed path has finite score")
    return out


def count_paths(mask: np.ndarray) -> int:
    """Number of label sequences the mask admits (transitions ignored)."""
    mask = np.asarray(mask, dtype=bool)
    total = 1
    for row in mask:
        total *= int(row.sum())
    return total


def enumerate_paths_bruteforce(lattice: Lattice, mask: np.ndarray | None = None, limit: int = ENUMERATION_LIMIT) -> list[ScoredPath]:
    """Every allowed path with an independently computed score. Test oracle."""
    mask = _check_mask(lattice, mask)
    if count_paths(mask) > limit:
        raise ValueError(f"more than {limit} paths; refusing to enumerate")
    rows = [np.flatnonzero(r).tolist() for r in mask]
    out = []
    t_idx = np.arange(lattice.n)
    for labels in itertools.product(*rows):
        y = np.array(labels)
        s = lattice.emit[t_idx, y].sum() + lattice.trans[y[:-1], y[1:]].sum() + lattice.start[y[0]] + lattice.stop[y[-1]]
        out.append(ScoredPath(tuple(labels), float(s)))
    return out


def with_structure(lattice: Lattice, trans_ok: np.ndarray, initial_ok: np.ndarray, final_ok: np.ndarray) -> Lattice:
    """Lattice with illegal transitions/boundaries set to ``-inf``."""
    return Lattice(
        lattice.emit,
        np.where(trans_ok, lattice.trans, NEG_INF),
        np.where(initial_ok, lattice.start, NEG_INF),
        np.where(final_ok, lattice.stop, NEG_INF),
    )


def probability_score(lattice: Lattice, mask: np.ndarray | None = None, length_normalize: bool = True) -> tuple[ScoredPath, float]:
    """Constrained best path and its model probability ``p(y|x)``.

    With ``length_normalize`` the probability is raised to ``1/n``.
    """
    best = viterbi(lattice, mask)
    log_z = log_partition(lattice)
    norm = lattice.n if length_normalize else 1
    return best, float(min(1.0, np.exp((best.score - log_z) / norm)))
