"""Hashed sparse linear sentence scorer and its mini-batch trainer.

Emission scores are sums of per-label weight rows selected by hashed
feature indices; transitions, start and stop scores are dense parameters.
Feature strings are hashed with 64-bit FNV-1a (seeded by prefixing the
8-byte little-endian seed) reduced modulo ``hash_dim``.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import BinaryIO, Callable, NamedTuple, Sequence

import numpy as np

from .labels import LabelSet, build_label_set, structural_transitions
from .lattice import Lattice, ScoredPath, kbest_viterbi, probability_score as lattice_probability_score, viterbi, with_structure
from .objectives import LatticeGradient, LossConfig, adak_loss, fuzzy_loss, lambda_at, nll_loss, weighted_crf_loss
from .qdist import QFactorized

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

DEFAULT_TEMPLATES = ("bias", "word", "shape", "prefix", "suffix", "is_cap", "is_digit")
WINDOW = (-2, -1, 0, 1, 2)
_BOUNDARY = {-1: "<s>", 1: "</s>"}


class DivergenceError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


@lru_cache(maxsize=1 << 20)
def _hash_feature(feature: str, seed: int, hash_dim: int) -> int:
    return fnv1a_64(seed.to_bytes(8, "little") + feature.encode("utf-8")) % hash_dim


@dataclass(frozen=True)
class FeatureConfig:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    hash_dim: int = 1 << 20
    hash_seed: int = 0

    def __post_init__(self):
        if not self.templates:
            raise ValueError("at least one feature template is required")
        unknown = set(self.templates) - set(DEFAULT_TEMPLATES)
        if unknown:
            raise ValueError(f"unknown feature templates {sorted(unknown)}")
        if self.hash_dim < 1 << 10 or self.hash_dim & (self.hash_dim - 1):
            raise ValueError("hash_dim must be a power of two >= 1024")


def word_shape(token: str) -> str:
    out = []
    for ch in token:
        c = "X" if ch.isupper() else "x" if ch.islower() else "d" if ch.isdigit() else ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


def _token_features(tok: str, templates: Sequence[str]) -> list[str]:
    feats = []
    for name in templates:
        if name == "word":
            feats.append("w=" + tok.lower())
        elif name == "shape":
            feats.append("sh=" + word_shape(tok))
        elif name == "prefix":
            feats.extend(f"p{k}={tok[:k]}" for k in (1, 2, 3) if len(tok) >= k)
        elif name == "suffix":
            feats.extend(f"s{k}={tok[-k:]}" for k in (1, 2, 3) if len(tok) >= k)
        elif name == "is_cap" and tok[:1].isupper():
            feats.append("cap")
        elif name == "is_digit" and tok.isdigit():
            feats.append("digit")
    return feats


class SentenceFeatures(NamedTuple):
    """Flat hashed indices with ``offsets[t]:offsets[t+1]`` for token ``t``."""

    indices: np.ndarray
    offsets: np.ndarray

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    def token(self, t: int) -> np.ndarray:
        return self.indices[self.offsets[t] : self.offsets[t + 1]]


def extract_features(sentence: Sequence[str], config: FeatureConfig) -> SentenceFeatures:
    n = len(sentence)
    per_offset = [t for t in config.templates if t != "bias"]
    cache = [_token_features(tok, per_offset) for tok in sentence]
    indices: list[int] = []
    offsets = [0]
    for t in range(n):
        names = ["bias"] if "bias" in config.templates else []
        for off in WINDOW:
            j = t + off
            if 0 <= j < n:
                names.extend(f"{off}:{f}" for f in cache[j])
            else:
                names.append(f"{off}:{_BOUNDARY[-1 if j < 0 else 1]}")
        indices.extend(_hash_feature(f, config.hash_seed, config.hash_dim) for f in names)
        offsets.append(len(indices))
    return SentenceFeatures(np.array(indices, dtype=np.int64), np.array(offsets, dtype=np.int64))


VERSION = 1
MAGIC = b"ADAKNER\x00"


@dataclass
class ModelParams:
    label_set: LabelSet
    feature_config: FeatureConfig
    emit_weights: np.ndarray  # (hash_dim, L)
    trans: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    version: int = VERSION

    @classmethod
    def zeros(cls, label_set: LabelSet, feature_config: FeatureConfig) -> "ModelParams":
        L = len(label_set)
        return cls(label_set, feature_config, np.zeros((feature_config.hash_dim, L)), np.zeros((L, L)), np.zeros(L), np.zeros(L))

    def copy(self) -> "ModelParams":
        return replace(self, emit_weights=self.emit_weights.copy(), trans=self.trans.copy(), start=self.start.copy(), stop=self.stop.copy())

    @property
    def L(self) -> int:
        return len(self.label_set)

    def structure(self):
        return structural_transitions(self.label_set)


def score_features(params: ModelParams, feats: SentenceFeatures) -> Lattice:
    rows = params.emit_weights[feats.indices]
    emit = np.add.reduceat(rows, feats.offsets[:-1], axis=0) if len(rows) else np.zeros((feats.n, params.L))
    # reduceat copies a row for empty segments; zero them
    empty = feats.offsets[1:] == feats.offsets[:-1]
    if empty.any():
        emit[empty] = 0.0
    return Lattice(emit, params.trans, params.start, params.stop)


def score_sentence(params: ModelParams, sentence: Sequence[str]) -> Lattice:
    return score_features(params, extract_features(sentence, params.feature_config))


def decoding_lattice(params: ModelParams, lattice: Lattice) -> Lattice:
    return with_structure(lattice, *params.structure())


def predict(params: ModelParams, sentence: Sequence[str] | SentenceFeatures, mask: np.ndarray | None = None, structural: bool = True) -> ScoredPath:
    """Viterbi decode; BIO-illegal transitions are excluded unless that
    leaves no path consistent with ``mask``."""
    feats = sentence if isinstance(sentence, SentenceFeatures) else extract_features(sentence, params.feature_config)
    lattice = score_features(params, feats)
    if structural:
        try:
            return viterbi(decoding_lattice(params, lattice), mask)
        except ValueError:
            pass
    return viterbi(lattice, mask)


def predict_kbest(params: ModelParams, sentence: Sequence[str] | SentenceFeatures, k: int, mask: np.ndarray | None = None, structural: bool = True) -> list[ScoredPath]:
    feats = sentence if isinstance(sentence, SentenceFeatures) else extract_features(sentence, params.feature_config)
    lattice = score_features(params, feats)
    if structural:
        try:
            return kbest_viterbi(decoding_lattice(params, lattice), mask, k)
        except ValueError:
            pass
    return kbest_viterbi(lattice, mask, k)


class SentenceScore(NamedTuple):
    path: ScoredPath
    s: float


def probability_score(params: ModelParams, sentence: Sequence[str] | SentenceFeatures, mask: np.ndarray | None = None, length_normalize: bool = True) -> SentenceScore:
    feats = sentence if isinstance(sentence, SentenceFeatures) else extract_features(sentence, params.feature_config)
    path, s = lattice_probability_score(score_features(params, feats), mask, length_normalize)
    return SentenceScore(path, s)


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.1
    l2: float = 1e-5
    seed: int = 0
    optimizer: str = "adagrad"  # "adagrad" | "sgd"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or self.l2 < 0:
            raise ValueError("learning_rate must be positive and l2 non-negative")
        if self.optimizer not in ("adagrad", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainItem:
    """One training sentence: features plus whatever its objective needs.

    ``gold`` is used by NLL; ``mask`` by every other objective; ``q`` by the
    weighted and AdaK objectives.
    """

    features: SentenceFeatures
    mask: np.ndarray | None = None
    q: QFactorized | None = None
    gold: Sequence[int] | None = None


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float] = field(default_factory=list)
    lambda_final: float | None = None


def item_loss(lattice: Lattice, item: TrainItem, loss_config: LossConfig, lam: float, paths=None) -> tuple[float, LatticeGradient]:
    kind = loss_config.kind
    if kind == "nll":
        return nll_loss(lattice, item.gold)
    if kind == "fuzzy":
        return fuzzy_loss(lattice, item.mask)
    if kind == "weighted":
        return weighted_crf_loss(lattice, item.mask, item.q)
    breakdown, grad = adak_loss(lattice, item.mask, item.q, loss_config.k, lam, paths)
    return breakdown.total, grad


class _Optimizer:
    def __init__(self, params: ModelParams, config: TrainConfig):
        self.config = config
        self.adagrad = config.optimizer == "adagrad"
        if self.adagrad:
            self.g_emit = np.zeros_like(params.emit_weights)
            self.g_dense = [np.zeros_like(a) for a in (params.trans, params.start, params.stop)]

    def step(self, params: ModelParams, rows: np.ndarray, g_rows: np.ndarray, g_dense: list[np.ndarray]) -> None:
        lr, l2 = self.config.learning_rate, self.config.l2
        # L2 is applied lazily to the rows a batch touches
        g_rows = g_rows + l2 * params.emit_weights[rows]
        dense = [params.trans, params.start, params.stop]
        g_dense = [g + l2 * p for g, p in zip(g_dense, dense)]
        if self.adagrad:
            self.g_emit[rows] += g_rows**2
            params.emit_weights[rows] -= lr * g_rows / (np.sqrt(self.g_emit[rows]) + 1e-8)
            for p, g, acc in zip(dense, g_dense, self.g_dense):
                acc += g**2
                p -= lr * g / (np.sqrt(acc) + 1e-8)
        else:
            params.emit_weights[rows] -= lr * g_rows
            for p, g in zip(dense, g_dense):
                p -= lr * g


def train(
    items: Sequence[TrainItem],
    loss_config: LossConfig,
    train_config: TrainConfig,
    params: ModelParams,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch training; returns new parameters and the mean loss per epoch.

    Batch order is a seeded shuffle per epoch, and gradients within a batch
    are summed in item order, so results are bit-reproducible.
    """
    params = params.copy()
    if not items:
        raise ValueError("no training items")
    result = TrainResult(params)
    if train_config.epochs == 0:
        return result
    rng = np.random.default_rng(train_config.seed)
    opt = _Optimizer(params, train_config)
    n_batches = math.ceil(len(items) / train_config.batch_size)
    total_steps = train_config.epochs * n_batches
    step = 0
    lam = 0.0
    use_kbest = loss_config.kind == "adak"
    for epoch in range(train_config.epochs):
        kbest_cache: list | None = None
        if use_kbest and loss_config.kbest_refresh == "per_epoch":
            kbest_cache = [[p.labels for p in kbest_viterbi(score_features(params, it.features), it.mask, loss_config.k)] for it in items]
        order = rng.permutation(len(items))
        total = 0.0
        for b in range(n_batches):
            batch = order[b * train_config.batch_size : (b + 1) * train_config.batch_size]
            step += 1
            lam = lambda_at(step, total_steps, loss_config.gamma) if use_kbest else 0.0
            idx_parts, grad_parts = [], []
            g_dense = [np.zeros_like(params.trans), np.zeros_like(params.start), np.zeros_like(params.stop)]
            for i in batch:
                item = items[i]
                lattice = score_features(params, item.features)
                paths = kbest_cache[i] if kbest_cache is not None else None
                loss, grad = item_loss(lattice, item, loss_config, lam, paths)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, item {int(i)}")
                total += loss
                counts = np.diff(item.features.offsets)
                idx_parts.append(item.features.indices)
                grad_parts.append(np.repeat(grad.d_emit, counts, axis=0))
                g_dense[0] += grad.d_trans
                g_dense[1] += grad.d_start
                g_dense[2] += grad.d_stop
            idx = np.concatenate(idx_parts)
            rows, inverse = np.unique(idx, return_inverse=True)
            g_rows = np.zeros((len(rows), params.L))
            np.add.at(g_rows, inverse, np.concatenate(grad_parts))
            opt.step(params, rows, g_rows, g_dense)
        mean = total / len(items)
        if not math.isfinite(mean):
            raise DivergenceError(f"non-finite mean loss at epoch {epoch}")
        result.history.append(mean)
        log.debug("epoch %d mean loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    result.lambda_final = lam if use_kbest else None
    return result


# -- model files --------------------------------------------------------------
#
# Binary layout (little-endian):
#   8 bytes   magic b"ADAKNER\0"
#   uint32    format version
#   uint32    header length H
#   H bytes   UTF-8 JSON header: labels, feature config, shapes
#   float64   emit_weights (hash_dim * L, row-major), trans (L*L), start (L), stop (L)


def save_model(params: ModelParams, sink: BinaryIO) -> None:
    fc = params.feature_config
    header = {
        "label_types": list(params.label_set.types),
        "labels": list(params.label_set.labels),
        "templates": list(fc.templates),
        "hash_dim": fc.hash_dim,
        "hash_seed": fc.hash_seed,
        "num_labels": params.L,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    sink.write(MAGIC)
    sink.write(struct.pack("<II", params.version, len(blob)))
    sink.write(blob)
    for arr in (params.emit_weights, params.trans, params.start, params.stop):
        sink.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(source: BinaryIO) -> ModelParams:
    if source.read(len(MAGIC)) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    head = source.read(8)
    if len(head) != 8:
        raise ModelFormatError("truncated header")
    version, hlen = struct.unpack("<II", head)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        header = json.loads(source.read(hlen).decode("utf-8"))
        label_set = build_label_set(header["label_types"])
        fc = FeatureConfig(tuple(header["templates"]), int(header["hash_dim"]), int(header["hash_seed"]))
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise ModelFormatError(f"corrupt model header: {e}") from None
    L = len(label_set)
    if header.get("num_labels") != L or header.get("labels") != list(label_set.labels):
        raise ModelFormatError("label set in header is inconsistent")
    arrays = []
    for shape in ((fc.hash_dim, L), (L, L), (L,), (L,)):
        size = int(np.prod(shape)) * 8
        buf = source.read(size)
        if len(buf) != size:
            raise ModelFormatError("truncated weight payload")
        arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64))
    if source.read(1):
        raise ModelFormatError("trailing bytes after weight payload")
    if not all(np.isfinite(a).all() for a in arrays):
        raise ModelFormatError("non-finite weights")
    return ModelParams(label_set, fc, *arrays, version=version)


def save_model_file(params: ModelParams, path) -> None:
    with open(path, "wb") as f:
        save_model(params, f)


def load_model_file(path) -> ModelParams:
    with open(path, "rb") as f:
        return load_model(f)


def model_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    save_model(params, buf)
    return buf.getvalue()
