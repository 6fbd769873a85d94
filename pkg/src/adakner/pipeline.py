"""The iterative k-fold AdaK training loop and the baseline trainers.

One iteration:

1. train a model per fold on the selected samples outside that fold;
2. for each held-out sentence build its candidate mask from the previous
   accepted full model's K-best decodes and the entity dictionary, then
   estimate ``q`` and a probability score with the fold model;
3. rebuild the entity dictionary from the fold models' predictions and
   select confident samples for the next iteration;
4. train a full model on all sentences and keep it only if dev F1 improves.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Dataset
from .encoder import (
    FeatureConfig,
    ModelParams,
    SentenceFeatures,
    TrainConfig,
    TrainItem,
    extract_features,
    predict,
    predict_kbest,
    score_features,
    train,
)
from .evaluation import PRF, entity_prf
from .labels import OUTSIDE, LabelSet, build_label_set, spans_from_tags
from .lattice import ScoredPath, log_partition, mask_from_partial
from .lattice import probability_score as lattice_probability_score
from .objectives import LossConfig
from .qdist import QFactorized, TemperatureSchedule, estimate_q, one_hot_q, temperature_at, uniform_q

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    k_folds: int = 2
    iterations: int = 5
    top_k: int = 5
    freq_threshold: int = 2
    selection_tau: float = 0.5
    t_start: float = 2.0
    t_end: float = 0.5
    gamma: float = 2.0
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.1
    l2: float = 1e-5
    seed: int = 0
    q_init: str = "hard_o"
    kbest_refresh: str = "per_epoch"
    length_normalize_score: bool = True
    # switches that turn the loop into the weighted-CRF baseline
    q_mode: str = "interpolated"
    use_kbest_loss: bool = True
    use_candidate_mask: bool = True
    use_selection: bool = True
    dictionary_mode: str = "replace"
    hash_dim: int = 1 << 20
    hash_seed: int = 0
    optimizer: str = "adagrad"
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.k_folds < 2:
            errors.append("k_folds must be >= 2")
        if self.iterations < 1:
            errors.append("iterations must be >= 1")
        if self.top_k < 1:
            errors.append("top_k must be >= 1")
        if self.freq_threshold < 1:
            errors.append("freq_threshold must be >= 1")
        if not 0.0 <= self.selection_tau <= 1.0:
            errors.append("selection_tau must lie in [0, 1]")
        if not self.t_start >= self.t_end > 0:
            errors.append("need t_start >= t_end > 0")
        if not self.gamma > 0:
            errors.append("gamma must be positive")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0 or self.l2 < 0:
            errors.append("invalid training hyperparameters")
        if self.q_init not in ("hard_o", "uniform"):
            errors.append("q_init must be hard_o or uniform")
        if self.kbest_refresh not in ("per_epoch", "per_step"):
            errors.append("kbest_refresh must be per_epoch or per_step")
        if self.q_mode not in ("hard", "soft", "interpolated"):
            errors.append("q_mode must be hard, soft or interpolated")
        if self.dictionary_mode not in ("replace", "accumulate"):
            errors.append("dictionary_mode must be replace or accumulate")
        if self.jobs < 1:
            errors.append("jobs must be >= 1")
        if self.optimizer not in ("adagrad", "sgd"):
            errors.append("optimizer must be adagrad or sgd")
        try:
            FeatureConfig(hash_dim=self.hash_dim, hash_seed=self.hash_seed)
        except ValueError as e:
            errors.append(str(e))
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(hash_dim=self.hash_dim, hash_seed=self.hash_seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.l2, seed, self.optimizer)

    def loss_config(self) -> LossConfig:
        kind = "adak" if self.use_kbest_loss else "weighted"
        return LossConfig(kind, self.top_k, self.gamma, self.kbest_refresh)

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t_start, self.t_end, self.iterations)


# -- building blocks ----------------------------------------------------------


def split_folds(n_items: int, k: int, seed: int) -> np.ndarray:
    """Fold id per item: seeded shuffle, then contiguous near-equal blocks."""
    if k < 1 or k > n_items:
        raise ValueError(f"cannot split {n_items} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n_items)
    folds = np.empty(n_items, dtype=np.int64)
    for j, block in enumerate(np.array_split(order, k)):
        folds[block] = j
    return folds


@dataclass
class EntityDictionary:
    """Surface token sequence -> (entity type, frequency)."""

    entries: dict[tuple[str, ...], tuple[str, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, form) -> bool:
        return tuple(form) in self.entries

    def get(self, form) -> str | None:
        hit = self.entries.get(tuple(form))
        return hit[0] if hit else None

    @property
    def max_len(self) -> int:
        return max((len(k) for k in self.entries), default=0)


def count_entities(sentences: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]) -> dict[tuple[tuple[str, ...], str], int]:
    counts: dict[tuple[tuple[str, ...], str], int] = {}
    for toks, tags in zip(sentences, predicted):
        for span in spans_from_tags(tags):
            key = (tuple(toks[span.start : span.end]), span.etype)
            counts[key] = counts.get(key, 0) + 1
    return counts


def dictionary_from_counts(counts: dict[tuple[tuple[str, ...], str], int], c: int, type_order: Sequence[str]) -> EntityDictionary:
    """Keep (form, type) pairs seen at least ``c`` times; on a type
    conflict keep the more frequent type, ties going to the earlier type."""
    rank = {t: i for i, t in enumerate(type_order)}
    best: dict[tuple[str, ...], tuple[str, int]] = {}
    for (form, etype), n in counts.items():
        if n < c:
            continue
        cur = best.get(form)
        if cur is None or n > cur[1] or (n == cur[1] and rank.get(etype, len(rank)) < rank.get(cur[0], len(rank))):
            best[form] = (etype, n)
    return EntityDictionary(dict(sorted(best.items())))


def build_entity_dictionary(sentences: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]], c: int, type_order: Sequence[str]) -> EntityDictionary:
    return dictionary_from_counts(count_entities(sentences, predicted), c, type_order)


def self_built_candidate(sentence: Sequence[str], dictionary: EntityDictionary) -> list[str]:
    """Tag dictionary matches, scanning left to right and preferring the
    longest entry at each position."""
    n = len(sentence)
    tags = [OUTSIDE] * n
    longest = dictionary.max_len
    i = 0
    while i < n:
        for length in range(min(longest, n - i), 0, -1):
            etype = dictionary.get(sentence[i : i + length])
            if etype is not None:
                tags[i] = f"B-{etype}"
                tags[i + 1 : i + length] = [f"I-{etype}"] * (length - 1)
                i += length
                break
        else:
            i += 1
    return tags


def build_candidate_mask(
    partial: Sequence[int | None], kbest: Sequence[ScoredPath | Sequence[int]], self_built: Sequence[int], L: int, outside: int = 0
) -> np.ndarray:
    """Annotated tokens keep their label; others allow O, the dictionary
    label and every label a K-best candidate assigns there."""
    n = len(partial)
    if len(self_built) != n:
        raise ValueError("self-built candidate length does not match sentence")
    mask = np.zeros((n, L), dtype=bool)
    mask[:, outside] = True
    mask[np.arange(n), np.asarray(self_built, dtype=np.int64)] = True
    for cand in kbest:
        labels = cand.labels if isinstance(cand, ScoredPath) else cand
        if len(labels) != n:
            raise ValueError("candidate path length does not match sentence")
        mask[np.arange(n), np.asarray(labels, dtype=np.int64)] = True
    for t, lab in enumerate(partial):
        if lab is not None:
            mask[t] = False
            mask[t, lab] = True
    return mask


def select_samples(scores: Sequence[float], tau: float) -> tuple[list[int], bool]:
    """Indices with score >= tau; all indices (and ``True``) if none qualify."""
    chosen = [i for i, s in enumerate(scores) if s >= tau]
    if not chosen:
        log.warning("no sample reached selection threshold %.3f; using all", tau)
        return list(range(len(scores))), True
    return chosen, False


def mask_rows_valid(mask: np.ndarray, partial: Sequence[int | None], outside: int = 0) -> bool:
    for row, lab in zip(mask, partial):
        if lab is None:
            if not row[outside]:
                return False
        elif row.sum() != 1 or not row[lab]:
            return False
    return True


# -- the loop -----------------------------------------------------------------


@dataclass
class PipelineState:
    model: ModelParams
    dev_f1: float
    qs: list[QFactorized]
    masks: list[np.ndarray]
    dictionary: EntityDictionary
    scores: list[float]
    selected: list[int]
    folds: np.ndarray
    history: list[dict] = field(default_factory=list)


def pipeline_label_set(train: Dataset, dev: Dataset | None = None) -> LabelSet:
    types: dict[str, None] = {}
    for t in train.entity_types() + (dev.entity_types() if dev is not None else []):
        types.setdefault(t, None)
    return build_label_set(list(types))


def partial_indices(tags: Sequence[str | None], label_set: LabelSet) -> list[int | None]:
    return [None if t is None else label_set.index(t) for t in tags]


def decode_tags(params: ModelParams, sentences: Sequence[Sequence[str]] | Sequence[SentenceFeatures]) -> list[list[str]]:
    return [params.label_set.decode(predict(params, s).labels) for s in sentences]


def evaluate(params: ModelParams, data: Dataset) -> PRF:
    return entity_prf(data.complete_tags(), decode_tags(params, data.sentences))


def initial_q(partial: Sequence[int | None], mask: np.ndarray, L: int, q_init: str) -> QFactorized:
    if q_init == "uniform":
        return uniform_q(mask)
    return one_hot_q([0 if lab is None else lab for lab in partial], L)


def _seed(base: int, iteration: int, fold: int) -> int:
    return int(np.random.SeedSequence([base, iteration, fold]).generate_state(1, dtype=np.uint64)[0])


def run_pipeline(
    train_data: Dataset,
    dev: Dataset,
    config: PipelineConfig,
    label_set: LabelSet | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, PipelineState]:
    """Iteratively re-estimate ``q`` and candidate masks; return the last
    model that improved dev F1, with the loop state."""
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if not dev.is_complete:
        raise ValueError("dev set must be fully annotated")
    label_set = label_set or pipeline_label_set(train_data, dev)
    L = len(label_set)
    fc = config.feature_config()
    feats = [extract_features(s, fc) for s in train_data.sentences]
    dev_feats = [extract_features(s, fc) for s in dev.sentences]
    dev_gold = dev.complete_tags()
    partial = [partial_indices(t, label_set) for t in train_data.tags]
    ann_masks = [mask_from_partial(p, L) for p in partial]
    N = len(train_data)
    folds = split_folds(N, config.k_folds, config.seed)
    loss_cfg = config.loss_config()
    schedule = config.schedule()

    def dev_prf(params: ModelParams) -> PRF:
        return entity_prf(dev_gold, decode_tags(params, dev_feats))

    model = ModelParams.zeros(label_set, fc)
    best_f1 = dev_prf(model).f1
    has_full_model = False
    state = PipelineState(
        model=model,
        dev_f1=best_f1,
        qs=[initial_q(p, m, L, config.q_init) for p, m in zip(partial, ann_masks)],
        masks=list(ann_masks),
        dictionary=EntityDictionary(),
        scores=[1.0] * N,
        selected=list(range(N)),
        folds=folds,
    )
    dict_counts: dict = {}

    for it in range(config.iterations):
        temperature = temperature_at(it, schedule) if config.q_mode == "interpolated" else 1.0
        new_qs: list = [None] * N
        new_masks: list = [None] * N
        scores = [0.0] * N
        fold_preds: list = [None] * N
        selected = set(state.selected)

        def run_fold(j: int):
            train_idx = [i for i in range(N) if folds[i] != j and i in selected]
            if not train_idx:
                train_idx = [i for i in range(N) if folds[i] != j]
            items = [TrainItem(feats[i], state.masks[i], state.qs[i]) for i in train_idx]
            fold_model = train(items, loss_cfg, config.train_config(_seed(config.seed, it, j)), ModelParams.zeros(label_set, fc)).params
            out = []
            for i in np.flatnonzero(folds == j):
                if config.use_candidate_mask and has_full_model:
                    kb = predict_kbest(state.model, feats[i], config.top_k, ann_masks[i])
                    hx = label_set.indices(self_built_candidate(train_data.sentences[i], state.dictionary))
                    S = build_candidate_mask(partial[i], kb, hx, L)
                else:
                    S = ann_masks[i]
                lattice = score_features(fold_model, feats[i])
                q = estimate_q(lattice, S, config.q_mode, temperature)
                _, s = lattice_probability_score(lattice, S, config.length_normalize_score)
                pred = label_set.decode(predict(fold_model, feats[i], ann_masks[i]).labels)
                out.append((int(i), S, q, s, pred))
            return out

        if config.jobs > 1:
            with ThreadPoolExecutor(config.jobs) as pool:
                fold_outputs = list(pool.map(run_fold, range(config.k_folds)))
        else:
            fold_outputs = [run_fold(j) for j in range(config.k_folds)]
        for out in fold_outputs:
            for i, S, q, s, pred in out:
                new_masks[i], new_qs[i], scores[i], fold_preds[i] = S, q, s, pred

        counts = count_entities(train_data.sentences, fold_preds)
        if config.dictionary_mode == "accumulate":
            for key, n in counts.items():
                dict_counts[key] = dict_counts.get(key, 0) + n
            counts = dict_counts
        dictionary = dictionary_from_counts(counts, config.freq_threshold, label_set.types)
        if config.use_selection:
            chosen, fallback = select_samples(scores, config.selection_tau)
        else:
            chosen, fallback = list(range(N)), False

        items = [TrainItem(feats[i], new_masks[i], new_qs[i]) for i in range(N)]
        result = train(items, loss_cfg, config.train_config(_seed(config.seed, it, config.k_folds)), ModelParams.zeros(label_set, fc))
        candidate = result.params
        prf = dev_prf(candidate)
        accepted = prf.f1 > best_f1
        if accepted:
            best_f1 = prf.f1
            state.model = candidate
            state.dev_f1 = prf.f1
            has_full_model = True

        unannotated = [m[t] for m, p in zip(new_masks, partial) for t in range(len(p)) if p[t] is None]
        log_z_finite = all(np.isfinite(log_partition(score_features(candidate, feats[i]), new_masks[i])) for i in range(N))
        entry = {
            "iteration": it + 1,
            "dev_f1": prf.f1,
            "dev_precision": prf.precision,
            "dev_recall": prf.recall,
            "accepted": accepted,
            "mean_loss": result.history[-1] if result.history else None,
            "lambda_final": result.lambda_final,
            "temperature": temperature,
            "selected": len(chosen),
            "selection_fallback": fallback,
            "dictionary_size": len(dictionary),
            "mean_allowed_labels": float(np.mean([r.sum() for r in unannotated])) if unannotated else 0.0,
            "mask_rows_valid": all(mask_rows_valid(m, p) for m, p in zip(new_masks, partial)),
            "log_partition_finite": bool(log_z_finite),
        }
        state.history.append(entry)
        state.qs, state.masks, state.scores = new_qs, new_masks, scores
        state.dictionary, state.selected = dictionary, chosen
        log.info("iteration %d: dev F1 %.4f (%s)", it + 1, prf.f1, "accepted" if accepted else "rejected")
        if progress is not None:
            progress(entry)
    return state.model, state


def train_baseline(train_data: Dataset, objective: str, config: PipelineConfig, label_set: LabelSet | None = None, dev: Dataset | None = None) -> tuple[ModelParams, list[float]]:
    """Single-model baselines: ``crf_ofill`` (NLL with unannotated tokens
    read as O) and ``fuzzy`` (all compatible paths)."""
    label_set = label_set or pipeline_label_set(train_data, dev)
    L = len(label_set)
    fc = config.feature_config()
    items = []
    for toks, tags in zip(train_data.sentences, train_data.tags):
        p = partial_indices(tags, label_set)
        f = extract_features(toks, fc)
        if objective == "crf_ofill":
            items.append(TrainItem(f, gold=[label_set.outside if lab is None else lab for lab in p]))
        elif objective == "fuzzy":
            items.append(TrainItem(f, mask=mask_from_partial(p, L)))
        else:
            raise ValueError(f"unknown baseline objective {objective!r}")
    kind = "nll" if objective == "crf_ofill" else "fuzzy"
    result = train(items, LossConfig(kind), config.train_config(_seed(config.seed, 0, 0)), ModelParams.zeros(label_set, fc))
    return result.params, result.history


def weighted_config(config: PipelineConfig) -> PipelineConfig:
    """The weighted-CRF baseline: soft q, no K-best term, mask or selection."""
    return dataclasses.replace(config, q_mode="soft", use_kbest_loss=False, use_candidate_mask=False, use_selection=False)
