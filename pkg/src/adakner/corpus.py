"""CoNLL-style corpus IO, annotation removal and a seeded synthetic generator.

All randomness goes through numpy's ``PCG64`` bit generator
(``np.random.default_rng(seed)``), which is portable across platforms.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, TextIO

import numpy as np

from .labels import OUTSIDE, LabelError, LabelSet, Span, build_label_set, parse_label, spans_from_tags, tags_from_spans

log = logging.getLogger(__name__)

UNANNOTATED = "-"


class ConllFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Sentences with (possibly partial) tags.

    ``tags[i][j]`` is a label string, or ``None`` for an unannotated token.
    ``gold`` optionally keeps the complete tags a partial dataset was derived
    from; it is never written to disk.
    """

    sentences: list[list[str]]
    tags: list[list[str | None]]
    gold: list[list[str]] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.sentences) != len(self.tags):
            raise ValueError("sentences and tags differ in length")
        for toks, tags in zip(self.sentences, self.tags):
            if len(toks) != len(tags):
                raise ValueError(f"token/tag length mismatch in sentence {toks!r}")
        if self.gold is not None and len(self.gold) != len(self.sentences):
            raise ValueError("gold and sentences differ in length")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def is_complete(self) -> bool:
        return all(t is not None for tags in self.tags for t in tags)

    def entity_types(self) -> list[str]:
        """Entity types in order of first appearance."""
        seen: dict[str, None] = {}
        sources = list(self.tags) + list(self.gold or [])
        for tags in sources:
            for tag in tags:
                if tag is not None and tag != OUTSIDE:
                    seen.setdefault(parse_label(tag)[1], None)
        return list(seen)

    def label_set(self) -> LabelSet:
        return build_label_set(self.entity_types())

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(
            [self.sentences[i] for i in idx],
            [self.tags[i] for i in idx],
            None if self.gold is None else [self.gold[i] for i in idx],
            dict(self.meta),
        )

    def complete_tags(self) -> list[list[str]]:
        if not self.is_complete:
            raise ValueError("dataset contains unannotated tokens")
        return [list(t) for t in self.tags]


def read_conll(source: TextIO | str, labelset: LabelSet | None = None, extra_columns: str = "error", allow_bare_tokens: bool = False) -> Dataset:
    """Parse a corpus with one ``token tag`` pair per line.

    ``extra_columns="ignore"`` accepts lines with more than two columns and
    keeps only the first and last. ``allow_bare_tokens`` reads a line with a
    single column as an unannotated token.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    sentences, all_tags = [], []
    toks: list[str] = []
    tags: list[str | None] = []
    for lineno, raw in enumerate(source, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if toks:
                sentences.append(toks)
                all_tags.append(tags)
                toks, tags = [], []
            continue
        cols = line.split()
        if len(cols) == 1 and allow_bare_tokens:
            cols = [cols[0], UNANNOTATED]
        if len(cols) < 2 or (len(cols) > 2 and extra_columns != "ignore"):
            raise ConllFormatError(f"line {lineno}: expected 2 columns, got {len(cols)}")
        token, tag = cols[0], cols[-1]
        if tag == UNANNOTATED:
            tags.append(None)
        else:
            try:
                parse_label(tag)
                if labelset is not None:
                    labelset.index(tag)
            except LabelError as e:
                raise ConllFormatError(f"line {lineno}: {e}") from None
            tags.append(tag)
        toks.append(token)
    if toks:
        sentences.append(toks)
        all_tags.append(tags)
    if not sentences:
        raise ConllFormatError("empty corpus")
    return Dataset(sentences, all_tags)


def write_conll(dataset: Dataset, sink: TextIO | None = None) -> str:
    out = io.StringIO()
    for toks, tags in zip(dataset.sentences, dataset.tags):
        for tok, tag in zip(toks, tags):
            out.write(f"{tok} {UNANNOTATED if tag is None else tag}\n")
        out.write("\n")
    text = out.getvalue()
    if sink is not None:
        sink.write(text)
    return text


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_rho(rho: float) -> None:
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")


def _mentions(dataset: Dataset) -> list[tuple[int, Span]]:
    tags = dataset.complete_tags()
    return [(i, span) for i, t in enumerate(tags) for span in spans_from_tags(t)]


def _keep_only(dataset: Dataset, kept: Sequence[tuple[int, Span]], meta: dict) -> Dataset:
    by_sentence: dict[int, list[Span]] = {}
    for i, span in kept:
        by_sentence.setdefault(i, []).append(span)
    new_tags = []
    for i, toks in enumerate(dataset.sentences):
        row: list[str | None] = [None] * len(toks)
        for span in by_sentence.get(i, []):
            row[span.start : span.end] = tags_from_spans([span], len(toks))[span.start : span.end]
        new_tags.append(row)
    gold = dataset.complete_tags()
    return Dataset([list(s) for s in dataset.sentences], new_tags, gold, meta)


def corrupt_random(dataset: Dataset, rho: float, seed: int) -> Dataset:
    """Keep ``round(rho * E)`` randomly chosen mentions; unannotate everything else.

    The same seed keeps nested selections across rho values: the mentions
    kept at a smaller rho are a prefix of those kept at a larger one.
    """
    _check_rho(rho)
    mentions = _mentions(dataset)
    meta = {"scheme": "random", "rho": rho, "seed": seed, "warning": None}
    if not mentions:
        log.warning("corpus has no entity mentions; returned unchanged")
        return replace(dataset, meta={**meta, "warning": "no entities"})
    order = np.random.default_rng(seed).permutation(len(mentions))
    target = round_half_up(rho * len(mentions))
    kept = sorted((mentions[k] for k in order[:target]), key=lambda m: (m[0], m[1].start))
    return _keep_only(dataset, kept, meta)


def corrupt_entity_based(dataset: Dataset, rho: float, seed: int, order: Sequence[tuple[str, ...]] | None = None) -> Dataset:
    """Remove every occurrence of randomly drawn surface forms until at most
    ``round(rho * E)`` mentions remain.

    ``order`` overrides the seeded draw order of surface forms.
    """
    _check_rho(rho)
    mentions = _mentions(dataset)
    meta = {"scheme": "entity", "rho": rho, "seed": seed, "warning": None}
    if not mentions:
        log.warning("corpus has no entity mentions; returned unchanged")
        return replace(dataset, meta={**meta, "warning": "no entities"})

    def surface(m):
        i, span = m
        return tuple(dataset.sentences[i][span.start : span.end])

    counts: dict[tuple[str, ...], int] = {}
    for m in mentions:
        counts[surface(m)] = counts.get(surface(m), 0) + 1
    if order is None:
        forms = sorted(counts)
        order = [forms[k] for k in np.random.default_rng(seed).permutation(len(forms))]
    target = round_half_up(rho * len(mentions))
    remaining = len(mentions)
    removed = set()
    for form in order:
        if remaining <= target:
            break
        removed.add(tuple(form))
        remaining -= counts.get(tuple(form), 0)
    kept = [m for m in mentions if surface(m) not in removed]
    return _keep_only(dataset, kept, meta)


@dataclass
class SynthConfig:
    """Synthetic corpus recipe.

    Lexicon entries may be multi-token (space separated). ``cues`` maps an
    entity type to context words that precede its mentions with
    probability ``cue_prob``.
    """

    n_sentences: int
    lexicons: dict[str, list[str]]
    filler: list[str]
    length_range: tuple[int, int] = (6, 14)
    entities_per_sentence: float = 2.0
    cues: dict[str, list[str]] = field(default_factory=dict)
    cue_prob: float = 0.5
    seed: int = 0


def generate_synthetic(config: SynthConfig) -> Dataset:
    if not config.filler or not any(config.lexicons.values()):
        raise ValueError("synthetic generation needs a filler vocabulary and a non-empty lexicon")
    lex_tokens = {tok for entries in config.lexicons.values() for e in entries for tok in e.split()}
    if lex_tokens & set(config.filler):
        raise ValueError("lexicon tokens overlap the filler vocabulary")
    build_label_set(list(config.lexicons))
    rng = np.random.default_rng(config.seed)
    types = [t for t in config.lexicons if config.lexicons[t]]
    lo, hi = config.length_range
    max_entities = int(round(2 * config.entities_per_sentence))
    sentences, tags = [], []
    for _ in range(config.n_sentences):
        n_fill = int(rng.integers(lo, hi + 1))
        n_ent = int(rng.integers(0, max_entities + 1))
        toks = [config.filler[int(k)] for k in rng.integers(0, len(config.filler), n_fill)]
        row = [OUTSIDE] * n_fill
        # insert from the right so earlier slots stay valid
        slots = sorted(rng.integers(0, n_fill + 1, n_ent).tolist(), reverse=True)
        for slot in slots:
            etype = types[int(rng.integers(0, len(types)))]
            entries = config.lexicons[etype]
            words = entries[int(rng.integers(0, len(entries)))].split()
            ins_toks = list(words)
            ins_tags = [f"B-{etype}"] + [f"I-{etype}"] * (len(words) - 1)
            cues = config.cues.get(etype)
            if cues and rng.random() < config.cue_prob:
                ins_toks.insert(0, cues[int(rng.integers(0, len(cues)))])
                ins_tags.insert(0, OUTSIDE)
            toks[slot:slot] = ins_toks
            row[slot:slot] = ins_tags
        sentences.append(toks)
        tags.append(row)
    return Dataset(sentences, tags, meta={"synthetic_seed": config.seed})


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


def _pseudo_words(rng: np.random.Generator, count: int, syllables: tuple[int, int], taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[int(rng.integers(0, len(_ONSETS)))] + _VOWELS[int(rng.integers(0, len(_VOWELS)))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def demo_config(n_sentences: int = 500, seed: int = 0, types: Sequence[str] = ("PER", "LOC"), lexicon_size: int = 40, filler_size: int = 150) -> SynthConfig:
    """A self-contained recipe of pseudo-word lexicons with capitalized entities."""
    rng = np.random.default_rng([seed, 7919])
    taken: set[str] = set()
    filler = _pseudo_words(rng, filler_size, (1, 3), taken)
    lexicons = {}
    cues = {}
    for t in types:
        entries = []
        for _ in range(lexicon_size):
            n_tok = 1 if rng.random() < 0.6 else 2
            entries.append(" ".join(w.capitalize() for w in _pseudo_words(rng, n_tok, (2, 3), taken)))
        lexicons[t] = entries
        cues[t] = _pseudo_words(rng, 3, (1, 2), taken)
    return SynthConfig(n_sentences=n_sentences, lexicons=lexicons, filler=filler, cues=cues, seed=seed)
