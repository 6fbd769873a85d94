"""BIO label alphabet, span conversion and transition legality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

OUTSIDE = "O"
_RESERVED = set("-|")


class LabelError(ValueError):
    pass


class Span(NamedTuple):
    start: int
    end: int  # exclusive
    etype: str


def _check_type_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise LabelError(f"invalid entity type {name!r}")
    if any(c.isspace() or c in _RESERVED for c in name):
        raise LabelError(f"entity type {name!r} contains whitespace or a reserved character")


def parse_label(label: str) -> tuple[str, str | None]:
    """Split a label string into ``(kind, etype)`` where kind is O, B or I."""
    if label == OUTSIDE:
        return OUTSIDE, None
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        etype = label[2:]
        _check_type_name(etype)
        return label[0], etype
    raise LabelError(f"unknown label {label!r}")


@dataclass(frozen=True)
class LabelSet:
    """Ordered label alphabet: ``O`` first, then ``B-t, I-t`` per type."""

    types: tuple[str, ...]
    labels: tuple[str, ...] = field(init=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = [OUTSIDE]
        for t in self.types:
            labels += [f"B-{t}", f"I-{t}"]
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def outside(self) -> int:
        return 0

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise LabelError(f"label {label!r} not in label set {self.labels}") from None

    def indices(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.index(lab) for lab in labels], dtype=np.int64)

    def decode(self, indices) -> list[str]:
        return [self.labels[int(i)] for i in indices]

    def kinds(self) -> list[str]:
        return [parse_label(lab)[0] for lab in self.labels]

    def to_dict(self) -> dict:
        return {"types": list(self.types)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSet":
        return build_label_set(d["types"])


def build_label_set(entity_types: Sequence[str]) -> LabelSet:
    types = list(entity_types)
    if not types:
        raise LabelError("at least one entity type is required")
    for t in types:
        _check_type_name(t)
    if len(set(types)) != len(types):
        raise LabelError(f"duplicate entity types in {types}")
    return LabelSet(tuple(types))


def spans_from_tags(tags: Sequence[str]) -> list[Span]:
    """Extract maximal entity mentions.

    An ``I-t`` that does not continue a ``B-t``/``I-t`` run opens a new
    mention, as conlleval does.
    """
    spans = []
    start, etype = None, None
    for i, tag in enumerate(tags):
        kind, t = parse_label(tag)
        if kind == "I" and etype == t:
            continue
        if etype is not None:
            spans.append(Span(start, i, etype))
        if kind == OUTSIDE:
            start, etype = None, None
        else:
            start, etype = i, t
    if etype is not None:
        spans.append(Span(start, len(tags), etype))
    return spans


def tags_from_spans(spans: Sequence[Span], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for span in sorted(spans, key=lambda s: s.start):
        start, end, etype = span
        if not 0 <= start < end <= length:
            raise LabelError(f"span {span} out of range for length {length}")
        if any(tag != OUTSIDE for tag in tags[start:end]):
            raise LabelError(f"span {span} overlaps another span")
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = f"I-{etype}"
    return tags


def structural_transitions(labelset: LabelSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(trans, initial, final)`` boolean legality under BIO.

    ``trans[a, b]`` is true iff label ``b`` may follow label ``a``.
    """
    parsed = [parse_label(lab) for lab in labelset.labels]
    L = len(parsed)
    trans = np.ones((L, L), dtype=bool)
    initial = np.ones(L, dtype=bool)
    for b, (kind_b, type_b) in enumerate(parsed):
        if kind_b != "I":
            continue
        initial[b] = False
        for a, (kind_a, type_a) in enumerate(parsed):
            trans[a, b] = kind_a != OUTSIDE and type_a == type_b
    final = np.ones(L, dtype=bool)
    return trans, initial, final
