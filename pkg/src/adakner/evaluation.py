"""Entity-level scoring, top-K gold-path coverage and JSON reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Any, Sequence, TextIO

from .labels import spans_from_tags


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f, tp, fp, fn)


def entity_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> PRF:
    """Micro-averaged exact-match span scores."""
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    tp = fp = fn = 0
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError(f"sentence {i}: gold length {len(g)} != predicted length {len(p)}")
        gs, ps = set(spans_from_tags(g)), set(spans_from_tags(p))
        hit = len(gs & ps)
        tp += hit
        fp += len(ps) - hit
        fn += len(gs) - hit
    return PRF.from_counts(tp, fp, fn)


@dataclass(frozen=True)
class CoverageResult:
    covered: int
    total: int
    fraction: float
    overlap_threshold: float = 0.7


def coverage_at_k(gold_paths: Sequence[Sequence], kbest_lists: Sequence[Sequence[Sequence]], overlap_threshold: float = 0.7) -> CoverageResult:
    """Fraction of sentences where some candidate agrees with gold on at
    least ``overlap_threshold`` of its tokens."""
    if len(gold_paths) != len(kbest_lists):
        raise ValueError("gold and candidate lists differ in length")
    covered = 0
    for i, (gold, cands) in enumerate(zip(gold_paths, kbest_lists)):
        if not cands:
            raise ValueError(f"sentence {i} has no candidates")
        agree = max(sum(a == b for a, b in zip(gold, c)) for c in cands)
        # count space, so 7 of 10 meets 0.7 despite float rounding
        if agree >= overlap_threshold * len(gold) - 1e-9:
            covered += 1
    total = len(gold_paths)
    return CoverageResult(covered, total, covered / total if total else 0.0, overlap_threshold)


REPORT_SECTIONS = ("meta", "config", "metrics", "coverage", "history")


HISTORY_KEYS = ("dev_f1", "accepted", "mean_loss", "lambda_final", "temperature")


def _history_entry(h: dict) -> dict:
    entry = {key: h.get(key) for key in HISTORY_KEYS}
    entry.update((k, v) for k, v in h.items() if k not in entry)
    return entry


def build_report(
    meta: dict | None = None,
    config: dict | None = None,
    metrics: PRF | None = None,
    coverage: CoverageResult | None = None,
    history: Sequence[dict] | None = None,
    loss_histories: dict[str, Sequence[float]] | None = None,
    predictions: dict[str, Any] | None = None,
) -> dict:
    report = {
        "meta": dict(meta or {}),
        "config": dict(config or {}),
        "metrics": asdict(metrics or PRF.from_counts(0, 0, 0)),
        "coverage": asdict(coverage) if coverage else {"covered": 0, "total": 0, "fraction": 0.0, "overlap_threshold": 0.7},
        "history": [_history_entry(h) for h in (history or [])],
    }
    if loss_histories:
        report["loss_histories"] = {k: list(v) for k, v in loss_histories.items()}
    if predictions is not None:
        report["predictions"] = predictions
    return report


def write_report(report: dict, sink: TextIO | None = None) -> str:
    text = json.dumps(report, indent=2, allow_nan=False) + "\n"
    if sink is not None:
        sink.write(text)
    return text


def read_report(source: TextIO | str) -> dict:
    doc = json.loads(source if isinstance(source, str) else source.read())
    missing = [s for s in REPORT_SECTIONS if s not in doc]
    if missing:
        raise ValueError(f"report lacks sections {missing}")
    return doc
