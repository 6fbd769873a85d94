"""Command-line front end.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or numeric
failure. Every subcommand reads and validates all of its inputs before it
writes anything.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import Dataset, SynthConfig, corrupt_entity_based, corrupt_random, demo_config, generate_synthetic, read_conll, write_conll
from .encoder import DivergenceError, ModelFormatError, extract_features, load_model_file, model_bytes, predict, predict_kbest
from .evaluation import build_report, coverage_at_k, entity_prf, write_report
from .labels import LabelError
from .lattice import mask_from_partial
from .pipeline import PipelineConfig, decode_tags, partial_indices, pipeline_label_set, run_pipeline, train_baseline, weighted_config

log = logging.getLogger("adakner")

CONFIG_ENV = "ADAKNER_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
OBJECTIVES = ("crf_ofill", "fuzzy", "weighted", "adak")


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p.read_text(encoding="utf-8")


def _read_corpus(path: str, args, **kw) -> Dataset:
    mode = "ignore" if getattr(args, "lenient_columns", False) else "error"
    return read_conll(_read_text(path), extra_columns=mode, **kw)


def _check_output(path: str | None) -> None:
    if path is None or path == "-":
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory is not writable: {parent}")


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    tmp = Path(path + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_bytes(path: str, data: bytes) -> None:
    tmp = Path(path + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _load_config_file(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
        raise UsageError(f"config file {path} must be a flat JSON object")
    return doc


def effective_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then explicit flags."""
    values = _load_config_file(args.config)
    for f in dataclasses.fields(PipelineConfig):
        if getattr(args, f.name, None) is not None:
            values[f.name] = getattr(args, f.name)
    return PipelineConfig.from_dict(values)


def _check_types(model_types: Sequence[str], data: Dataset, what: str) -> None:
    extra = [t for t in data.entity_types() if t not in model_types]
    if extra:
        raise UsageError(f"{what} uses entity types {extra} unknown to the model (model types: {list(model_types)})")


def _meta(command: str, **extra) -> dict:
    return {"command": command, "version": __version__, **extra}


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.sentences < 1:
        raise UsageError("--sentences must be >= 1")
    _check_output(args.out)
    if args.lexicon:
        try:
            doc = json.loads(_read_text(args.lexicon))
        except json.JSONDecodeError as e:
            raise UsageError(f"lexicon file is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or "lexicons" not in doc or "filler" not in doc:
            raise UsageError("lexicon file needs 'lexicons' and 'filler' keys")
        cfg = SynthConfig(
            n_sentences=args.sentences,
            lexicons=doc["lexicons"],
            filler=doc["filler"],
            length_range=tuple(doc.get("length_range", (6, 14))),
            entities_per_sentence=float(doc.get("entities_per_sentence", 2.0)),
            cues=doc.get("cues", {}),
            cue_prob=float(doc.get("cue_prob", 0.5)),
            seed=args.seed,
        )
    else:
        cfg = demo_config(args.sentences, seed=args.seed)
    _write_text(args.out, write_conll(generate_synthetic(cfg)))
    return EXIT_OK


def cmd_corrupt(args) -> int:
    if not 0 < args.rho <= 1:
        raise UsageError(f"--rho must lie in (0, 1], got {args.rho}")
    _check_output(args.out)
    data = _read_corpus(args.input, args)
    if not data.is_complete:
        raise UsageError("corrupt needs a fully annotated corpus")
    if args.scheme == "random":
        out = corrupt_random(data, args.rho, args.seed)
    else:
        out = corrupt_entity_based(data, args.rho, args.seed)
    if out.meta.get("warning"):
        log.warning("%s", out.meta["warning"])
    _write_text(args.out, write_conll(out))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    if args.objective in ("weighted", "adak") and not args.dev:
        raise UsageError(f"--dev is required for objective {args.objective}")
    _check_output(args.model_out)
    _check_output(args.report)
    train = _read_corpus(args.train, args)
    dev = _read_corpus(args.dev, args) if args.dev else None
    if dev is not None and not dev.is_complete:
        raise UsageError("the dev corpus must be fully annotated")
    label_set = pipeline_label_set(train, dev)

    start = time.perf_counter()
    history: list[dict] = []
    loss_histories = None
    if args.objective in ("crf_ofill", "fuzzy"):
        model, losses = train_baseline(train, args.objective, cfg, label_set)
        loss_histories = {"train": losses}
    else:
        run_cfg = weighted_config(cfg) if args.objective == "weighted" else cfg
        cfg = run_cfg
        model, state = run_pipeline(train, dev, run_cfg, label_set)
        history = state.history
    elapsed = time.perf_counter() - start

    metrics = entity_prf(dev.complete_tags(), decode_tags(model, dev.sentences)) if dev is not None else None
    report = build_report(
        _meta("train", objective=args.objective, train=args.train, dev=args.dev, seconds=round(elapsed, 3), labels=list(label_set.labels)),
        {**cfg.to_dict(), "objective": args.objective},
        metrics,
        None,
        history,
        loss_histories,
    )
    _write_bytes(args.model_out, model_bytes(model))
    if args.report:
        _write_text(args.report, write_report(report))
    if metrics is not None:
        log.info("dev P %.4f R %.4f F1 %.4f", metrics.precision, metrics.recall, metrics.f1)
    return EXIT_OK


def _load_model(path: str):
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model_file(path)


def _constraint_masks(model, data: Dataset):
    """Annotation masks for a partial corpus; ``None`` (plain decoding)
    when the corpus is fully tagged."""
    if data.is_complete:
        return [None] * len(data)
    return [mask_from_partial(partial_indices(t, model.label_set), model.L) for t in data.tags]


def cmd_eval(args) -> int:
    if args.topk is not None and args.topk < 1:
        raise UsageError("--topk must be >= 1")
    _check_output(args.report)
    model = _load_model(args.model)
    data = _read_corpus(args.data, args)
    if not data.is_complete:
        raise UsageError("eval needs a fully annotated corpus")
    _check_types(model.label_set.types, data, "the evaluation corpus")
    gold = data.complete_tags()
    feats = [extract_features(s, model.feature_config) for s in data.sentences]
    pred = decode_tags(model, feats)
    metrics = entity_prf(gold, pred)
    coverage = None
    if args.topk:
        gold_idx = [model.label_set.indices(g).tolist() for g in gold]
        cands = [[p.labels for p in predict_kbest(model, f, args.topk)] for f in feats]
        coverage = coverage_at_k(gold_idx, cands, args.overlap)
    config = {"topk": args.topk, "overlap": args.overlap, "model": args.model, "data": args.data}
    predictions = {"gold": gold, "pred": pred} if args.with_predictions else None
    report = build_report(_meta("eval"), config, metrics, coverage, None, None, predictions)
    _write_text(args.report, write_report(report))
    return EXIT_OK


def _read_decode_input(model, args) -> Dataset:
    data = _read_corpus(args.input, args, allow_bare_tokens=True)
    try:
        for tags in data.tags:
            partial_indices(tags, model.label_set)
    except LabelError as e:
        raise UsageError(f"input tags do not match the model label set: {e}") from None
    return data


def cmd_decode(args) -> int:
    _check_output(args.out)
    model = _load_model(args.model)
    data = _read_decode_input(model, args)
    masks = _constraint_masks(model, data)
    tags = []
    for toks, m in zip(data.sentences, masks):
        tags.append(model.label_set.decode(predict(model, toks, m).labels))
    _write_text(args.out, write_conll(Dataset(data.sentences, tags)))
    return EXIT_OK


def cmd_kbest(args) -> int:
    if args.k < 1:
        raise UsageError("-k must be >= 1")
    _check_output(args.out)
    model = _load_model(args.model)
    data = _read_decode_input(model, args)
    masks = _constraint_masks(model, data)
    lines = []
    for toks, m in zip(data.sentences, masks):
        cands = predict_kbest(model, toks, args.k, m)
        entry = {"tokens": toks, "candidates": [{"tags": model.label_set.decode(p.labels), "score": p.score} for p in cands]}
        lines.append(json.dumps(entry, allow_nan=False))
    _write_text(args.out, "".join(line + "\n" for line in lines))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("pipeline and training settings (override the config file)")
    for f in dataclasses.fields(PipelineConfig):
        kind = type(f.default)
        conv = _bool if kind is bool else kind
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adakner", description="Named entity recognition from incomplete annotations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    parser.add_argument("--lenient-columns", action="store_true", help="accept corpus lines with extra middle columns (e.g. POS, chunk)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fully annotated corpus")
    p.add_argument("--lexicon", help="JSON file with 'lexicons' (type -> entries) and 'filler'; omit for the built-in demo recipe")
    p.add_argument("--sentences", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", default="-")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="remove entity annotations and all O labels")
    p.add_argument("input")
    p.add_argument("--scheme", choices=("random", "entity"), default="random")
    p.add_argument("--rho", type=float, required=True, help="fraction of mentions kept, in (0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", default="-")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train a tagger with one of four objectives")
    p.add_argument("--train", required=True, help="(partially) annotated training corpus")
    p.add_argument("--dev", help="fully annotated dev corpus (required for weighted and adak)")
    p.add_argument("--objective", choices=OBJECTIVES, default="adak")
    p.add_argument("--model-out", required=True)
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--config", help=f"flat JSON config file (default: ${CONFIG_ENV})")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on a fully annotated corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--topk", type=int, help="also report top-K gold-path coverage")
    p.add_argument("--overlap", type=float, default=0.7, help="coverage agreement threshold")
    p.add_argument("--with-predictions", action="store_true", help="embed gold and predicted tags in the report")
    p.add_argument("--report", "-o", default="-")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("decode", cmd_decode, "tag a corpus (constrained by any partial tags)"), ("kbest", cmd_kbest, "list the top-K paths per sentence as JSON lines")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--model", required=True)
        p.add_argument("input", help="corpus file; single-column lines are bare tokens")
        if name == "kbest":
            p.add_argument("-k", type=int, default=5)
        p.add_argument("--out", "-o", default="-")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ValueError, ModelFormatError, OSError) as e:
        # ConllFormatError and LabelError are ValueErrors
        print(f"adakner {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError, ArithmeticError, RuntimeError) as e:
        print(f"adakner {args.command}: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
