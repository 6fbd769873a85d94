import io

import pytest
from hypothesis import given, settings, strategies as st

from adakner.corpus import (
    ConllFormatError,
    Dataset,
    SynthConfig,
    corrupt_entity_based,
    corrupt_random,
    demo_config,
    generate_synthetic,
    read_conll,
    round_half_up,
    write_conll,
)
from adakner.labels import build_label_set, spans_from_tags


def bio_ok(tags):
    prev = "O"
    for t in tags:
        if t.startswith("I-") and prev[2:] != t[2:]:
            return False
        prev = t
    return True


def toy(n_mentions=10):
    sents, tags = [], []
    for i in range(n_mentions):
        sents.append(["the", f"Ent{i}", "went", "home"])
        tags.append(["O", "B-PER", "O", "O"])
    return Dataset(sents, tags)


def test_read_complete():
    d = read_conll("EU B-ORG\nrejects O\n\n")
    assert d.sentences == [["EU", "rejects"]] and d.tags == [["B-ORG", "O"]]
    assert d.is_complete


def test_read_partial():
    d = read_conll("EU B-ORG\nrejects -\n\n")
    assert d.tags == [["B-ORG", None]] and not d.is_complete


def test_read_column_count_error():
    with pytest.raises(ConllFormatError, match="column"):
        read_conll("EU B-ORG Z-EXTRA\n")
    d = read_conll("EU NNP B-ORG\n", extra_columns="ignore")
    assert d.tags == [["B-ORG"]]
    with pytest.raises(ConllFormatError):
        read_conll("EU\n")


def test_read_errors():
    with pytest.raises(ConllFormatError):
        read_conll("")
    with pytest.raises(ConllFormatError):
        read_conll("EU X-ORG\n")
    with pytest.raises(ConllFormatError):
        read_conll("EU B-ORG\n", labelset=build_label_set(["PER"]))


@pytest.mark.parametrize("text", ["EU B-ORG\nrejects O\n\n", "EU B-ORG\nrejects -\n\n", "a O\n\nb B-X\nc I-X\n\n"])
def test_round_trip_byte_exact(text):
    d = read_conll(text)
    assert write_conll(d) == text
    assert read_conll(write_conll(d)).tags == d.tags
    buf = io.StringIO()
    write_conll(d, buf)
    assert buf.getvalue() == text


tag_strategy = st.sampled_from(["O", "B-PER", "I-PER", "B-LOC", "-"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.tuples(st.text("abcXYZ", min_size=1, max_size=5), tag_strategy), min_size=1, max_size=6), min_size=1, max_size=4))
def test_round_trip_property(rows):
    d = Dataset([[t for t, _ in r] for r in rows], [[None if g == "-" else g for _, g in r] for r in rows])
    text = write_conll(d)
    back = read_conll(text)
    assert back.sentences == d.sentences and back.tags == d.tags
    assert write_conll(back) == text


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 0.49)] == [1, 2, 3, 0]


def test_corrupt_random_exact_count():
    d = toy(10)
    out = corrupt_random(d, 0.4, seed=3)
    kept = sum(len(spans_from_tags([t or "O" for t in row])) for row in out.tags)
    assert kept == 4
    # all O tokens unannotated
    assert all(t is None or t != "O" for row in out.tags for t in row)
    assert out.gold == d.tags
    assert out.meta["scheme"] == "random" and out.meta["rho"] == 0.4


def test_corrupt_random_boundary_and_determinism():
    d = generate_synthetic(demo_config(60, seed=1))
    full = corrupt_random(d, 1.0, seed=0)
    for row, gold in zip(full.tags, d.tags):
        assert [t if g != "O" else None for t, g in zip(gold, gold)] == row
    a, b = corrupt_random(d, 0.3, 5), corrupt_random(d, 0.3, 5)
    assert a.tags == b.tags and write_conll(a) == write_conll(b)


def test_corrupt_random_nested():
    d = generate_synthetic(demo_config(80, seed=2))

    def kept(out):
        return {(i, s) for i, row in enumerate(out.tags) for s in spans_from_tags([t or "O" for t in row])}

    prev = set()
    for rho in (0.1, 0.2, 0.4, 0.7, 1.0):
        cur = kept(corrupt_random(d, rho, seed=9))
        assert prev <= cur
        prev = cur


def test_corrupt_rejects():
    d = toy(3)
    for rho in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            corrupt_random(d, rho, 0)
    with pytest.raises(ValueError):
        corrupt_random(Dataset([["a"]], [[None]]), 0.5, 0)


def test_corrupt_no_entities_warns():
    d = Dataset([["a", "b"]], [["O", "O"]])
    out = corrupt_random(d, 0.5, 0)
    assert out.meta["warning"] and out.tags == d.tags
    assert corrupt_entity_based(d, 0.5, 0).meta["warning"]


def test_entity_based_bahrain():
    d = Dataset(
        [["Bahrain", "won"], ["in", "Bahrain"], ["Franz", "and", "Bahrain"]],
        [["B-LOC", "O"], ["O", "B-LOC"], ["B-PER", "O", "B-LOC"]],
    )
    out = corrupt_entity_based(d, 0.25, seed=0, order=[("Bahrain",), ("Franz",)])
    assert out.tags == [[None, None], [None, None], ["B-PER", None, None]]
    assert corrupt_entity_based(d, 1.0, seed=0).tags == [["B-LOC", None], [None, "B-LOC"], ["B-PER", None, "B-LOC"]]


def test_entity_based_postcondition():
    d = generate_synthetic(demo_config(100, seed=4))
    total = sum(len(spans_from_tags(t)) for t in d.tags)
    for rho in (0.1, 0.25, 0.5, 0.9):
        for seed in range(3):
            out = corrupt_entity_based(d, rho, seed)
            kept = [(i, s) for i, row in enumerate(out.tags) for s in spans_from_tags([t or "O" for t in row])]
            assert len(kept) <= round_half_up(rho * total)
            removed = {tuple(d.sentences[i][s.start : s.end]) for i, row in enumerate(d.tags) for s in spans_from_tags(row)} - {
                tuple(d.sentences[i][s.start : s.end]) for i, s in kept
            }
            # a removed form has no surviving occurrence
            for i, s in kept:
                assert tuple(d.sentences[i][s.start : s.end]) not in removed
    a = corrupt_entity_based(d, 0.4, 11)
    assert a.tags == corrupt_entity_based(d, 0.4, 11).tags


def test_synthetic_deterministic_and_well_formed():
    a = generate_synthetic(demo_config(500, seed=0))
    b = generate_synthetic(demo_config(500, seed=0))
    assert write_conll(a) == write_conll(b)
    assert write_conll(a) != write_conll(generate_synthetic(demo_config(500, seed=1)))
    assert all(bio_ok(t) for t in a.tags)
    assert a.is_complete
    n_ent = sum(len(spans_from_tags(t)) for t in a.tags)
    assert 800 <= n_ent <= 1200
    assert sorted(a.entity_types()) == ["LOC", "PER"]


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(5, {"PER": []}, ["a"]))
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(5, {"PER": ["Ann"]}, []))
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(5, {"PER": ["Ann"]}, ["Ann", "b"]))


def test_synthetic_multi_token_entities():
    cfg = SynthConfig(50, {"LOC": ["New York", "Paris"]}, ["x", "y", "z"], seed=3)
    d = generate_synthetic(cfg)
    for toks, tags in zip(d.sentences, d.tags):
        for s in spans_from_tags(tags):
            assert " ".join(toks[s.start : s.end]) in ("New York", "Paris")


def test_subset_and_label_set():
    d = read_conll("a B-X\nb O\n\nc B-Y\n\n")
    assert d.label_set().labels == ("O", "B-X", "I-X", "B-Y", "I-Y")
    assert d.subset([1]).sentences == [["c"]]
