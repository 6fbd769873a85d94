import io

import numpy as np
import pytest

from adakner.corpus import demo_config, generate_synthetic
from adakner.encoder import (
    FeatureConfig,
    ModelFormatError,
    ModelParams,
    TrainConfig,
    TrainItem,
    _hash_feature,
    extract_features,
    fnv1a_64,
    item_loss,
    load_model,
    model_bytes,
    predict,
    predict_kbest,
    probability_score,
    save_model,
    score_features,
    score_sentence,
    train,
    word_shape,
)
from adakner.labels import build_label_set
from adakner.lattice import full_mask, log_partition, mask_from_partial, viterbi
from adakner.objectives import LossConfig
from adakner.qdist import estimate_q_soft

LS = build_label_set(["PER", "LOC"])
SMALL = FeatureConfig(hash_dim=1 << 12)


def random_params(rng, cfg=SMALL, scale=0.1):
    p = ModelParams.zeros(LS, cfg)
    p.emit_weights[:] = rng.normal(0, scale, p.emit_weights.shape)
    p.trans[:] = rng.normal(0, scale, p.trans.shape)
    p.start[:] = rng.normal(0, scale, p.L)
    p.stop[:] = rng.normal(0, scale, p.L)
    return p


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_word_shape():
    assert word_shape("Bahrain") == "Xx"
    assert word_shape("U.S.") == "X.X."
    assert word_shape("1999") == "d"


def test_features_deterministic_and_shared():
    s = ["a", "b", "Foo", "c", "d", "a", "b", "Foo", "c", "d"]
    f1, f2 = extract_features(s, SMALL), extract_features(s, SMALL)
    assert np.array_equal(f1.indices, f2.indices) and np.array_equal(f1.offsets, f2.offsets)
    assert f1.n == len(s)
    assert f1.indices.max() < SMALL.hash_dim and f1.indices.min() >= 0
    # positions 2 and 7 have identical +-2 windows
    assert np.array_equal(f1.token(2), f1.token(7))
    assert not np.array_equal(f1.token(0), f1.token(5))  # left boundary differs


def test_feature_seed_changes_indices():
    s = ["Ann", "went"]
    other = FeatureConfig(hash_dim=1 << 12, hash_seed=1)
    assert not np.array_equal(extract_features(s, SMALL).indices, extract_features(s, other).indices)


def test_feature_config_validation():
    for bad in (dict(hash_dim=1000), dict(hash_dim=512), dict(templates=()), dict(templates=("word", "pos"))):
        with pytest.raises(ValueError):
            FeatureConfig(**bad)


def test_collision_rate():
    rng = np.random.default_rng(0)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    toks = sorted({"".join(rng.choice(letters, int(rng.integers(3, 10)))) for _ in range(10500)})[:10000]
    buckets = [_hash_feature("w=" + t, 0, 1 << 20) for t in toks]
    rate = 1 - len(set(buckets)) / len(buckets)
    # measured 0.42%, close to the birthday-bound expectation n / 2m
    assert rate < 0.05
    assert rate < 0.01


def test_score_zero_and_single_feature():
    p = ModelParams.zeros(LS, SMALL)
    s = ["Ann", "met", "Ann"]
    lat = score_sentence(p, s)
    assert not lat.emit.any() and not lat.trans.any()
    feats = extract_features(s, SMALL)
    f = _hash_feature("0:w=ann", SMALL.hash_seed, SMALL.hash_dim)
    p.emit_weights[f, 2] = 1.0
    lat = score_sentence(p, s)
    for t in range(3):
        fires = int(np.sum(feats.token(t) == f))
        assert lat.emit[t, 2] == fires
        assert lat.emit[t, [0, 1, 3, 4]].sum() == 0


def test_score_linearity(rng):
    a, b = random_params(rng), random_params(rng)
    ab = a.copy()
    for name in ("emit_weights", "trans", "start", "stop"):
        getattr(ab, name)[:] = getattr(a, name) + getattr(b, name)
    s = ["x", "Y", "z", "w"]
    la, lb, lab = score_sentence(a, s), score_sentence(b, s), score_sentence(ab, s)
    np.testing.assert_allclose(lab.emit, la.emit + lb.emit, atol=1e-12)
    np.testing.assert_allclose(lab.trans, la.trans + lb.trans)


def test_predict_delegates_to_viterbi(rng):
    p = random_params(rng)
    s = ["a", "b", "c"]
    lat = score_sentence(p, s)
    assert predict(p, s, structural=False) == viterbi(lat)
    m = mask_from_partial([None, 0, None], p.L)
    assert predict(p, s, m, structural=False) == viterbi(lat, m)
    path = predict(p, s)
    # structural decode never produces O followed by I-x
    labels = [LS.labels[y] for y in path.labels]
    assert not any(b.startswith("I-") and a[2:] != b[2:] for a, b in zip(["O"] + labels, labels))
    assert len(predict_kbest(p, s, 3)) == 3


def test_probability_score_wrapper(rng):
    p = random_params(rng)
    s = ["a", "b", "c", "d"]
    sc = probability_score(p, s)
    lat = score_sentence(p, s)
    assert 0 < sc.s <= 1
    assert sc.s == pytest.approx(np.exp((sc.path.score - log_partition(lat)) / 4), rel=1e-10)


def toy_items(n=20, seed=0, kind="nll"):
    d = generate_synthetic(demo_config(n, seed=seed))
    ls = d.label_set()
    items = []
    for toks, tags in zip(d.sentences, d.tags):
        y = ls.indices(tags)
        feats = extract_features(toks, SMALL)
        mask = full_mask(len(y), len(ls))
        items.append(TrainItem(feats, mask, None, y))
    return ls, items


def test_zero_epochs_unchanged():
    ls, items = toy_items(5)
    p = ModelParams.zeros(ls, SMALL)
    res = train(items, LossConfig("nll"), TrainConfig(epochs=0), p)
    assert not res.params.emit_weights.any() and res.history == []


def test_nll_converges_on_toy():
    toks = ["Ann", "visits", "Rome"]
    y = [LS.index("B-PER"), 0, LS.index("B-LOC")]
    item = TrainItem(extract_features(toks, SMALL), None, None, y)
    res = train([item], LossConfig("nll"), TrainConfig(epochs=200, batch_size=1), ModelParams.zeros(LS, SMALL))
    assert res.history[-1] < 0.01
    assert predict(res.params, toks).labels == tuple(y)


def test_sgd_small_lr_monotone():
    ls, items = toy_items(10, seed=3)
    res = train(items, LossConfig("nll"), TrainConfig(epochs=15, batch_size=len(items), learning_rate=0.005, optimizer="sgd"), ModelParams.zeros(ls, SMALL))
    h = res.history
    assert all(np.isfinite(h))
    assert all(b <= a + 1e-6 for a, b in zip(h, h[1:]))


@pytest.mark.parametrize("kind", ["nll", "fuzzy", "weighted", "adak"])
def test_chained_gradient(kind, rng):
    p = random_params(rng, scale=0.3)
    toks = ["Ann", "x", "Ann", "Rome"]
    feats = extract_features(toks, SMALL)
    lat = score_features(p, feats)
    mask = mask_from_partial([1, None, None, None], p.L)
    item = TrainItem(feats, mask, estimate_q_soft(lat, mask), [1, 0, 1, 3])
    cfg = LossConfig(kind, k=2)
    paths = None
    if kind == "adak":
        from adakner.lattice import kbest_viterbi

        paths = [q.labels for q in kbest_viterbi(lat, mask, 2)]
    _, grad = item_loss(lat, item, cfg, 0.4, paths)
    h = 1e-5
    for f in feats.token(2)[:4]:
        for label in range(p.L):
            analytic = sum(grad.d_emit[t, label] * np.sum(feats.token(t) == f) for t in range(feats.n))
            vals = []
            for sign in (1, -1):
                q = p.copy()
                q.emit_weights[f, label] += sign * h
                vals.append(item_loss(score_features(q, feats), item, cfg, 0.4, paths)[0])
            numeric = (vals[0] - vals[1]) / (2 * h)
            assert abs(analytic - numeric) / max(1.0, abs(numeric)) < 1e-3


def test_training_bit_exact_determinism():
    ls, items = toy_items(12, seed=5)
    for it in items:
        it.mask = mask_from_partial([y if k % 2 else None for k, y in enumerate(it.gold)], len(ls))
        it.q = estimate_q_soft(score_features(ModelParams.zeros(ls, SMALL), it.features), it.mask)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=7)
    runs = [train(items, LossConfig("adak", k=3), cfg, ModelParams.zeros(ls, SMALL)) for _ in range(2)]
    assert model_bytes(runs[0].params) == model_bytes(runs[1].params)
    assert runs[0].history == runs[1].history
    assert runs[0].lambda_final == 1.0
    other = train(items, LossConfig("adak", k=3), TrainConfig(epochs=3, batch_size=4, seed=8), ModelParams.zeros(ls, SMALL))
    assert model_bytes(other.params) != model_bytes(runs[0].params)


def test_save_load_round_trip(rng):
    p = random_params(rng)
    blob = model_bytes(p)
    q = load_model(io.BytesIO(blob))
    assert model_bytes(q) == blob
    assert q.label_set == p.label_set and q.feature_config == p.feature_config
    d = generate_synthetic(demo_config(100, seed=9))
    for toks in d.sentences:
        assert predict(p, toks) == predict(q, toks)


def test_load_errors(rng):
    blob = model_bytes(random_params(rng))
    with pytest.raises(ModelFormatError):
        load_model(io.BytesIO(b"NOTAMODEL" + blob[9:]))
    with pytest.raises(ModelFormatError):
        load_model(io.BytesIO(blob[:-8]))
    with pytest.raises(ModelFormatError):
        load_model(io.BytesIO(blob + b"\x00"))
    bad_version = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    with pytest.raises(ModelFormatError, match="version"):
        load_model(io.BytesIO(bad_version))


def test_save_to_sink(rng, tmp_path):
    from adakner.encoder import load_model_file, save_model_file

    p = random_params(rng)
    path = tmp_path / "m.bin"
    save_model_file(p, path)
    assert model_bytes(load_model_file(path)) == model_bytes(p)
    buf = io.BytesIO()
    save_model(p, buf)
    assert buf.getvalue() == model_bytes(p)
