import math

import numpy as np
import pytest

from adakner.lattice import Lattice, enumerate_paths_bruteforce, full_mask, kbest_viterbi, log_partition, mask_from_partial, viterbi
from adakner.qdist import (
    TemperatureSchedule,
    estimate_q_hard,
    estimate_q_interpolated,
    estimate_q_soft,
    one_hot_q,
    temperature_at,
    uniform_q,
)

from conftest import random_lattice, random_mask


def tempered_marginals_by_enumeration(lat, mask, T):
    paths = enumerate_paths_bruteforce(lat, mask)
    s = np.array([p.score for p in paths]) / T
    w = np.exp(s - s.max())
    w /= w.sum()
    m = np.zeros((lat.n, lat.L))
    for wi, p in zip(w, paths):
        m[np.arange(lat.n), list(p.labels)] += wi
    return m


def test_hard_mode_follows_viterbi(rng):
    for _ in range(20):
        lat = random_lattice(rng, 5, 4)
        mask = random_mask(rng, 5, 4)
        q = estimate_q_hard(lat, mask)
        np.testing.assert_array_equal(np.argmax(q.logw, axis=1), viterbi(lat, mask).labels)
        assert np.all(np.sort(q.probs(), axis=1)[:, -1] == 1.0)


def test_hard_mode_fully_annotated(rng):
    lat = random_lattice(rng, 3, 3)
    q = estimate_q_hard(lat, mask_from_partial([2, 0, 1], 3))
    np.testing.assert_array_equal(q.probs(), np.eye(3)[[2, 0, 1]])


def test_hard_mode_dominant_path():
    emit = np.full((3, 3), -5.0)
    emit[[0, 1, 2], [1, 2, 0]] = 5.0
    q = estimate_q_hard(Lattice(emit, np.zeros((3, 3)), np.zeros(3), np.zeros(3)))
    np.testing.assert_array_equal(q.probs(), np.eye(3)[[1, 2, 0]])


def test_soft_is_interpolated_at_one(rng):
    lat = random_lattice(rng, 5, 4)
    mask = random_mask(rng, 5, 4)
    soft = estimate_q_soft(lat, mask)
    interp = estimate_q_interpolated(lat, mask, 1.0)
    assert np.max(np.abs(np.exp(soft.logw) - np.exp(interp.logw))) < 1e-12
    np.testing.assert_allclose(soft.probs().sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.isneginf(soft.logw[~mask]))


def test_soft_annotated_rows_one_hot(rng):
    lat = random_lattice(rng, 4, 3)
    q = estimate_q_soft(lat, mask_from_partial([None, 1, None, 2], 3))
    assert q.probs()[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert q.probs()[3, 2] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("T", [0.3, 1.0, 2.5])
def test_interpolated_matches_enumeration(rng, T):
    for _ in range(10):
        lat = random_lattice(rng, 4, 3)
        mask = random_mask(rng, 4, 3)
        q = estimate_q_interpolated(lat, mask, T)
        np.testing.assert_allclose(q.probs(), tempered_marginals_by_enumeration(lat, mask, T), atol=1e-10)


def test_high_temperature_is_near_uniform(rng):
    lat = Lattice(rng.uniform(-5, 5, (4, 3)), rng.uniform(-5, 5, (3, 3)), rng.uniform(-5, 5, 3), rng.uniform(-5, 5, 3))
    mask = random_mask(rng, 4, 3)
    q = estimate_q_interpolated(lat, mask, 1000.0)
    exact_uniform = uniform_q(mask).probs()
    assert np.max(np.abs(q.probs() - exact_uniform)) < 1e-2


def test_low_temperature_is_near_hard(rng):
    lat = random_lattice(rng, 5, 3)
    paths = sorted(enumerate_paths_bruteforce(lat), key=lambda p: -p.score)
    assert paths[0].score - paths[1].score > 1e-2
    q = estimate_q_interpolated(lat, None, 1e-3)
    probs = q.probs()
    for t, y in enumerate(paths[0].labels):
        assert probs[t, y] >= 0.999


def test_hard_is_zero_temperature_limit(rng):
    checked = 0
    for _ in range(50):
        lat = random_lattice(rng, 4, 3)
        mask = random_mask(rng, 4, 3)
        kb = kbest_viterbi(lat, mask, 2)
        if len(kb) < 2 or kb[0].score - kb[1].score < 0.1:
            continue
        q = estimate_q_interpolated(lat, mask, 1e-4)
        np.testing.assert_array_equal(np.argmax(q.logw, axis=1), np.argmax(estimate_q_hard(lat, mask).logw, axis=1))
        checked += 1
    assert checked > 10


def test_map_path_probability_non_increasing_in_temperature(rng):
    for _ in range(50):
        lat = random_lattice(rng, 4, 3)
        mask = random_mask(rng, 4, 3)
        best = viterbi(lat, mask).score
        peaks = [math.exp(best / T - log_partition(lat.scaled(1 / T), mask)) for T in (0.1, 0.5, 1, 2, 10)]
        assert all(b <= a + 1e-12 for a, b in zip(peaks, peaks[1:]))


def test_token_peak_is_not_monotone_in_temperature():
    # Two near-tied top paths that disagree at token 1: at low T its
    # marginal splits between them, at moderate T other paths back one side.
    rng = np.random.default_rng(0)
    Ts = (0.1, 0.5, 1, 2, 10)
    found = False
    for _ in range(200):
        lat = random_lattice(rng, 4, 3)
        peaks = [tempered_marginals_by_enumeration(lat, full_mask(4, 3), T).max(axis=1) for T in Ts]
        if any((b - a).max() > 0.05 for a, b in zip(peaks, peaks[1:])):
            found = True
            for T, p in zip(Ts, peaks):
                np.testing.assert_allclose(estimate_q_interpolated(lat, None, T).probs().max(axis=1), p, atol=1e-10)
            break
    assert found


def test_invalid_temperature(rng):
    with pytest.raises(ValueError):
        estimate_q_interpolated(random_lattice(rng, 2, 2), None, 0.0)


def test_temperature_schedule():
    sched = TemperatureSchedule(2.0, 0.5, 3)
    assert temperature_at(0, sched) == 2.0
    assert temperature_at(2, sched) == 0.5
    assert temperature_at(1, sched) == pytest.approx(1.0, abs=1e-12)
    assert temperature_at(0, TemperatureSchedule(3.0, 1.0, 1)) == 3.0
    with pytest.raises(ValueError):
        temperature_at(3, sched)
    with pytest.raises(ValueError):
        TemperatureSchedule(0.5, 2.0, 3)


def test_uniform_and_one_hot_rows():
    mask = np.array([[1, 1, 0], [0, 0, 1]], dtype=bool)
    np.testing.assert_allclose(uniform_q(mask).probs(), [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(one_hot_q([2, 0], 3).probs(), [[0, 0, 1], [1, 0, 0]])
