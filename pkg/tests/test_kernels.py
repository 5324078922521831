"""Equivalence and oracle tests for the dual-path (numba/numpy) kernels."""

import numpy as np
import pytest

from nextkrec import kernels


def _random_corpus(rng, num_seqs=30, num_items=25, max_len=40):
    seqs = [
        rng.integers(0, num_items, size=rng.integers(1, max_len + 1)).tolist()
        for _ in range(num_seqs)
    ]
    return kernels.flatten_sequences(seqs), seqs


def _brute_cooccur(seqs, num_items):
    counts = np.zeros((num_items, num_items))
    for seq in seqs:
        for i in range(len(seq)):
            for j in range(i + 1, len(seq)):
                counts[seq[i], seq[j]] += 1
    return counts


def test_flatten_roundtrip():
    seqs = [[1, 2, 3], [], [7]]
    flat, offsets = kernels.flatten_sequences(seqs)
    assert offsets.tolist() == [0, 3, 3, 4]
    assert flat.tolist() == [1, 2, 3, 7]


def test_cooccur_matches_bruteforce(monkeypatch):
    rng = np.random.default_rng(0)
    (flat, offsets), seqs = _random_corpus(rng)
    expected = _brute_cooccur(seqs, 25)
    for flag in ("0", "1"):
        monkeypatch.setenv("NEXTKREC_NUMBA", flag)
        got = kernels.cooccur_counts(flat, offsets, 25)
        np.testing.assert_array_equal(got, expected)


def test_markov_scores_paths_agree(monkeypatch):
    rng = np.random.default_rng(1)
    (flat, offsets), _ = _random_corpus(rng, num_seqs=12, num_items=15)
    logp = np.log(rng.dirichlet(np.ones(15), size=15))
    logp[rng.random(logp.shape) < 0.2] = -np.inf
    monkeypatch.setenv("NEXTKREC_NUMBA", "0")
    a = kernels.markov_scores(flat, offsets, logp, 0.6)
    monkeypatch.setenv("NEXTKREC_NUMBA", "1")
    b = kernels.markov_scores(flat, offsets, logp, 0.6)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_markov_scores_hand_value():
    # single history [a], candidate with p(g|a)=0.5, beta=0.6:
    # score = 0.6 * ln 0.5
    logp = np.full((2, 2), -np.inf)
    logp[0, 1] = np.log(0.5)
    flat, offsets = kernels.flatten_sequences([[0]])
    scores = kernels.markov_scores(flat, offsets, logp, 0.6)
    assert scores[0, 1] == pytest.approx(0.6 * np.log(0.5), abs=1e-12)
    assert scores[0, 0] == -np.inf


def test_markov_scores_inf_propagates_past_finite_terms():
    logp = np.array([[np.log(0.9), np.log(0.1)], [-np.inf, 0.0]])
    flat, offsets = kernels.flatten_sequences([[0, 1]])
    scores = kernels.markov_scores(flat, offsets, logp, 0.6)
    # candidate 0: beta*logp[1,0] = -inf even though beta^2*logp[0,0] is finite
    assert scores[0, 0] == -np.inf
    assert np.isfinite(scores[0, 1])


def test_markov_scores_underflow_weights_skipped():
    # beta^j underflows to 0.0 around j ~ 1400 for beta=0.1; a -inf row
    # deep in the history must not produce NaN
    logp = np.zeros((2, 2))
    logp[0] = -np.inf
    hist = [0] + [1] * 2000
    flat, offsets = kernels.flatten_sequences([hist])
    scores = kernels.markov_scores(flat, offsets, logp, 0.1)
    assert not np.isnan(scores).any()


def _random_genre_setup(rng, num_items, num_genres=6, zero_frac=0.15):
    genres = rng.random((num_items, num_genres))
    genres[rng.random(num_items) < zero_frac] = 0.0
    return kernels.unit_rows(genres)


def test_unit_rows():
    unit, zero = kernels.unit_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(unit[0], [0.6, 0.8])
    assert zero.tolist() == [False, True]
    assert unit[1].tolist() == [0.0, 0.0]


def test_mmr_paths_agree(monkeypatch):
    rng = np.random.default_rng(2)
    unit, zero = _random_genre_setup(rng, 30)
    scores = rng.random((8, 30))
    for lam in (0.0, 0.5, 2.0):
        monkeypatch.setenv("NEXTKREC_NUMBA", "0")
        a = kernels.mmr_select(scores, unit, zero, lam, 10)
        monkeypatch.setenv("NEXTKREC_NUMBA", "1")
        b = kernels.mmr_select(scores, unit, zero, lam, 10)
        np.testing.assert_array_equal(a, b)


def test_mmr_lambda_zero_is_plain_topk():
    rng = np.random.default_rng(3)
    unit, zero = _random_genre_setup(rng, 20)
    scores = rng.random((5, 20))
    got = kernels.mmr_select(scores, unit, zero, 0.0, 6)
    expected = np.argsort(-scores, axis=1, kind="stable")[:, :6]
    np.testing.assert_array_equal(got, expected)


def test_mmr_k_too_large_raises():
    unit, zero = kernels.unit_rows(np.eye(3))
    with pytest.raises(ValueError):
        kernels.mmr_select(np.zeros((1, 3)), unit, zero, 1.0, 4)


def test_pairdist_paths_agree(monkeypatch):
    rng = np.random.default_rng(4)
    unit, zero = _random_genre_setup(rng, 40)
    lists = rng.integers(0, 40, size=(12, 10))
    monkeypatch.setenv("NEXTKREC_NUMBA", "0")
    a = kernels.pairdist_sums(lists, unit, zero)
    monkeypatch.setenv("NEXTKREC_NUMBA", "1")
    b = kernels.pairdist_sums(lists, unit, zero)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_pairdist_orthogonal_onehot():
    unit, zero = kernels.unit_rows(np.eye(4))
    lists = np.array([[0, 1, 2, 3]])
    # all 6 pairs orthogonal -> distance 1 each
    assert kernels.pairdist_sums(lists, unit, zero)[0] == pytest.approx(6.0)


def test_pairdist_zero_vector_items_distance_one():
    unit, zero = kernels.unit_rows(np.array([[0.0, 0.0], [0.0, 0.0]]))
    lists = np.array([[0, 1]])
    assert kernels.pairdist_sums(lists, unit, zero)[0] == pytest.approx(1.0)


def test_numba_flag_dispatch(monkeypatch):
    monkeypatch.setenv("NEXTKREC_NUMBA", "0")
    assert kernels.numba_enabled() is False
    monkeypatch.setenv("NEXTKREC_NUMBA", "1")
    assert kernels.numba_enabled() is kernels.HAVE_NUMBA
