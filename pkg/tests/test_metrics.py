import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wasserstein_distance

from sessalign.datagen import generate_corpus
from sessalign.model import AlignModel
from sessalign.metrics import edit_distance, per, wasserstein_1d, wd_per_dimension, wer

from conftest import tiny_encoder, tiny_gen
from oracles import edit_distance_exhaustive, w1_sorted_pairing


def test_edit_distance_matches_exhaustive_alignment():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        e = edit_distance(a, b)
        assert e.distance == edit_distance_exhaustive(a, b)
        assert e.insertions - e.deletions == len(b) - len(a)


def test_edit_distance_hand_cases():
    assert edit_distance("kitten", "sitting").distance == 3
    e = edit_distance([1, 2, 3], [])
    assert (e.insertions, e.deletions, e.substitutions) == (0, 3, 0)
    e = edit_distance([], [4, 4])
    assert (e.insertions, e.deletions, e.substitutions) == (2, 0, 0)


def test_rates_are_pooled_over_total_reference_length():
    refs = [[1, 2, 3, 4], [5]]
    hyps = [[1, 2, 3, 4], [6]]
    assert per(refs, hyps) == pytest.approx(1 / 5)
    assert wer(["The cat sat", "on"], ["the cat", "on mat"]) == pytest.approx(2 / 4)
    with pytest.raises(ValueError, match="zero"):
        per([[]], [[1]])
    with pytest.raises(ValueError, match="hypotheses"):
        per([[1]], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_w1_matches_sorted_pairing_oracle(a, b):
    assert wasserstein_1d(a, b) == pytest.approx(w1_sorted_pairing(a, b), rel=1e-12, abs=1e-12)


def test_w1_matches_scipy():
    rng = np.random.default_rng(1)
    for n, m in [(10, 10), (7, 13), (100, 33)]:
        a, b = rng.normal(size=n), rng.normal(1.0, 2.0, size=m)
        assert wasserstein_1d(a, b) == pytest.approx(wasserstein_distance(a, b), rel=1e-12)


def test_w1_translation_and_scale_laws():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=30), rng.normal(size=45)
    base = wasserstein_1d(a, b)
    assert wasserstein_1d(a + 3.25, b + 3.25) == pytest.approx(base, abs=1e-12)
    assert wasserstein_1d(-2.5 * a, -2.5 * b) == pytest.approx(2.5 * base, abs=1e-12)
    # a pure shift of one sample moves W1 by exactly the shift
    assert wasserstein_1d(a, a + 0.75) == pytest.approx(0.75, abs=1e-12)
    assert wasserstein_1d(a, a) == 0.0


def test_w1_rejects_empty():
    with pytest.raises(ValueError, match="nonempty"):
        wasserstein_1d([], [1.0])


def test_wd_per_dimension_ranks_largest_first():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(200, 3))
    tgt = rng.normal(size=(150, 3)) + np.array([0.0, 2.0, 0.5])
    rep = wd_per_dimension(src, tgt)
    assert list(rep.ranking) == [1, 2, 0]
    assert rep.mean == pytest.approx(rep.distances.mean())
    with pytest.raises(ValueError, match="expected"):
        wd_per_dimension(src, tgt[:, :2])


def test_edit_distance_is_a_metric():
    rng = np.random.default_rng(4)
    seqs = lambda: list(rng.integers(0, 4, size=rng.integers(0, 11)))
    for _ in range(500):
        a, b, c = seqs(), seqs(), seqs()
        d = lambda x, y: edit_distance(x, y).distance
        assert d(a, b) == d(b, a) and d(a, a) == 0
        assert d(a, c) <= d(a, b) + d(b, c)


def test_edit_distance_documented_cases():
    e = edit_distance([1, 2, 3], [1, 3])
    assert (e.deletions, e.distance) == (1, 1)
    assert edit_distance([5, 6], [5, 6]).distance == 0


def test_pooled_rate_documented_cases():
    refs = [[1, 2, 3, 4, 5], [1, 2, 3, 4, 5]]
    assert per(refs, [[1, 2, 3, 4, 5], [1, 2, 9, 4, 5]]) == pytest.approx(0.10, abs=1e-15)
    assert per(refs, [[], []]) == 1.0
    assert per(refs, refs) == 0.0


def test_pooling_weights_by_reference_length_not_by_corpus():
    r1, h1 = [[1, 2]], [[1, 3]]                      # 1 / 2
    r2, h2 = [[1, 2, 3, 4, 5, 6, 7, 8]], [[1, 2, 3, 4, 5, 6, 7, 8]]   # 0 / 8
    assert per(r1 + r2, h1 + h2) == pytest.approx(1 / 10, abs=1e-15)
    assert per(r1 + r2, h1 + h2) != pytest.approx((per(r1, h1) + per(r2, h2)) / 2)


def test_w1_documented_cases():
    assert wasserstein_1d([0.0, 1.0], [2.0, 3.0]) == 2.0
    x = np.random.default_rng(5).normal(size=(40, 4))
    rep = wd_per_dimension(x, x)
    assert np.all(rep.distances == 0.0)
    assert sorted(rep.ranking) == [0, 1, 2, 3]


def test_zero_drift_latent_gap_is_within_permutation_null():
    corpus = generate_corpus(tiny_gen(n_source=1, n_target=1, trials_per_session=40, drift_strength=0.0))
    model = AlignModel(tiny_encoder(n_channels=6, vocab_size=6), seed=0)
    trials = corpus.session(0).trials + corpus.session(1).trials
    lat = [model.encode([t.features]).layers[0].data[0] for t in trials]
    n0 = len(corpus.session(0).trials)

    def stat(order):
        a = np.concatenate([lat[i] for i in order[:n0]])
        b = np.concatenate([lat[i] for i in order[n0:]])
        return wd_per_dimension(a, b).mean

    observed = stat(np.arange(len(trials)))
    rng = np.random.default_rng(6)
    null = np.array([stat(rng.permutation(len(trials))) for _ in range(200)])
    p = (1 + np.sum(null >= observed)) / (1 + null.size)
    assert p > 0.01
