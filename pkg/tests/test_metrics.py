import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deidkit import metrics
from deidkit.errors import ConfigurationError, InputError
from deidkit.metrics import ScoreSet

from oracles import brute_accuracy, brute_accuracy_fast, brute_tpr_at_fpr, brute_tpr_fast

# Coarse grids force plenty of ties, which is where threshold rules go wrong.
values = st.one_of(
    st.floats(0, 4, allow_nan=False),
    st.integers(0, 8).map(lambda k: k / 4),
)
score_lists = st.lists(values, min_size=1, max_size=40)
targets = st.sampled_from([1e-3, 0.01, 0.1, 0.25, 0.3, 0.5, 0.75, 0.9, 0.999])


class TestTprAtFpr:
    def test_worked_example(self):
        s = ScoreSet([1.5, 2.5, 3.5], [1, 2, 3, 4])
        tpr, tau = metrics.tpr_and_threshold(s, 0.25)
        assert tau == 1.5 and tpr == pytest.approx(1 / 3)

    def test_perfect_separation(self):
        assert metrics.tpr_at_fpr(ScoreSet([0.1, 0.2], [1.0, 2.0]), 1e-3) == 1.0

    def test_identical_multisets(self, rng):
        x = rng.random(1000)
        assert metrics.tpr_at_fpr(ScoreSet(x, x), 1e-3) == pytest.approx(1e-3)

    def test_no_qualifying_threshold(self):
        tpr, tau = metrics.tpr_and_threshold(ScoreSet([1.0], [0.5, 2.0]), 0.1)
        assert tpr == 0.0 and tau == -np.inf

    @pytest.mark.parametrize("target", [0.0, 1.0, -0.1, 1.5])
    def test_target_out_of_range(self, target):
        with pytest.raises(ConfigurationError):
            metrics.tpr_at_fpr(ScoreSet([1.0], [2.0]), target)

    @given(score_lists, score_lists, targets)
    def test_matches_brute_force(self, gen, imp, target):
        assert metrics.tpr_at_fpr(ScoreSet(gen, imp), target) == brute_tpr_at_fpr(gen, imp, target)

    @given(score_lists, score_lists, targets, targets)
    def test_monotone_in_target(self, gen, imp, a, b):
        lo, hi = sorted((a, b))
        s = ScoreSet(gen, imp)
        assert metrics.tpr_at_fpr(s, lo) <= metrics.tpr_at_fpr(s, hi)

    def test_fast_oracle_agrees_with_loop_oracle(self, rng):
        for _ in range(20):
            g = np.round(rng.random(50), 2)
            i = np.round(rng.random(60), 2)
            assert brute_tpr_fast(g, i, 0.1) == brute_tpr_at_fpr(g, i, 0.1)
            assert brute_accuracy_fast(g, i) == brute_accuracy(g, i)


class TestAccuracy:
    def test_worked_example(self):
        assert metrics.verification_accuracy(ScoreSet([0.2, 0.4], [0.5, 0.3])) == 75.0

    def test_perfect_separation(self):
        assert metrics.verification_accuracy(ScoreSet([0.1, 0.2], [0.3, 0.9])) == 100.0

    def test_same_distribution_is_chance(self, rng):
        acc = metrics.verification_accuracy(ScoreSet(rng.random(10_000), rng.random(10_000)))
        assert 48.0 <= acc <= 52.0

    def test_tie_goes_to_smallest_threshold(self):
        # Thresholds 0.1 and 0.3 both classify 3 of 4 correctly.
        acc, tau = metrics.accuracy_and_threshold(ScoreSet([0.1, 0.3], [0.2, 0.4]))
        assert acc == 75.0 and tau == 0.1

    @given(score_lists, score_lists)
    def test_matches_brute_force(self, gen, imp):
        acc = metrics.verification_accuracy(ScoreSet(gen, imp))
        assert acc == brute_accuracy(gen, imp)
        assert 0.0 <= acc <= 100.0


class TestScoreSet:
    @pytest.mark.parametrize("op", [metrics.verification_accuracy, lambda s: metrics.tpr_at_fpr(s, 0.1)])
    def test_empty_lists_rejected(self, op):
        with pytest.raises(InputError):
            op(ScoreSet([], [1.0]))
        with pytest.raises(InputError):
            op(ScoreSet([1.0], []))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -1.0])
    def test_bad_scores_rejected(self, bad):
        with pytest.raises(InputError):
            ScoreSet([bad], [1.0])


class TestHistogram:
    def test_known_values(self):
        counts = metrics.histogram([0.1, 0.6, 0.7, 1.5, 2.0], 4)
        np.testing.assert_array_equal(counts, [1, 2, 0, 2])

    def test_empty(self):
        np.testing.assert_array_equal(metrics.histogram([], 5), np.zeros(5))

    @given(st.lists(st.floats(0, 2), max_size=200), st.integers(1, 50))
    def test_total_preserved(self, xs, n_bins):
        assert metrics.histogram(xs, n_bins).sum() == len(xs)

    def test_bad_bins(self):
        with pytest.raises(ConfigurationError):
            metrics.histogram([1.0], 0)


class TestRoc:
    def test_endpoints(self, rng):
        pts = metrics.roc_points(ScoreSet(rng.random(30), rng.random(40)))
        assert pts[-1, 1] == 1.0 and pts[-1, 2] == 1.0
        assert np.all(np.diff(pts[:, 0]) > 0)
        assert np.all(np.diff(pts[:, 1]) >= 0) and np.all(np.diff(pts[:, 2]) >= 0)


class TestPairDistances:
    def test_identical_embeddings_give_zero_genuine(self):
        labels = np.repeat(np.arange(5), 3)
        emb = np.repeat(np.eye(5), 3, axis=0)
        s = metrics.pair_distances(emb, labels, 50, 50, seed=0)
        assert np.all(s.genuine == 0)
        np.testing.assert_allclose(s.impostor, np.sqrt(2))

    def test_deterministic(self, rng):
        emb = rng.normal(size=(20, 4))
        labels = np.repeat(np.arange(5), 4)
        a = metrics.pair_distances(emb, labels, 30, 30, seed=7)
        b = metrics.pair_distances(emb, labels, 30, 30, seed=7)
        assert np.array_equal(a.genuine, b.genuine) and np.array_equal(a.impostor, b.impostor)

    def test_three_points(self):
        emb = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]])
        labels = np.array([0, 0, 1])
        s = metrics.pair_distances(emb, labels, 20, 20, seed=1)
        assert set(s.genuine.tolist()) == {5.0}
        assert set(s.impostor.tolist()) <= {10.0, 5.0}

    def test_pairs_respect_labels(self, rng):
        labels = rng.integers(0, 6, size=40)
        emb = labels[:, None].astype(float) * np.ones((1, 2))
        s = metrics.pair_distances(emb, labels, 100, 100, seed=3)
        assert np.all(s.genuine == 0) and np.all(s.impostor > 0)

    def test_no_genuine_pairs_possible(self):
        with pytest.raises(InputError):
            metrics.pair_distances(np.eye(3), np.arange(3), 5, 5, seed=0)
