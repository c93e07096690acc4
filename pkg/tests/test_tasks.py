"""Tests for task heads and metrics."""

import numpy as np
import pytest

from tangnn import autodiff as ad
from tangnn import tasks as tk
from tangnn.errors import InputError


def brute_force_auroc(scores, positives):
    """Pair-counting oracle: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    pos = scores[positives]
    neg = scores[~positives]
    wins = ties = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return (wins + 0.5 * ties) / (pos.size * neg.size)


class TestNodeClassify:
    def _head(self, d=4, c=3, seed=0):
        return tk.init_head("node", d, c, np.random.default_rng(seed))

    def test_zero_weights_give_uniform(self):
        head = self._head()
        head.w.values[:] = 0.0
        out = tk.node_classify(ad.constant(np.random.default_rng(1).normal(size=(5, 4))), head)
        np.testing.assert_allclose(out.values, 1.0 / 3.0)

    def test_rows_sum_to_one(self):
        head = self._head()
        rng = np.random.default_rng(2)
        out = tk.node_classify(ad.constant(rng.normal(size=(7, 4))), head)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-9)


class TestLinkScore:
    def test_orthogonal_embeddings_score_half(self):
        assert tk.link_score([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.5)

    def test_equal_embeddings_norm_two(self):
        g = np.array([2.0, 0.0])  # |g|^2 = 4
        assert tk.link_score(g, g) == pytest.approx(1 / (1 + np.exp(-4.0)), abs=1e-6)
        assert tk.link_score(g, g) == pytest.approx(0.982, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        u, v = rng.normal(size=4), rng.normal(size=4)
        assert tk.link_score(u, v) == tk.link_score(v, u)

    def test_negated_embedding_flips_probability(self):
        rng = np.random.default_rng(4)
        u, v = rng.normal(size=5), rng.normal(size=5)
        assert tk.link_score(u, v) + tk.link_score(-u, v) == pytest.approx(1.0)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(6, 3))
        v = rng.normal(size=(6, 3))
        batched = tk.link_scores(ad.constant(u), ad.constant(v)).values[:, 0]
        for i in range(6):
            assert batched[i] == pytest.approx(tk.link_score(u[i], v[i]), abs=1e-12)


class TestEdgeSentiment:
    def _head(self, d=4, seed=0):
        return tk.init_head("sentiment", d, 3, np.random.default_rng(seed))

    def test_zero_head_uniform(self):
        head = self._head()
        for t in (head.mlp.w1, head.mlp.b1, head.mlp.w2, head.mlp.b2):
            t.values[:] = 0.0
        rng = np.random.default_rng(6)
        out = tk.edge_sentiment(ad.constant(rng.normal(size=(4, 4))),
                                ad.constant(rng.normal(size=(4, 4))), head)
        np.testing.assert_allclose(out.values, 1.0 / 3.0)

    def test_rows_sum_to_one(self):
        head = self._head()
        rng = np.random.default_rng(7)
        out = tk.edge_sentiment(ad.constant(rng.normal(size=(5, 4))),
                                ad.constant(rng.normal(size=(5, 4))), head)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-9)

    def test_direction_matters(self):
        head = self._head(seed=8)
        rng = np.random.default_rng(8)
        u = ad.constant(rng.normal(size=(1, 4)))
        v = ad.constant(rng.normal(size=(1, 4)))
        fwd = tk.edge_sentiment(u, v, head).values
        rev = tk.edge_sentiment(v, u, head).values
        assert np.abs(fwd - rev).max() > 1e-6


class TestGraphRegress:
    def test_identical_embeddings_pool_to_themselves(self):
        head = tk.init_head("regression", 3, 1, np.random.default_rng(9))
        row = np.array([[0.5, -1.0, 2.0]])
        out = tk.graph_regress(ad.constant(np.tile(row, (6, 1))), head)
        expected = row @ head.w.values + head.b.values
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_single_node_graph(self):
        head = tk.init_head("regression", 3, 1, np.random.default_rng(10))
        row = np.array([[1.0, 2.0, 3.0]])
        out = tk.graph_regress(ad.constant(row), head)
        np.testing.assert_allclose(out.values, row @ head.w.values + head.b.values)

    def test_empty_graph_rejected(self):
        head = tk.init_head("regression", 3, 1, np.random.default_rng(11))
        with pytest.raises(InputError):
            tk.graph_regress(ad.constant(np.zeros((0, 3))), head)


class TestMetrics:
    def test_perfect_binary_ranking(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        positives = np.array([True, True, False, False])
        assert tk.binary_auroc(scores, positives) == 1.0

    def test_exact_predictions(self):
        labels = np.array([0, 1, 2, 1])
        assert tk.accuracy(labels, labels) == 1.0
        assert tk.f1_micro(labels, labels) == 1.0

    def test_constant_scores_give_half(self):
        scores = np.zeros(10)
        positives = np.arange(10) < 4
        assert tk.binary_auroc(scores, positives) == pytest.approx(0.5)

    def test_f1_micro_equals_accuracy_multiclass(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            n = int(rng.integers(3, 50))
            preds = rng.integers(0, 4, size=n)
            labels = rng.integers(0, 4, size=n)
            assert tk.f1_micro(preds, labels) == pytest.approx(tk.accuracy(preds, labels))

    def test_auroc_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            scores = np.round(rng.normal(size=n), 1)  # rounded to force ties
            positives = rng.random(n) < 0.4
            if positives.all() or not positives.any():
                continue
            assert tk.binary_auroc(scores, positives) == pytest.approx(
                brute_force_auroc(scores, positives), abs=1e-12)

    def test_auroc_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(14)
        scores = rng.normal(size=30)
        positives = rng.random(30) < 0.5
        base = tk.binary_auroc(scores, positives)
        assert tk.binary_auroc(np.exp(2 * scores) + 3, positives) == pytest.approx(base)

    def test_auroc_ovr_excludes_absent_class_with_warning(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.4, 0.3]])
        labels = np.array([0, 1, 0])  # class 2 absent
        with pytest.warns(UserWarning):
            value = tk.auroc_ovr(probs, labels)
        assert 0.0 <= value <= 1.0

    def test_mae_basic_and_triangle(self):
        rng = np.random.default_rng(15)
        a, b, c = rng.normal(size=(3, 20))
        assert tk.mae(a, a) == 0.0
        assert tk.mae(a, c) <= tk.mae(a, b) + tk.mae(b, c) + 1e-12

    def test_length_mismatch_rejected(self):
        with pytest.raises(InputError):
            tk.accuracy(np.array([1, 2]), np.array([1]))
        with pytest.raises(InputError):
            tk.mae(np.array([1.0]), np.array([1.0, 2.0]))
