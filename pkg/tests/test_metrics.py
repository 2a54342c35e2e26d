import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chbc.errors import ParameterError
from chbc.hierarchy import random_hierarchy
from chbc.metrics import (
    EvalReport,
    evaluate_scores,
    path_is_consistent,
    superclass_histogram,
    tcr,
    topk_accuracy,
    topk_wa_acc,
    wa_acc,
)


def brute_tcr(preds, truth, th):
    """A row counts when its predicted path is literally one of the tree's root-to-leaf paths."""
    paths = {tuple(int(v) for v in p) for p in th.ancestors_of_leaves()}
    hits = [tuple(int(v) for v in row) in paths and row[-1] == t for row, t in zip(preds, truth)]
    return sum(hits) / len(hits)


class TestWeightedAccuracy:
    @pytest.mark.parametrize("accs,sizes,expected", [
        ([99.1, 95.7, 92.0, 87.8], [13, 37, 122, 200], 90.4),
        ([98.0, 96.5, 93.6], [30, 70, 100], 95.3),
        ([97.8, 95.3], [9, 196], 95.4),
    ])
    def test_reference_values(self, accs, sizes, expected):
        assert wa_acc(accs, sizes) == pytest.approx(expected, abs=0.05)

    def test_hand_computation(self):
        assert wa_acc([1.0, 0.5], [1, 3]) == pytest.approx(0.625)

    def test_equal_accuracies(self):
        assert wa_acc([0.7, 0.7, 0.7], [2, 9, 40]) == pytest.approx(0.7)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            wa_acc([0.1, 0.2], [3])


class TestTcr:
    def test_consistent_and_correct(self, tiny_tree):
        preds = np.array([[0, 1], [1, 2], [1, 0]])
        assert tcr(preds, np.array([1, 2, 0]), tiny_tree) == pytest.approx(2 / 3)

    def test_random_sets_match_brute_force(self, rng):
        th = random_hierarchy(rng, [2, 4, 7, 10])
        for _ in range(50):
            n = int(rng.integers(1, 20))
            preds = np.stack([rng.integers(0, s, n) for s in th.level_sizes], axis=1)
            leaf_paths = th.ancestors_of_leaves()
            # mix in some fully consistent rows so hits actually occur
            keep = rng.random(n) < 0.5
            preds[keep] = leaf_paths[preds[keep, -1]]
            truth = np.where(rng.random(n) < 0.7, preds[:, -1], rng.integers(0, 10, n))
            got = tcr(preds, truth, th)
            assert got == brute_tcr(preds, truth, th)
            assert got <= np.mean(preds[:, -1] == truth)

    def test_path_consistency_flags(self, three_level_tree):
        preds = np.array([[0, 1, 2], [1, 2, 5], [0, 2, 5]])
        assert path_is_consistent(preds, three_level_tree).tolist() == [True, True, False]

    def test_out_of_range_prediction(self, tiny_tree):
        with pytest.raises(ParameterError):
            tcr(np.array([[0, 3]]), np.array([0]), tiny_tree)


class TestTopK:
    def test_enumeration_oracle(self, rng):
        scores = rng.standard_normal((30, 6))
        truth = rng.integers(0, 6, 30)
        for k in range(1, 6):
            expected = np.mean([truth[n] in sorted(range(6), key=lambda c: -scores[n, c])[:k] for n in range(30)])
            assert topk_accuracy(scores, truth, k) == pytest.approx(expected)

    def test_ties_prefer_lower_index(self):
        scores = np.array([[0.5, 0.5, 0.0]])
        assert topk_accuracy(scores, np.array([0]), 1) == 1.0
        assert topk_accuracy(scores, np.array([1]), 1) == 0.0

    def test_k_at_least_classes(self):
        assert topk_accuracy(np.zeros((3, 4)), np.array([0, 1, 3]), 4) == 1.0

    def test_top1_equals_argmax_accuracy(self, rng):
        scores = rng.standard_normal((40, 5))
        truth = rng.integers(0, 5, 40)
        assert topk_accuracy(scores, truth, 1) == np.mean(scores.argmax(1) == truth)

    def test_bad_k(self):
        with pytest.raises(ParameterError):
            topk_accuracy(np.zeros((1, 3)), np.array([0]), 0)

    def test_weighted_version(self, rng):
        scores = [rng.standard_normal((10, 2)), rng.standard_normal((10, 7))]
        truth = np.stack([rng.integers(0, 2, 10), rng.integers(0, 7, 10)], axis=1)
        expected = (2 * 1.0 + 7 * topk_accuracy(scores[1], truth[:, 1], 3)) / 9
        assert topk_wa_acc(scores, truth, [2, 7], 3) == pytest.approx(expected)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 8))
    def test_monotone_in_k(self, seed, c):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((15, c))
        truth = rng.integers(0, c, 15)
        accs = [topk_accuracy(scores, truth, k) for k in range(1, c + 1)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))
        assert accs[-1] == 1.0


class TestHistogram:
    def test_oracle_via_ancestor(self, rng):
        th = random_hierarchy(rng, [3, 6, 12])
        preds, truths = rng.integers(0, 12, 60), rng.integers(0, 12, 60)
        same = diff = 0
        for p, t in zip(preds, truths):
            if p == t:
                continue
            if th.ancestor(int(p), 3, 2) == th.ancestor(int(t), 3, 2):
                same += 1
            else:
                diff += 1
        assert superclass_histogram(preds, truths, th) == (same, diff)

    def test_sibling_error(self, tiny_tree):
        assert superclass_histogram(np.array([1]), np.array([0]), tiny_tree) == (1, 0)
        assert superclass_histogram(np.array([2]), np.array([0]), tiny_tree) == (0, 1)
        assert superclass_histogram(np.array([2]), np.array([2]), tiny_tree) == (0, 0)


class TestReport:
    def test_evaluate_scores(self, three_level_tree):
        labels = np.array([[0, 0, 0], [1, 2, 5]])
        scores = [np.eye(2)[[0, 1]], np.eye(3)[[0, 1]], np.eye(6)[[0, 4]]]
        report = evaluate_scores(scores, labels, three_level_tree)
        assert report.level_accuracy == [1.0, 0.5, 0.5]
        assert report.tcr == 0.5
        assert report.wa_acc == pytest.approx((2 * 1.0 + 3 * 0.5 + 6 * 0.5) / 11)
        assert (report.same_superclass_errors, report.different_superclass_errors) == (1, 0)
        assert report.num_samples == 2

    def test_json_round_trip(self, three_level_tree, rng):
        scores = [rng.random((8, n)) for n in (2, 3, 6)]
        labels = three_level_tree.ancestors_of_leaves()[rng.integers(0, 6, 8)]
        report = evaluate_scores(scores, labels, three_level_tree)
        back = EvalReport.from_dict(json.loads(report.to_json()))
        assert back == report

    def test_table_lists_every_level(self, three_level_tree, rng):
        scores = [rng.random((4, n)) for n in (2, 3, 6)]
        labels = three_level_tree.ancestors_of_leaves()[[0, 1, 2, 3]]
        table = evaluate_scores(scores, labels, three_level_tree).format_table()
        assert "wa_acc" in table and "TCR" in table.upper()
        assert all(f"{i}" in table for i in range(1, 4))


def test_all_paths_enumerated_once(three_level_tree):
    paths = [tuple(p) for p in three_level_tree.ancestors_of_leaves()]
    every = list(itertools.product(*[range(s) for s in three_level_tree.level_sizes]))
    valid = [p for p in every if path_is_consistent(np.array([p]), three_level_tree)[0]]
    assert sorted(paths) == sorted(valid)
