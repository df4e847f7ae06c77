"""
Unit tests for linear probes on frozen features and their metrics.
"""

import json

import numpy as np
import pytest

from src.config import ExtractorConfig, ProbeConfig
from src.corpus import CatalogRecord
from src.errors import DataError, DegenerateLabels
from src.model import init_model
from src.transfer import (
    LinearProbe,
    ProbeDataset,
    evaluate_probe,
    per_attribute_auc,
    per_class_auc,
    probe_loss_and_gradients,
    roc_auc,
    topk_attribute_recall,
    topk_class_accuracy,
    train_probe,
    write_metrics_report,
)


def identity_probe(n, head):
    """Probe whose scores are the features themselves."""
    return LinearProbe(weights=np.eye(n), bias=np.zeros(n), head=head)


def brute_force_auc(scores, labels):
    positives = [s for s, l in zip(scores, labels) if l]
    negatives = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))


class TestRocAuc:
    def test_known_values(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            scores = rng.integers(0, 5, size=n).astype(float)
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            assert roc_auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    def test_complement(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=50)
        labels = np.r_[np.zeros(25, dtype=int), np.ones(25, dtype=int)]
        auc = roc_auc(scores, labels)
        assert roc_auc(scores, 1 - labels) == pytest.approx(1 - auc)
        assert roc_auc(-scores, labels) == pytest.approx(1 - auc)

    def test_single_class_is_degenerate(self):
        with pytest.raises(DegenerateLabels):
            roc_auc([0.1, 0.2, 0.3], [1, 1, 1])
        with pytest.raises(DegenerateLabels):
            roc_auc([0.1, 0.2], [0, 0])


class TestTopk:
    def test_class_accuracy(self):
        features = np.array([[3.0, 2.0, 1.0], [1.0, 3.0, 2.0], [0.0, 0.0, 0.0]])
        data = ProbeDataset(features, np.array([0, 2, 2]), 3)
        accuracy = topk_class_accuracy(identity_probe(3, "softmax"), data, [3, 1, 2])
        assert accuracy == {1: pytest.approx(1 / 3), 2: pytest.approx(2 / 3), 3: 1.0}

    @pytest.fixture
    def attribute_case(self):
        features = np.array([
            [5.0, 4.0, 3.0, 2.0, 1.0],
            [1.0, 2.0, 3.0, 4.0, 5.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0, 1.0, 1.0],
        ])
        targets = np.array([
            [1, 0, 1, 0, 0],
            [0, 0, 0, 0, 1],
            [0, 0, 0, 1, 0],
            [0, 0, 0, 0, 0],
        ])
        return ProbeDataset(features, targets, 5)

    def test_attribute_recall_skips_empty_samples(self, attribute_case):
        recall = topk_attribute_recall(identity_probe(5, "sigmoid"), attribute_case, [1, 3])
        assert recall == {"all": {1: pytest.approx(0.5), 3: pytest.approx(2 / 3)}}

    def test_attribute_recall_counting_empty_as_zero(self, attribute_case):
        recall = topk_attribute_recall(identity_probe(5, "sigmoid"), attribute_case, [1, 3], count_empty_as_zero=True)
        assert recall["all"] == {1: pytest.approx(0.375), 3: pytest.approx(0.5)}

    def test_attribute_recall_by_group(self, attribute_case):
        groups = {0: "color", 1: "color", 2: "shape", 3: "shape", 4: "shape"}
        recall = topk_attribute_recall(identity_probe(5, "sigmoid"), attribute_case, [1, 3], groups=groups)
        assert set(recall) == {"all", "color", "shape"}
        assert recall["color"] == {1: 1.0, 3: 1.0}
        assert recall["shape"] == {1: pytest.approx(2 / 3), 3: 1.0}

    def test_group_without_ground_truth(self, attribute_case):
        recall = topk_attribute_recall(identity_probe(5, "sigmoid"), attribute_case, [1], groups={1: "unused"})
        assert recall["unused"] == {1: None}

    def test_recall_monotone_in_k(self):
        rng = np.random.default_rng(2)
        data = ProbeDataset(rng.normal(size=(40, 8)), rng.integers(0, 2, size=(40, 8)), 8)
        recall = topk_attribute_recall(identity_probe(8, "sigmoid"), data, range(1, 9))["all"]
        values = [recall[k] for k in range(1, 9)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0

    def test_wrong_target_kind(self, attribute_case):
        with pytest.raises(ValueError):
            topk_class_accuracy(identity_probe(5, "sigmoid"), attribute_case, [1])


@pytest.mark.parametrize("head", ["softmax", "sigmoid"])
def test_probe_gradients_match_central_differences(head):
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(10):
        features = rng.normal(size=(6, 4))
        targets = rng.integers(0, 3, size=6) if head == "softmax" else rng.integers(0, 2, size=(6, 3))
        probe = LinearProbe(rng.normal(size=(4, 3)), rng.normal(size=3), head)
        _, d_weights, d_bias = probe_loss_and_gradients(probe, features, targets)
        for array, analytic in ((probe.weights, d_weights), (probe.bias, d_bias)):
            flat, flat_grad = array.reshape(-1), analytic.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = probe_loss_and_gradients(probe, features, targets)[0]
                flat[i] = original - h
                down = probe_loss_and_gradients(probe, features, targets)[0]
                flat[i] = original
                assert flat_grad[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)


class TestTraining:
    def test_separable_classes(self):
        rng = np.random.default_rng(4)
        targets = np.repeat([0, 1], 50)
        features = np.where(targets[:, None] == 0, -3.0, 3.0) + rng.normal(scale=0.5, size=(100, 2))
        data = ProbeDataset(features, targets, 2)
        probe = train_probe(data, "softmax")
        assert topk_class_accuracy(probe, data, [1]) == {1: 1.0}
        assert per_class_auc(probe, data) == {0: 1.0, 1: 1.0}

    def test_independent_attributes(self):
        rng = np.random.default_rng(5)
        signs = rng.integers(0, 2, size=(200, 2))
        features = np.where(signs == 1, 1.0, -1.0) * (1.0 + rng.random((200, 2)))
        data = ProbeDataset(features, signs, 2)
        probe = train_probe(data, "sigmoid", ProbeConfig(lr=0.5, epochs=100))
        aucs = per_attribute_auc(probe, data)
        assert min(aucs.values()) > 0.95

    def test_training_is_seeded(self):
        rng = np.random.default_rng(6)
        data = ProbeDataset(rng.normal(size=(30, 3)), rng.integers(0, 4, size=30), 4)
        first = train_probe(data, "softmax", ProbeConfig(epochs=5))
        second = train_probe(data, "softmax", ProbeConfig(epochs=5))
        assert np.array_equal(first.weights, second.weights)

    def test_head_must_match_targets(self):
        data = ProbeDataset(np.ones((2, 2)), np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            train_probe(data, "sigmoid")

    def test_class_index_out_of_range(self):
        with pytest.raises(DataError):
            ProbeDataset(np.ones((2, 2)), np.array([0, 2]), 2)


def test_per_class_auc_skips_absent_classes():
    data = ProbeDataset(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([0, 1]), 3)
    assert per_class_auc(identity_probe(3, "softmax"), data) == {0: 1.0, 1: 1.0}


def test_dataset_from_records():
    model = init_model(ExtractorConfig(kind="precomputed", embedding_dim=2), 2, 4, b"\x00" * 32)
    records = [
        CatalogRecord(f"r{i}", "item", "shop", ("robe",), np.array([float(i), 1.0]),
                      {"category": i % 2, "attributes": [i]})
        for i in range(3)
    ]
    classes = ProbeDataset.from_records(model, records)
    assert classes.n_outputs == 2
    assert classes.targets.tolist() == [0, 1, 0]
    attributes = ProbeDataset.from_records(model, records, target="attributes")
    assert attributes.multilabel
    assert attributes.targets.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    assert attributes.record_ids == ["r0", "r1", "r2"]
    with pytest.raises(DataError):
        ProbeDataset.from_records(model, records, target="colour")


def test_report_written_with_string_keys(tmp_path):
    features = np.array([[3.0, 2.0, 1.0], [1.0, 3.0, 2.0], [0.0, 0.0, 5.0]])
    data = ProbeDataset(features, np.array([0, 1, 2]), 3)
    report = evaluate_probe(identity_probe(3, "softmax"), data, [1, 2])
    assert report["topk_accuracy"] == {1: 1.0, 2: 1.0}
    assert report["mean_auc"] == 1.0
    path = tmp_path / "metrics.json"
    write_metrics_report(path, report)
    loaded = json.loads(path.read_text())
    assert loaded["topk_accuracy"] == {"1": 1.0, "2": 1.0}
    assert loaded["per_class_auc"] == {"0": 1.0, "1": 1.0, "2": 1.0}
