"""
Linear-probe evaluation of frozen visual features: multi-class categories
(softmax head) and multi-label attributes (sigmoid head), with top-k accuracy,
top-k recall and ROC-AUC metrics.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import rankdata

from src.config import ProbeConfig
from src.errors import DataError, DegenerateLabels, DimensionMismatch, NonFiniteLoss
from src.model import EmbeddingModel, extract

logger = logging.getLogger(__name__)

Head = Literal["softmax", "sigmoid"]
POOLED_GROUP = "all"


@dataclass
class ProbeDataset:
    """Frozen features with class indices (N,) or a binary attribute matrix (N, A)."""

    features: np.ndarray
    targets: np.ndarray
    n_outputs: int
    record_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or n < 1:
            raise DimensionMismatch("probe features must be a non-empty N x I matrix")
        if self.targets.shape[0] != n:
            raise DimensionMismatch(f"{n} feature rows but {self.targets.shape[0]} targets")
        if self.multilabel:
            if self.targets.shape[1] != self.n_outputs or not np.isin(self.targets, (0, 1)).all():
                raise DataError(f"attribute targets must be a binary N x {self.n_outputs} matrix")
        elif self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.n_outputs):
            raise DataError(f"class indices must lie in 0..{self.n_outputs - 1}")

    @property
    def multilabel(self) -> bool:
        return self.targets.ndim == 2

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_records(
        cls,
        model: EmbeddingModel,
        records: Sequence,
        target: Literal["category", "attributes"] = "category",
        n_outputs: Optional[int] = None,
    ) -> "ProbeDataset":
        """Embed catalog records and read targets from their annotations."""
        features, labels = [], []
        for record in records:
            if target not in record.annotations:
                raise DataError(f"record {record.record_id} has no '{target}' annotation")
            features.append(extract(model, record.image_input))
            labels.append(record.annotations[target])

        if target == "category":
            targets = np.asarray(labels, dtype=np.int64)
            n_outputs = n_outputs or int(targets.max()) + 1
        else:
            n_outputs = n_outputs or max((max(a) for a in labels if a), default=-1) + 1
            targets = np.zeros((len(labels), n_outputs), dtype=np.int64)
            for row, attributes in enumerate(labels):
                targets[row, list(attributes)] = 1
        return cls(np.vstack(features), targets, n_outputs, [r.record_id for r in records])


@dataclass
class LinearProbe:
    weights: np.ndarray  # I x C
    bias: np.ndarray
    head: Head

    def scores(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def predict_classes(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=1)


def _check_head(data: ProbeDataset, head: str) -> None:
    if head not in ("softmax", "sigmoid"):
        raise ValueError(f"Unknown probe head: {head}")
    if (head == "sigmoid") != data.multilabel:
        raise ValueError(f"{head} head does not match {'multi-label' if data.multilabel else 'class'} targets")


def probe_loss_and_gradients(
    probe: LinearProbe, features: np.ndarray, targets: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy (softmax) or mean per-attribute BCE (sigmoid) and its gradients."""
    logits = probe.scores(features)
    n = features.shape[0]
    if probe.head == "softmax":
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        rows = np.arange(n)
        loss = -float(np.mean(log_probs[rows, targets]))
        delta = np.exp(log_probs)
        delta[rows, targets] -= 1.0
        delta /= n
    else:
        loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
        delta = (expit(logits) - targets) / targets.size
    return loss, features.T @ delta, delta.sum(axis=0)


def train_probe(data: ProbeDataset, head: Head, config: Optional[ProbeConfig] = None) -> LinearProbe:
    """Fit a linear probe by mini-batch SGD on shuffled batches (seeded)."""
    config = config or ProbeConfig()
    _check_head(data, head)
    rng = np.random.default_rng(config.seed)
    probe = LinearProbe(
        weights=np.zeros((data.features.shape[1], data.n_outputs)),
        bias=np.zeros(data.n_outputs),
        head=head,
    )

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, d_weights, d_bias = probe_loss_and_gradients(probe, data.features[batch], data.targets[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"probe loss became non-finite at epoch {epoch}", {"epoch": epoch})
            probe.weights -= config.lr * d_weights
            probe.bias -= config.lr * d_bias
            epoch_loss += loss * len(batch)
        if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
            logger.info(f"Probe epoch {epoch}/{config.epochs}: loss {epoch_loss / len(data):.6f}")
    return probe


def topk_class_accuracy(probe: LinearProbe, data: ProbeDataset, ks: Sequence[int]) -> Dict[int, float]:
    """Share of samples whose class is among the k best scores (ties: lower class index first)."""
    if data.multilabel:
        raise ValueError("top-k class accuracy needs class targets")
    order = np.argsort(-probe.scores(data.features), axis=1, kind="stable")
    ranks = np.argmax(order == data.targets[:, None], axis=1)
    return {k: float(np.mean(ranks < k)) for k in sorted(set(ks))}


def topk_attribute_recall(
    probe: LinearProbe,
    data: ProbeDataset,
    ks: Sequence[int],
    groups: Optional[Mapping[int, str]] = None,
    count_empty_as_zero: bool = False,
) -> Dict[str, Dict[int, Optional[float]]]:
    """Mean recall of ground-truth attributes among the k best-scored ones.

    Always reports the pooled group "all"; with `groups` (attribute -> group
    name) each group is ranked separately. Samples without ground truth in a
    group are skipped unless count_empty_as_zero.
    """
    if not data.multilabel:
        raise ValueError("top-k attribute recall needs attribute targets")
    ks = sorted(set(ks))
    scores = probe.scores(data.features)
    members: Dict[str, np.ndarray] = {POOLED_GROUP: np.arange(data.n_outputs)}
    for name in sorted(set((groups or {}).values())):
        members[name] = np.asarray(sorted(a for a, g in groups.items() if g == name), dtype=np.int64)

    report: Dict[str, Dict[int, Optional[float]]] = {}
    for name, attributes in members.items():
        group_scores = scores[:, attributes]
        truth = data.targets[:, attributes]
        order = np.argsort(-group_scores, axis=1, kind="stable")
        n_truth = truth.sum(axis=1)
        counted = n_truth > 0 if not count_empty_as_zero else np.ones(len(data), dtype=bool)
        report[name] = {}
        for k in ks:
            found = np.take_along_axis(truth, order[:, :k], axis=1).sum(axis=1)
            recall = np.divide(found, n_truth, out=np.zeros(len(data)), where=n_truth > 0)
            report[name][k] = float(np.mean(recall[counted])) if counted.any() else None
        if not counted.any():
            logger.warning(f"Attribute group '{name}' has no samples with ground truth")
    return report


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC from average ranks: ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUC needs both classes (got {n_pos} positive, {n_neg} negative)")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _column_aucs(scores: np.ndarray, truth: np.ndarray) -> Dict[int, float]:
    aucs = {}
    for column in range(truth.shape[1]):
        positives = int(truth[:, column].sum())
        if 0 < positives < truth.shape[0]:
            aucs[column] = roc_auc(scores[:, column], truth[:, column])
    return aucs


def per_class_auc(probe: LinearProbe, data: ProbeDataset) -> Dict[int, float]:
    """One-vs-rest AUC on the class scores, for classes with positives and negatives."""
    one_hot = np.zeros((len(data), data.n_outputs), dtype=np.int64)
    one_hot[np.arange(len(data)), data.targets] = 1
    return _column_aucs(probe.scores(data.features), one_hot)


def per_attribute_auc(probe: LinearProbe, data: ProbeDataset) -> Dict[int, float]:
    return _column_aucs(probe.scores(data.features), data.targets)


def evaluate_probe(
    probe: LinearProbe,
    data: ProbeDataset,
    ks: Sequence[int],
    groups: Optional[Mapping[int, str]] = None,
    count_empty_as_zero: bool = False,
) -> Dict[str, Any]:
    """All metrics for a trained probe in one report dict."""
    report: Dict[str, Any] = {"head": probe.head, "samples": len(data), "outputs": data.n_outputs}
    if data.multilabel:
        report["topk_recall"] = topk_attribute_recall(probe, data, ks, groups, count_empty_as_zero)
        aucs = per_attribute_auc(probe, data)
        report["per_attribute_auc"] = aucs
    else:
        report["topk_accuracy"] = topk_class_accuracy(probe, data, ks)
        aucs = per_class_auc(probe, data)
        report["per_class_auc"] = aucs
    report["mean_auc"] = float(np.mean(list(aucs.values()))) if aucs else None
    return report


def write_metrics_report(path: Union[str, Path], report: Mapping[str, Any]) -> None:
    """Write a metrics report as sorted, indented JSON."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_stringify_keys(report), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Metrics report written to {path}")


def _stringify_keys(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _stringify_keys(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_stringify_keys(v) for v in value]
    return value
