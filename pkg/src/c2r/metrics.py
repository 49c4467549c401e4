"""Accuracy, binary AUC, rationale Precision@k and multi-seed aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise MetricError("accuracy of empty input")
    return float(np.mean(preds == labels))


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PrecisionReport:
    precision: float
    n_graphs: int
    n_skipped: int


def precision_at_k(node_scores: Sequence[np.ndarray], rationale_masks: Sequence[np.ndarray | None],
                   k: int = 5) -> PrecisionReport:
    """Mean per-graph fraction of the ``k`` top-scoring nodes that are rationale.

    Ties go to the lower node index.  Graphs with fewer than ``k`` nodes are
    skipped and counted in ``n_skipped``.
    """
    values, skipped = [], 0
    for scores, mask in zip(node_scores, rationale_masks):
        if mask is None:
            raise MetricError("precision_at_k needs a ground-truth rationale mask")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size < k:
            skipped += 1
            continue
        top = np.lexsort((np.arange(scores.size), -scores))[:k]
        values.append(float(np.asarray(mask, dtype=bool)[top].sum()) / k)
    prec = float(np.mean(values)) if values else float("nan")
    return PrecisionReport(prec, len(values), skipped)


def random_precision_baseline(rationale_masks: Sequence[np.ndarray], k: int = 5) -> float:
    """Expected Precision@k under uniformly random scores: mean motif fraction."""
    fr = [float(np.mean(m)) for m in rationale_masks if len(m) >= k]
    return float(np.mean(fr))


def env_agreement(assignments, env_hint) -> float:
    """Fraction of samples whose cluster maps to their base type under the
    best one-to-one cluster/type matching."""
    a = np.asarray(assignments)
    b = np.asarray(env_hint)
    keep = b >= 0
    a, b = a[keep], b[keep]
    if a.size == 0:
        return float("nan")
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    r, c = linear_sum_assignment(-table)
    return float(table[r, c].sum() / a.size)


@dataclass
class EvalReport:
    acc: float
    n_samples: int
    seed: int | None = None
    auc: float | None = None
    precision_at_k: float | None = None
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {"acc": self.acc}
        if self.auc is not None:
            out["auc"] = self.auc
        if self.precision_at_k is not None:
            out["precision_at_k"] = self.precision_at_k
        out.update(self.extra)
        return out

    def to_json(self) -> dict:
        return {"n_samples": self.n_samples, "seed": self.seed, **self.metrics()}


def aggregate(reports: Sequence[EvalReport | Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """Per-metric mean and population std across seeds."""
    if not reports:
        raise MetricError("aggregate needs at least one report")
    rows = [r.metrics() if isinstance(r, EvalReport) else dict(r) for r in reports]
    keys = set(rows[0])
    if any(set(r) != keys for r in rows):
        raise MetricError("reports carry different metric sets")
    out = {}
    for key in sorted(keys):
        vals = np.sort(np.array([r[key] for r in rows], dtype=np.float64))
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals)}
    return out
