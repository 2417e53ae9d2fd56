"""Per-class precision/recall/F1 and the support-weighted F1 aggregate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    n_samples: int

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float
    n_samples: int
    degenerate: bool = False  # every class had zero support
    label_names: list[str] | None = field(default=None)

    def to_text(self) -> str:
        lines = [f"samples: {self.n_samples}",
                 f"weighted_f1: {self.weighted_f1:.6f}"]
        if self.degenerate:
            lines.append("degenerate: true (no positive support in any class)")
        names = self.label_names or [f"class_{i}" for i in range(len(self.f1))]
        lines.append(f"{'label':34s} {'prec':>7s} {'rec':>7s} {'f1':>7s} {'support':>8s}")
        for i, name in enumerate(names):
            lines.append(f"{name:34s} {self.precision[i]:7.4f} {self.recall[i]:7.4f} "
                         f"{self.f1[i]:7.4f} {int(self.support[i]):8d}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "n_samples": self.n_samples,
            "weighted_f1": self.weighted_f1,
            "degenerate": self.degenerate,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "support": self.support.tolist(),
            "label_names": self.label_names,
        }, sort_keys=True)


def _check_binary_pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    t = np.asarray(targets)
    if p.shape != t.shape or p.ndim != 2:
        raise ContractError(f"preds {p.shape} and targets {t.shape} must be equal 2-D shapes")
    for name, a in (("preds", p), ("targets", t)):
        if not np.all((a == 0) | (a == 1)):
            raise ContractError(f"{name} must be binary")
    return p.astype(np.int64), t.astype(np.int64)


def confusion(preds, targets) -> ConfusionCounts:
    p, t = _check_binary_pair(preds, targets)
    tp = ((p == 1) & (t == 1)).sum(axis=0)
    fp = ((p == 1) & (t == 0)).sum(axis=0)
    fn = ((p == 0) & (t == 1)).sum(axis=0)
    tn = ((p == 0) & (t == 0)).sum(axis=0)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn, n_samples=p.shape[0])


def weighted_f1(counts: ConfusionCounts, label_names=None) -> MetricsReport:
    """Support-weighted F1; zero-denominator classes score 0 (not skipped)."""
    if counts.n_samples < 1:
        raise ContractError("need at least one sample")
    tp, fp, fn = (a.astype(np.float64) for a in (counts.tp, counts.fp, counts.fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        denom = 2 * tp + fp + fn
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    support = counts.support
    total = float(support.sum())
    degenerate = total == 0.0
    wf1 = 0.0 if degenerate else float((f1 * support).sum() / total)
    return MetricsReport(precision=precision, recall=recall, f1=f1,
                         support=support, weighted_f1=wf1,
                         n_samples=counts.n_samples, degenerate=degenerate,
                         label_names=list(label_names) if label_names else None)


def threshold(probabilities, t: float = 0.5) -> np.ndarray:
    """Entry is 1 iff p >= t."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"threshold must be in [0,1], got {t}")
    p = np.asarray(probabilities)
    if np.any(p < 0) or np.any(p > 1):
        raise ContractError("probabilities must lie in [0,1]")
    return (p >= t).astype(np.int8)


def evaluate_logits(logits: np.ndarray, targets: np.ndarray, t: float = 0.5,
                    label_names=None) -> MetricsReport:
    """Sigmoid, threshold, count, aggregate."""
    probs = 1.0 / (1.0 + np.exp(-np.clip(logits, -50, 50)))
    preds = threshold(probs, t)
    return weighted_f1(confusion(preds, np.asarray(targets).astype(np.int8)),
                       label_names=label_names)
