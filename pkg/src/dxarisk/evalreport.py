"""Classification metrics, ROC analysis, permutation importance and report files."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cohort import LabeledDataset

TIER_HIGH = 0.5
TIER_MODERATE = 0.1
COMPARISON_COLUMNS = ("model_name", "accuracy_pct", "precision_pct", "recall_pct", "roc_auc_pct", "tuned_auc_pct")
REPORT_FILES = (
    "metrics.json",
    "comparison.csv",
    "roc_points.csv",
    "importance.csv",
    "confusion_matrix.csv",
    "manifest.json",
)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float | None = None
    threshold: float = 0.5
    undefined: tuple[str, ...] = ()


@dataclass
class ImportanceReport:
    feature_names: list[str]
    mean_drop: np.ndarray
    std_drop: np.ndarray
    normalized: np.ndarray
    baseline_auc: float
    tiers: list[str] = field(default_factory=list)
    method: str = "permutation importance over predicted probabilities (AUC drop)"

    def rows(self) -> list[dict]:
        tiers = self.tiers or [""] * len(self.feature_names)
        return [
            {"feature": n, "mean_auc_drop": float(m), "std": float(s), "normalized": float(z), "tier": t}
            for n, m, s, z, t in zip(self.feature_names, self.mean_drop, self.std_drop, self.normalized, tiers)
        ]


def confusion(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape:
        raise MetricError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if not (np.isin(y_true, (0, 1)).all() and np.isin(y_pred, (0, 1)).all()):
        raise MetricError("labels and predictions must be binary")
    return ConfusionMatrix(
        tn=int(((y_true == 0) & (y_pred == 0)).sum()),
        fp=int(((y_true == 0) & (y_pred == 1)).sum()),
        fn=int(((y_true == 1) & (y_pred == 0)).sum()),
        tp=int(((y_true == 1) & (y_pred == 1)).sum()),
    )


def metrics(cm: ConfusionMatrix, roc_auc: float | None = None, threshold: float = 0.5) -> MetricSet:
    """Accuracy/precision/recall/F1; a 0/0 ratio is reported as 0 and named in ``undefined``."""
    if cm.total <= 0:
        raise MetricError("empty confusion matrix")
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    if precision + recall == 0:
        undefined.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricSet((cm.tp + cm.tn) / cm.total, precision, recall, f1, roc_auc, threshold, tuple(undefined))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _check_binary(y_true, scores):
    y = np.asarray(y_true).astype(int)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape:
        raise MetricError("labels and scores differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricError("ROC AUC is undefined with a single class")
    return y, s


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney U / (n_pos n_neg) with mid-ranks for ties."""
    y, s = _check_binary(y_true, scores)
    ranks = _average_ranks(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(y_true, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) at every distinct score, starting at (0, 0)."""
    y, s = _check_binary(y_true, scores)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s_sorted)) if s.size > 1 else np.array([], dtype=int)
    cut = np.concatenate([distinct, [s.size - 1]])
    tps = np.cumsum(y_sorted)[cut]
    fps = (cut + 1) - tps
    tpr = np.concatenate([[0.0], tps / y.sum()])
    fpr = np.concatenate([[0.0], fps / (y.size - y.sum())])
    thr = np.concatenate([[np.inf], s_sorted[cut]])
    return fpr, tpr, thr


def trapezoid_auc(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate_scores(y_true, proba, threshold: float = 0.5) -> tuple[ConfusionMatrix, MetricSet]:
    proba = np.asarray(proba, dtype=float)
    cm = confusion(y_true, (proba >= threshold).astype(int))
    return cm, metrics(cm, roc_auc(y_true, proba), threshold)


# ---------------------------------------------------------------- importance


def permutation_importance(
    model: Callable[[np.ndarray], np.ndarray],
    data: LabeledDataset,
    repeats: int = 10,
    seed: int = 0,
) -> ImportanceReport:
    """AUC drop per feature when its column is shuffled, averaged over ``repeats``.

    ``model`` maps an (n, p) matrix to positive-class probabilities. Output is
    sorted by descending mean drop.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X, y = data.matrix, data.labels
    base = roc_auc(y, model(X))
    rng = np.random.default_rng(seed)
    drops = np.zeros((X.shape[1], repeats))
    for j in range(X.shape[1]):
        for r in range(repeats):
            Xp = X.copy()
            Xp[:, j] = X[rng.permutation(X.shape[0]), j]
            drops[j, r] = base - roc_auc(y, model(Xp))
    mean_drop = drops.mean(axis=1)
    std_drop = drops.std(axis=1)
    top = mean_drop.max()
    normalized = np.clip(mean_drop / top, 0.0, 1.0) if top > 0 else np.zeros_like(mean_drop)
    order = np.argsort(-mean_drop, kind="stable")
    return ImportanceReport(
        [data.feature_names[i] for i in order], mean_drop[order], std_drop[order], normalized[order], base
    )


def tier(report: ImportanceReport, high: float = TIER_HIGH, moderate: float = TIER_MODERATE) -> ImportanceReport:
    report.tiers = ["high" if z >= high else "moderate" if z >= moderate else "least" for z in report.normalized]
    return report


# ---------------------------------------------------------------- persistence


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def comparison_row(name: str, m: MetricSet, tuned_auc: float | None = None) -> dict:
    pct = lambda v: f"{100.0 * v:.1f}"
    return {
        "model_name": name,
        "accuracy_pct": pct(m.accuracy),
        "precision_pct": pct(m.precision),
        "recall_pct": pct(m.recall),
        "roc_auc_pct": "" if m.roc_auc is None else pct(m.roc_auc),
        "tuned_auc_pct": "" if tuned_auc is None else pct(tuned_auc),
    }


@dataclass
class RunOutputs:
    """Everything :func:`write_report` serializes."""

    metrics: dict[str, MetricSet]
    confusions: dict[str, ConfusionMatrix]
    roc_points: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
    comparison: list[dict]
    manifest: dict
    importance: ImportanceReport | None = None


def _round(v):
    if isinstance(v, float):
        return round(v, 12)
    return v


def write_report(outputs: RunOutputs, directory) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {directory}: {exc}") from exc
    written = []

    def path(name):
        p = directory / name
        written.append(p)
        return p

    metrics_doc = {
        name: {k: _round(v) if not isinstance(v, tuple) else list(v) for k, v in asdict(m).items()}
        for name, m in outputs.metrics.items()
    }
    path("metrics.json").write_text(json.dumps(metrics_doc, indent=2, sort_keys=True) + "\n")

    with open(path("comparison.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(outputs.comparison)

    with open(path("roc_points.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_name", "fpr", "tpr", "threshold"])
        for name, (fpr, tpr, thr) in outputs.roc_points.items():
            for a, b, c in zip(fpr, tpr, thr):
                w.writerow([name, repr(float(a)), repr(float(b)), repr(float(c))])

    with open(path("confusion_matrix.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_name", "tn", "fp", "fn", "tp"])
        for name, cm in outputs.confusions.items():
            w.writerow([name, cm.tn, cm.fp, cm.fn, cm.tp])

    if outputs.importance is not None:
        with open(path("importance.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["feature", "mean_auc_drop", "std", "normalized", "tier"], lineterminator="\n")
            w.writeheader()
            for row in outputs.importance.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    path("manifest.json").write_text(json.dumps(outputs.manifest, indent=2, sort_keys=True) + "\n")
    return written
