"""Feature scoring and selection, plus PCA / t-SNE projections for plotting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import LabeledDataset

BANDS = ("very_strong", "strong", "moderate", "weak", "negligible")
MI_BINS = 10


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureScore:
    feature_name: str
    pearson_r: float
    mi: float
    importance: float
    band: str
    degenerate: bool = False


@dataclass
class SelectionResult:
    selected: list[str]
    scores: dict[str, FeatureScore]
    alpha: float
    r_min: float
    collinearity_cap: float
    dropped_collinear: list[tuple[str, str, float]] = field(default_factory=list)
    criteria: dict[str, list[str]] = field(default_factory=dict)

    def write_scores_csv(self, path) -> None:
        chosen = set(self.selected)
        order = sorted(self.scores.values(), key=lambda s: (-s.importance, s.feature_name))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "r", "band", "mi", "score", "selected"])
            for s in order:
                w.writerow([s.feature_name, repr(s.pearson_r), s.band, repr(s.mi), repr(s.importance), int(s.feature_name in chosen)])


@dataclass
class Projection:
    method: str
    coordinates: np.ndarray
    explained_variance: np.ndarray | None = None
    loadings: np.ndarray | None = None
    mean: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)
    kl_history: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.coordinates.shape[1]

    def transform(self, data: np.ndarray) -> np.ndarray:
        if self.method != "pca":
            raise SelectionError("only PCA projections can embed new points")
        return (np.asarray(data, dtype=float) - self.mean) @ self.loadings


# ---------------------------------------------------------------- scores


def pearson(x, y) -> float:
    """Pearson r; 0.0 when either input is constant (see :func:`is_degenerate`)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise SelectionError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise SelectionError("pearson needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def is_degenerate(x, y) -> bool:
    return bool(np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0)


def interpret_correlation(r: float) -> str:
    a = abs(r)
    if a >= 0.8:
        return "very_strong"
    if a >= 0.6:
        return "strong"
    if a >= 0.4:
        return "moderate"
    if a >= 0.2:
        return "weak"
    return "negligible"


def _equal_width_bins(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.size, dtype=int)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(int)
    return np.clip(idx, 0, bins - 1)


def mutual_information(x, y, bins: int = MI_BINS) -> float:
    """Plug-in MI in bits between equal-width-binned ``x`` and discrete ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if x.size < 2 or bins < 2:
        raise SelectionError("mutual_information needs n >= 2 and bins >= 2")
    bx = _equal_width_bins(x, bins)
    _, by = np.unique(y, return_inverse=True)
    joint = np.zeros((bins, by.max() + 1))
    np.add.at(joint, (bx, by), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def _minmax(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    if span == 0:
        return np.zeros_like(v)
    return (v - v.min()) / span


def score_features(data: LabeledDataset, bins: int = MI_BINS) -> dict[str, FeatureScore]:
    """Pearson r, MI and the combined score (mean of min-max normalized |r| and MI)."""
    y = data.labels.astype(float)
    rs = np.array([pearson(data.matrix[:, j], y) for j in range(data.matrix.shape[1])])
    mis = np.array([mutual_information(data.matrix[:, j], data.labels, bins) for j in range(data.matrix.shape[1])])
    combined = 0.5 * (_minmax(np.abs(rs)) + _minmax(mis))
    out = {}
    for j, name in enumerate(data.feature_names):
        out[name] = FeatureScore(
            feature_name=name,
            pearson_r=float(rs[j]),
            mi=float(mis[j]),
            importance=float(combined[j]),
            band=interpret_correlation(rs[j]),
            degenerate=is_degenerate(data.matrix[:, j], y),
        )
    return out


def ensemble_select(
    data: LabeledDataset,
    alpha: float = 0.25,
    r_min: float = 0.12,
    collinearity_cap: float = 0.85,
    bins: int = MI_BINS,
) -> SelectionResult:
    """Union of the |r| threshold, MI percentile and combined-score percentile
    criteria, then greedy pruning of collinear candidates by descending score."""
    if not 0 < alpha <= 1:
        raise SelectionError("alpha must be in (0, 1]")
    scores = score_features(data, bins)
    names = list(data.feature_names)
    mis = np.array([scores[n].mi for n in names])
    comb = np.array([scores[n].importance for n in names])
    q = 100.0 * (1.0 - alpha)
    mi_cut = np.percentile(mis, q)
    comb_cut = np.percentile(comb, q)
    by_r = [n for n in names if abs(scores[n].pearson_r) >= r_min and not scores[n].degenerate]
    by_mi = [n for n, m in zip(names, mis) if m >= mi_cut and m > 0]
    by_score = [n for n, c in zip(names, comb) if c >= comb_cut and c > 0]
    candidates = set(by_r) | set(by_mi) | set(by_score)
    if not candidates:
        raise SelectionError("no feature passed any criterion; relax r_min or raise alpha")
    ranked = sorted(candidates, key=lambda n: (-scores[n].importance, names.index(n)))
    kept: list[str] = []
    dropped = []
    cols = {n: data.matrix[:, names.index(n)] for n in ranked}
    for n in ranked:
        clash = None
        for k in kept:
            r = pearson(cols[n], cols[k])
            if abs(r) > collinearity_cap:
                clash = (n, k, r)
                break
        if clash:
            dropped.append(clash)
        else:
            kept.append(n)
    return SelectionResult(
        selected=kept,
        scores=scores,
        alpha=alpha,
        r_min=r_min,
        collinearity_cap=collinearity_cap,
        dropped_collinear=dropped,
        criteria={"pearson": by_r, "mutual_information": by_mi, "combined_score": by_score},
    )


# ---------------------------------------------------------------- projections


def pca(data, variance_target: float = 0.95, n_components: int | None = None) -> Projection:
    """PCA via SVD of the centered matrix.

    Keeps the smallest k reaching ``variance_target`` unless ``n_components``
    is given. Each component is signed so its largest-magnitude loading is
    positive.
    """
    X = np.asarray(data, dtype=float)
    if X.shape[0] < 2:
        raise SelectionError("pca needs at least 2 samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    if n_components is None:
        cum = np.cumsum(ratio)
        k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
        k = min(max(k, 1), len(ratio))
    else:
        k = min(n_components, len(ratio))
    comps = vt[:k].copy()
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    loadings = comps.T
    return Projection("pca", Xc @ loadings, explained_variance=ratio[:k], loadings=loadings, mean=mean)


def _binary_search_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    n = d2.shape[0]
    P = np.zeros((n, n))
    target = math.log(perplexity)
    for i in range(n):
        di = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            e = np.exp(-(di - di.min()) * beta)
            s = e.sum()
            h = math.log(s) + beta * float((di - di.min()) @ e) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = e / s
    return P


def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.maximum(d2, 0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def tsne(
    data,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    learning_rate: float | None = None,
) -> Projection:
    """Exact t-SNE to 2-D with early exaggeration, momentum and gains.

    ``learning_rate=None`` uses max(n / exaggeration / 4, 50); a fixed 200
    overshoots on small n and the KL trace oscillates.
    """
    X = np.asarray(data, dtype=float)
    n, p = X.shape
    if n >= 5000:
        raise SelectionError(f"t-SNE is limited to fewer than 5000 samples (got {n})")
    if not 0 < perplexity < n / 3:
        raise SelectionError(f"perplexity {perplexity} infeasible for n={n}; need perplexity < n/3")
    if learning_rate is None:
        learning_rate = max(n / exaggeration / 4.0, 50.0)
    notes = []
    if p > 50:
        X = pca(X, n_components=50).coordinates
        notes.append(f"pca pre-reduction {p} -> 50 dims")
    P = _binary_search_p(_sq_dists(X), perplexity)
    P = (P + P.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_hist = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_dists(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if it >= exaggeration_iters:
            kl_hist.append(float(np.sum(P * np.log(P / Q))))
    return Projection("tsne", Y, notes=notes, kl_history=kl_hist)


def write_projection_csv(path, ids: Sequence[str], proj: Projection, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label"])
        for sid, row, y in zip(ids, proj.coordinates, labels):
            yv = row[1] if row.size > 1 else 0.0
            w.writerow([sid, repr(float(row[0])), repr(float(yv)), int(y)])


def write_loadings_csv(path, feature_names: Sequence[str], proj: Projection) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", *(f"pc{i + 1}" for i in range(proj.loadings.shape[1]))])
        for name, row in zip(feature_names, proj.loadings):
            w.writerow([name, *(repr(float(v)) for v in row)])
