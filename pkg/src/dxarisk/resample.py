"""SMOTE-family oversampling, best-strategy selection and minority augmentation.

All neighbor searches are brute-force Euclidean on the (standardized) feature
matrix. Synthetic points are always convex combinations of a minority seed and
one of its minority neighbors; the generating pair is kept in the trace.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import LabeledDataset

KINDS = ("smote", "borderline_smote", "svm_smote", "adasyn", "smote_tomek", "smote_enn")
DEFAULT_K = 5
DANGER_NEIGHBORS = 10
ENN_NEIGHBORS = 3


class ResampleError(ValueError):
    pass


@dataclass(frozen=True)
class ResampleStrategy:
    kind: str = "smote"
    k_neighbors: int | None = None  # None = adaptive
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ResampleError(f"unknown resampling kind {self.kind!r}")
        if self.k_neighbors is not None and self.k_neighbors < 1:
            raise ResampleError("k_neighbors must be >= 1")


@dataclass
class ResampleResult:
    data: LabeledDataset
    kind: str
    k: int
    origin: np.ndarray  # original row index per output row, -1 for synthetic
    pairs: np.ndarray  # (n_synthetic, 2) original-index seed/neighbor per synthetic row
    removed_original: int = 0
    removed_synthetic: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def class_counts(self) -> tuple[int, int]:
        return self.data.class_counts

    @property
    def imbalance(self) -> int:
        n_neg, n_pos = self.class_counts
        return abs(n_pos - n_neg)

    def trace(self) -> dict:
        n_neg, n_pos = self.class_counts
        return {
            "kind": self.kind,
            "k": self.k,
            "n_negative": n_neg,
            "n_positive": n_pos,
            "n_synthetic": int((self.origin < 0).sum()),
            "removed_original": self.removed_original,
            "removed_synthetic": self.removed_synthetic,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.2
    mixup_alpha: float = 0.6
    mixup_prob: float = 0.5
    sampling_ratio: float = 10.0
    augment_factor: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ResampleError("noise_sigma must be >= 0")
        if self.mixup_alpha <= 0:
            raise ResampleError("mixup_alpha must be > 0")
        if not 0 <= self.mixup_prob <= 1:
            raise ResampleError("mixup_prob must be in [0, 1]")
        if self.augment_factor < 1:
            raise ResampleError("augment_factor must be >= 1")


@dataclass
class AugmentTrace:
    source_rows: np.ndarray
    noise: np.ndarray
    mixup_lambda: np.ndarray  # NaN where no mixup was applied
    mixup_partner: np.ndarray  # -1 where no mixup


# ---------------------------------------------------------------- neighbors


def _sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _knn(query: np.ndarray, ref: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    """Indices of the k nearest ``ref`` rows for each query row (stable on ties)."""
    d = _sq_dist(query, ref)
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    k = min(k, ref.shape[0] - (1 if exclude_self else 0))
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def adaptive_k(n_minority: int, k_default: int = DEFAULT_K) -> int:
    if n_minority < 2:
        raise ResampleError("resampling needs at least 2 minority samples")
    return max(1, min(k_default, n_minority - 1))


def _minority_label(labels: np.ndarray) -> int:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ResampleError("resampling needs both classes present")
    return 1 if n_pos <= n_neg else 0


# ---------------------------------------------------------------- generation


def _interpolate(X, min_idx, seeds, nn, rng):
    """One synthetic point per entry of ``seeds`` (positions into ``min_idx``)."""
    if len(seeds) == 0:
        return np.empty((0, X.shape[1])), np.empty((0, 2), dtype=int)
    choice = rng.integers(nn.shape[1], size=len(seeds))
    nbr = nn[seeds, choice]
    u = rng.random((len(seeds), 1))
    a = X[min_idx[seeds]]
    b = X[min_idx[nbr]]
    pairs = np.column_stack([min_idx[seeds], min_idx[nbr]])
    return a + u * (b - a), pairs


def _even_allocation(n_seeds: int, total: int, rng) -> np.ndarray:
    """Seed positions: every seed used total // n times, the remainder at random."""
    base = np.repeat(np.arange(n_seeds), total // n_seeds)
    extra = rng.choice(n_seeds, size=total % n_seeds, replace=False)
    return np.sort(np.concatenate([base, extra]))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _seed_positions(kind, X, y, min_label, min_idx, nn_min, k, deficit, rng, flags):
    n_min = min_idx.size
    if kind in ("smote", "smote_tomek", "smote_enn"):
        return _even_allocation(n_min, deficit, rng)
    if kind == "borderline_smote":
        m = min(DANGER_NEIGHBORS, X.shape[0] - 1)
        nn_all = _knn(X[min_idx], X, m + 1, exclude_self=False)
        nn_all = np.array([row[row != i][:m] for row, i in zip(nn_all, min_idx)])
        n_maj = (y[nn_all] != min_label).sum(axis=1)
        danger = np.flatnonzero((n_maj > m / 2) & (n_maj < m))
        if danger.size == 0:
            flags.append("borderline_no_danger_fallback_smote")
            return _even_allocation(n_min, deficit, rng)
        return danger[_even_allocation(danger.size, deficit, rng)]
    if kind == "svm_smote":
        from sklearn.svm import SVC

        svm = SVC(kernel="rbf", C=1.0, gamma="scale")
        svm.fit(X, y)
        sv = set(int(i) for i in svm.support_)
        seeds = np.array([p for p, i in enumerate(min_idx) if int(i) in sv], dtype=int)
        if seeds.size == 0:
            flags.append("svm_no_minority_sv_fallback_smote")
            return _even_allocation(n_min, deficit, rng)
        return seeds[_even_allocation(seeds.size, deficit, rng)]
    if kind == "adasyn":
        nn_all = _knn(X[min_idx], X, k + 1, exclude_self=False)
        nn_all = np.array([row[row != i][:k] for row, i in zip(nn_all, min_idx)])
        r = (y[nn_all] != min_label).mean(axis=1)
        if r.sum() == 0:
            flags.append("adasyn_uniform_allocation")
            r = np.ones_like(r)
        counts = _largest_remainder(r, deficit)
        return np.repeat(np.arange(n_min), counts)
    raise ResampleError(kind)


def _oversample(X, y, kind, k, rng, flags, target_extra=None, min_label=None):
    if min_label is None:
        min_label = _minority_label(y)
    min_idx = np.flatnonzero(y == min_label)
    maj = int((y != min_label).sum())
    deficit = maj - min_idx.size if target_extra is None else target_extra
    if deficit <= 0:
        return np.empty((0, X.shape[1])), np.empty((0, 2), dtype=int), min_label
    Xm = X[min_idx]
    if np.all(Xm == Xm[0]):
        flags.append("degenerate_minority_duplicated")
        warnings.warn("all minority samples identical; duplicating instead of interpolating", RuntimeWarning)
        pos = rng.integers(min_idx.size, size=deficit)
        return Xm[pos].copy(), np.column_stack([min_idx[pos], min_idx[pos]]), min_label
    nn_min = _knn(Xm, Xm, k, exclude_self=True)
    seeds = _seed_positions(kind, X, y, min_label, min_idx, nn_min, k, deficit, rng, flags)
    synth, pairs = _interpolate(X, min_idx, seeds, nn_min, rng)
    return synth, pairs, min_label


def _tomek_links(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    nn = _knn(X, X, 1, exclude_self=True)[:, 0]
    mutual = nn[nn] == np.arange(len(y))
    link = mutual & (y != y[nn])
    return np.flatnonzero(link)


def _enn_violators(X: np.ndarray, y: np.ndarray, k: int = ENN_NEIGHBORS) -> np.ndarray:
    nn = _knn(X, X, k, exclude_self=True)
    disagree = (y[nn] != y[:, None]).sum(axis=1)
    return np.flatnonzero(disagree * 2 > nn.shape[1])


def _enn_clean(X, y, origin):
    removed = np.zeros(0, dtype=int)
    while len(y) > ENN_NEIGHBORS:
        bad = _enn_violators(X, y)
        if bad.size == 0:
            break
        keep = np.ones(len(y), dtype=bool)
        keep[bad] = False
        removed = np.concatenate([removed, origin[bad]])
        X, y, origin = X[keep], y[keep], origin[keep]
    return X, y, origin, removed


def resample(data: LabeledDataset, strategy: ResampleStrategy, max_rounds: int = 20) -> ResampleResult:
    """Oversample the minority class to parity with one SMOTE-family method.

    ``smote_tomek`` removes both ends of each Tomek link after SMOTE.
    ``smote_enn`` alternates edited-nearest-neighbor cleaning (to a fixed
    point) with minority top-ups / synthetic trimming until the classes are
    within one sample of parity, or ``max_rounds`` is reached.
    """
    X = data.matrix
    y = data.labels
    min_label = _minority_label(y)
    n_min = int((y == min_label).sum())
    k = adaptive_k(n_min, strategy.k_neighbors or DEFAULT_K)
    rng = np.random.default_rng(strategy.seed)
    flags: list[str] = []
    base_kind = "smote" if strategy.kind in ("smote_tomek", "smote_enn") else strategy.kind
    synth, pairs, _ = _oversample(X, y, base_kind, k, rng, flags)

    Xo = np.vstack([X, synth])
    yo = np.concatenate([y, np.full(len(synth), min_label)])
    origin = np.concatenate([np.arange(len(y)), -np.arange(1, len(synth) + 1)])
    all_pairs = list(pairs)
    removed_orig = removed_syn = 0

    if strategy.kind == "smote_tomek":
        links = _tomek_links(Xo, yo)
        keep = np.ones(len(yo), dtype=bool)
        keep[links] = False
        removed_orig += int((origin[links] >= 0).sum())
        removed_syn += int((origin[links] < 0).sum())
        Xo, yo, origin = Xo[keep], yo[keep], origin[keep]
    elif strategy.kind == "smote_enn":
        survivors = set(range(len(y)))
        balanced = False
        for _ in range(max_rounds):
            Xo, yo, origin, gone = _enn_clean(Xo, yo, origin)
            removed_orig += int((gone >= 0).sum())
            removed_syn += int((gone < 0).sum())
            survivors -= set(int(g) for g in gone if g >= 0)
            n_min_now = int((yo == min_label).sum())
            n_maj_now = len(yo) - n_min_now
            if abs(n_maj_now - n_min_now) <= 1:
                balanced = True
                break
            if n_min_now < n_maj_now:
                # top up from surviving original minority points
                keep_min = np.array(sorted(i for i in survivors if y[i] == min_label), dtype=int)
                if keep_min.size < 2:
                    flags.append("enn_minority_exhausted")
                    break
                sub_y = np.concatenate([y[keep_min], np.full(n_maj_now, 1 - min_label)])
                sub_X = np.vstack([X[keep_min], Xo[yo != min_label]])
                extra, p_local, _ = _oversample(sub_X, sub_y, "smote", adaptive_k(keep_min.size, k), rng, flags,
                                                target_extra=n_maj_now - n_min_now, min_label=min_label)
                p_global = np.column_stack([keep_min[p_local[:, 0]], keep_min[p_local[:, 1]]])
                start = len(all_pairs)
                all_pairs.extend(p_global)
                Xo = np.vstack([Xo, extra])
                yo = np.concatenate([yo, np.full(len(extra), min_label)])
                origin = np.concatenate([origin, -np.arange(start + 1, start + len(extra) + 1)])
            else:
                # too many minority: trim the most recent synthetic points
                excess = n_min_now - n_maj_now
                syn_pos = np.flatnonzero(origin < 0)
                if syn_pos.size < excess:
                    flags.append("enn_cannot_trim")
                    break
                drop = syn_pos[np.argsort(origin[syn_pos])[:excess]]
                keep = np.ones(len(yo), dtype=bool)
                keep[drop] = False
                removed_syn += excess
                Xo, yo, origin = Xo[keep], yo[keep], origin[keep]
        if not balanced:
            Xo, yo, origin, gone = _enn_clean(Xo, yo, origin)
            removed_orig += int((gone >= 0).sum())
            removed_syn += int((gone < 0).sum())
            flags.append("enn_parity_not_reached")

    pair_arr = np.array(all_pairs, dtype=int).reshape(-1, 2)
    syn_rows = origin < 0
    out_pairs = pair_arr[(-origin[syn_rows]) - 1]
    ids = [data.subject_ids[o] if o >= 0 else f"synthetic-{-o}" for o in origin]
    step = {"step": "resample", "kind": strategy.kind, "k": k, "seed": strategy.seed}
    out = LabeledDataset(Xo, yo, list(data.feature_names), ids, [*data.provenance, step])
    return ResampleResult(out, strategy.kind, k, origin, out_pairs, removed_orig, removed_syn, flags)


def select_best_strategy(data: LabeledDataset, strategies) -> tuple[ResampleStrategy, ResampleResult, list[dict]]:
    """Smallest |n_pos - n_neg|, then fewest removed originals, then canonical kind order."""
    if not strategies:
        raise ResampleError("no strategies to evaluate")
    trace, results = [], []
    for s in strategies:
        try:
            r = resample(data, s)
        except ResampleError as exc:
            trace.append({"kind": s.kind, "error": str(exc)})
            continue
        results.append((s, r))
        trace.append(r.trace())
    if not results:
        raise ResampleError("no resampling strategy was applicable")
    best_s, best_r = min(results, key=lambda sr: (sr[1].imbalance, sr[1].removed_original, KINDS.index(sr[0].kind)))
    for t in trace:
        t["selected"] = t.get("kind") == best_s.kind
    return best_s, best_r, trace


def write_trace(path, trace: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(trace, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------- augmentation


def minority_weights(labels: np.ndarray, ratio: float = 10.0, min_label: int | None = None) -> np.ndarray:
    if min_label is None:
        min_label = _minority_label(labels)
    return np.where(labels == min_label, float(ratio), 1.0)


def augment_minority(data: LabeledDataset, cfg: AugmentConfig, return_trace: bool = False):
    """Append ``augment_factor`` noisy (and sometimes mixed-up) copies of each minority row.

    Noise is relative: per-feature sigma = ``noise_sigma`` x feature std over
    the input data. Mixup pairs two minority rows with lambda ~ Beta(a, a) and
    keeps the hard minority label. Returns ``(data, sample_weights)`` where
    minority rows weigh ``sampling_ratio`` and majority rows weigh 1.
    """
    y = data.labels
    min_label = _minority_label(y)
    min_idx = np.flatnonzero(y == min_label)
    rng = np.random.default_rng(cfg.seed)
    X = data.matrix
    scale = cfg.noise_sigma * X.std(axis=0)
    src = np.repeat(min_idx, cfg.augment_factor)
    noise = rng.standard_normal((src.size, X.shape[1])) * scale
    new = X[src] + noise
    lam = np.full(src.size, np.nan)
    partner = np.full(src.size, -1)
    if cfg.mixup_prob > 0 and min_idx.size > 1:
        do_mix = rng.random(src.size) < cfg.mixup_prob
        for i in np.flatnonzero(do_mix):
            others = min_idx[min_idx != src[i]]
            j = others[rng.integers(others.size)]
            l = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
            new[i] = l * new[i] + (1.0 - l) * X[j]
            lam[i], partner[i] = l, j
    ids = [f"{data.subject_ids[s]}#aug{n % cfg.augment_factor + 1}" for n, s in enumerate(src)]
    step = {"step": "augment_minority", "factor": cfg.augment_factor, "noise_sigma": cfg.noise_sigma,
            "mixup_alpha": cfg.mixup_alpha, "seed": cfg.seed}
    out = replace(
        data,
        matrix=np.vstack([X, new]),
        labels=np.concatenate([y, np.full(src.size, min_label)]),
        subject_ids=[*data.subject_ids, *ids],
        provenance=[*data.provenance, step],
    )
    # the minority label is fixed before augmentation; copies can outnumber the majority
    weights = minority_weights(out.labels, cfg.sampling_ratio, min_label)
    if return_trace:
        return out, weights, AugmentTrace(src, noise, lam, partner)
    return out, weights
