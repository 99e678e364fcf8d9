"""Classical classifiers, stratified cross-validation, grid search and soft voting.

The estimators themselves come from scikit-learn; this module pins the
hyperparameters, class weighting, fold assignment and selection rules.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.ensemble import AdaBoostClassifier, GradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier

from .cohort import LabeledDataset, derive_seed
from .evalreport import MetricError, evaluate_scores

KINDS = (
    "logistic_regression",
    "random_forest",
    "gradient_boosting",
    "svm_rbf",
    "knn",
    "decision_tree",
    "gaussian_nb",
    "adaboost",
)

DEFAULT_HYPERPARAMETERS: dict[str, dict] = {
    "logistic_regression": {"C": 1.0, "max_iter": 1000},
    "random_forest": {"n_estimators": 100, "max_depth": 10, "max_features": "sqrt"},
    "gradient_boosting": {"n_estimators": 100, "learning_rate": 0.1, "max_depth": 6},
    "svm_rbf": {"C": 1.0, "gamma": "scale", "subsample_cap": 2000},
    "knn": {"n_neighbors": 5},
    "decision_tree": {"max_depth": 10, "criterion": "gini"},
    "gaussian_nb": {"var_smoothing": 1e-9},
    "adaboost": {"n_estimators": 50, "learning_rate": 1.0},
}

DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "logistic_regression": {"C": [0.1, 1.0, 10.0]},
    "random_forest": {"max_depth": [5, 10, 15], "n_estimators": [100, 200]},
    "gradient_boosting": {"max_depth": [3, 6], "learning_rate": [0.05, 0.1]},
    "svm_rbf": {"C": [0.5, 1.0, 2.0]},
    "knn": {"n_neighbors": [5, 11, 21]},
    "decision_tree": {"max_depth": [5, 10, 15]},
    "gaussian_nb": {"var_smoothing": [1e-9, 1e-6]},
    "adaboost": {"n_estimators": [50, 100], "learning_rate": [0.5, 1.0]},
}

# kinds whose sklearn fit() accepts sample_weight
_WEIGHTED = {"logistic_regression", "random_forest", "gradient_boosting", "svm_rbf", "decision_tree", "gaussian_nb", "adaboost"}


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    hyperparameters: Mapping = field(default_factory=dict)
    class_weighting: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BaselineError(f"unknown baseline kind {self.kind!r}")
        unknown = set(self.hyperparameters) - set(DEFAULT_HYPERPARAMETERS[self.kind]) - {"max_features", "n_estimators"}
        if unknown:
            raise BaselineError(f"{self.kind}: unsupported hyperparameters {sorted(unknown)}")

    @property
    def params(self) -> dict:
        return {**DEFAULT_HYPERPARAMETERS[self.kind], **dict(self.hyperparameters)}

    def with_params(self, **overrides) -> "BaselineSpec":
        return replace(self, hyperparameters={**dict(self.hyperparameters), **overrides})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": self.params, "class_weighting": self.class_weighting}


def default_specs() -> list[BaselineSpec]:
    return [BaselineSpec(k) for k in KINDS]


@dataclass
class FittedBaseline:
    spec: BaselineSpec
    estimator: object
    feature_names: list[str]
    provenance: dict = field(default_factory=dict)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise BaselineError(f"expected {len(self.feature_names)} features, got shape {X.shape}")
        classes = list(self.estimator.classes_)
        return np.clip(self.estimator.predict_proba(X)[:, classes.index(1)], 0.0, 1.0)

    def save(self, directory) -> Path:
        """Manifest JSON plus a pickled estimator blob."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blob = pickle.dumps(self.estimator, protocol=4)
        (directory / "model.pkl").write_bytes(blob)
        manifest = {
            "format_version": 1,
            "kind": self.spec.kind,
            "spec": self.spec.to_dict(),
            "feature_names": self.feature_names,
            "provenance": self.provenance,
            "blob": "model.pkl",
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "FittedBaseline":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / manifest["blob"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
            raise BaselineError(f"{directory}: model blob does not match its manifest checksum")
        s = manifest["spec"]
        spec = BaselineSpec(s["kind"], s["hyperparameters"], s["class_weighting"])
        return cls(spec, pickle.loads(blob), list(manifest["feature_names"]), manifest["provenance"])


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weight n / (2 n_class)."""
    labels = np.asarray(labels).astype(int)
    counts = np.bincount(labels, minlength=2)
    return labels.size / (2.0 * counts[labels])


def _estimator(spec: BaselineSpec, seed: int):
    p = spec.params
    k = spec.kind
    if k == "logistic_regression":
        return LogisticRegression(C=p["C"], max_iter=p["max_iter"], penalty="l2", solver="lbfgs")
    if k == "random_forest":
        return RandomForestClassifier(n_estimators=p["n_estimators"], max_depth=p["max_depth"],
                                      max_features=p["max_features"], bootstrap=True, random_state=seed)
    if k == "gradient_boosting":
        return GradientBoostingClassifier(n_estimators=p["n_estimators"], learning_rate=p["learning_rate"],
                                          max_depth=p["max_depth"], loss="log_loss", random_state=seed)
    if k == "svm_rbf":
        return SVC(C=p["C"], kernel="rbf", gamma=p["gamma"], probability=True, random_state=seed)
    if k == "knn":
        return KNeighborsClassifier(n_neighbors=p["n_neighbors"], weights="distance")
    if k == "decision_tree":
        return DecisionTreeClassifier(max_depth=p["max_depth"], criterion=p["criterion"], random_state=seed)
    if k == "gaussian_nb":
        return GaussianNB(var_smoothing=p["var_smoothing"])
    return AdaBoostClassifier(DecisionTreeClassifier(max_depth=1), n_estimators=p["n_estimators"],
                              learning_rate=p["learning_rate"], random_state=seed)


def fit(spec: BaselineSpec, train: LabeledDataset, seed: int = 0) -> FittedBaseline:
    X, y = train.matrix, train.labels.astype(int)
    if len(set(y.tolist())) < 2:
        raise BaselineError("training data must contain both classes")
    provenance: dict = {"seed": seed, "n_train": int(y.size)}
    if spec.kind == "knn" and y.size < spec.params["n_neighbors"]:
        raise BaselineError(f"knn needs at least {spec.params['n_neighbors']} samples, got {y.size}")
    if spec.kind == "svm_rbf" and y.size > spec.params["subsample_cap"]:
        # stratified subsample keeps the fit desk-sized
        rng = np.random.default_rng(derive_seed(seed, "svm_subsample"))
        cap = spec.params["subsample_cap"]
        keep = []
        for label in (0, 1):
            idx = np.flatnonzero(y == label)
            take = int(np.floor(cap * idx.size / y.size + 0.5))
            keep.append(rng.choice(idx, size=max(take, 1), replace=False))
        keep = np.sort(np.concatenate(keep))
        X, y = X[keep], y[keep]
        provenance["svm_subsample"] = int(keep.size)
    est = _estimator(spec, int(seed) % 2**32)
    weighted = spec.class_weighting and spec.kind in _WEIGHTED
    if weighted:
        est.fit(X, y, sample_weight=class_weights(y))
    else:
        est.fit(X, y)
    provenance["class_weighted"] = weighted
    if spec.kind == "logistic_regression":
        provenance["converged"] = bool(est.n_iter_.max() < spec.params["max_iter"])
    return FittedBaseline(spec, est, list(train.feature_names), provenance)


def predict_proba(model: FittedBaseline, data: LabeledDataset | np.ndarray) -> np.ndarray:
    if isinstance(data, LabeledDataset):
        if list(data.feature_names) != model.feature_names:
            raise BaselineError("feature names differ from the fitted model")
        return model.predict_proba(data.matrix)
    return model.predict_proba(data)


# ---------------------------------------------------------------- model selection


@dataclass
class CvResult:
    spec: BaselineSpec
    fold_auc: list[float]
    fold_f1: list[float]

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_auc))

    @property
    def std_auc(self) -> float:
        return float(np.std(self.fold_auc))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.fold_f1))


def fold_indices(labels: np.ndarray, folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Held-out index sets of a stratified, shuffled k-fold partition."""
    labels = np.asarray(labels).astype(int)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < folds:
        raise BaselineError(f"each class needs at least {folds} samples, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=derive_seed(seed, "folds") % 2**32)
    return [test for _, test in skf.split(np.zeros(labels.size), labels)]


def cross_validate(
    spec: BaselineSpec,
    data: LabeledDataset,
    folds: int = 5,
    seed: int = 0,
    prepare: Callable[[int, LabeledDataset], LabeledDataset] | None = None,
) -> CvResult:
    """Stratified k-fold ROC-AUC and F1.

    ``prepare(fold, train_part)`` may transform each training part (for
    example resampling) so nothing synthetic leaks into a held-out fold.
    """
    aucs, f1s = [], []
    all_idx = np.arange(len(data))
    for i, held in enumerate(fold_indices(data.labels, folds, seed)):
        train_part = data.subset(np.setdiff1d(all_idx, held))
        if prepare is not None:
            train_part = prepare(i, train_part)
        model = fit(spec, train_part, seed=derive_seed(seed, "fold", i))
        held_data = data.subset(held)
        _, m = evaluate_scores(held_data.labels, model.predict_proba(held_data.matrix))
        aucs.append(float(m.roc_auc))
        f1s.append(m.f1)
    return CvResult(spec, aucs, f1s)


def grid_points(grid: Mapping[str, Sequence]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise BaselineError("grid must be non-empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(
    spec: BaselineSpec,
    grid: Mapping[str, Sequence],
    data: LabeledDataset,
    seed: int = 0,
    folds: int = 5,
    prepare: Callable[[int, LabeledDataset], LabeledDataset] | None = None,
) -> tuple[BaselineSpec, CvResult, list[CvResult]]:
    """Exhaustive CV over ``grid``; best mean AUC, then mean F1, then grid order."""
    results = [cross_validate(spec.with_params(**point), data, folds, seed, prepare) for point in grid_points(grid)]
    best = min(range(len(results)), key=lambda i: (-results[i].mean_auc, -results[i].mean_f1, i))
    return results[best].spec, results[best], results


def soft_vote(models: Sequence, data: LabeledDataset | np.ndarray) -> np.ndarray:
    """Unweighted mean of member probabilities."""
    if len(models) == 0:
        raise BaselineError("soft voting needs at least one member")
    probs = [m.predict_proba(data.matrix if isinstance(data, LabeledDataset) else data) for m in models]
    return np.mean(probs, axis=0)


@dataclass
class SoftVoteEnsemble:
    members: list[FittedBaseline]

    @property
    def feature_names(self) -> list[str]:
        return self.members[0].feature_names

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return soft_vote(self.members, X)


def select_champion(results: Sequence[tuple[object, float, float]]):
    """``results`` holds (model, auc, f1); max AUC, then F1, then listing order."""
    if not results:
        raise BaselineError("no candidates")
    best = min(range(len(results)), key=lambda i: (-results[i][1], -results[i][2], i))
    return results[best][0]


def write_cv_table(results: Sequence[CvResult], path, tuned: Mapping[str, CvResult] | None = None) -> None:
    tuned = tuned or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_name", "cv_auc_mean", "cv_auc_std", "cv_f1_mean", "cv_f1_std", "tuned_auc_mean", "tuned_params"])
        for r in results:
            t = tuned.get(r.spec.kind)
            w.writerow([
                r.spec.kind, f"{r.mean_auc:.6f}", f"{r.std_auc:.6f}", f"{r.mean_f1:.6f}", f"{r.std_f1:.6f}",
                "" if t is None else f"{t.mean_auc:.6f}",
                "" if t is None else json.dumps(dict(t.spec.hyperparameters), sort_keys=True),
            ])


__all__ = [
    "KINDS", "BaselineSpec", "FittedBaseline", "CvResult", "SoftVoteEnsemble", "BaselineError", "MetricError",
    "default_specs", "fit", "predict_proba", "cross_validate", "grid_search", "soft_vote", "select_champion",
    "fold_indices", "class_weights", "write_cv_table", "DEFAULT_GRIDS",
]
