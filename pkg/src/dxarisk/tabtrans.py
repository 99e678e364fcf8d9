"""Tabular transformer with an auxiliary minority head, built on :mod:`numcore`.

Each continuous feature j becomes a token ``x_j * w_j + b_j``; categorical
features look up an embedding row. A learned aggregation token is prepended,
the sequence runs through pre-norm encoder blocks, and two independent linear
heads read the final aggregation token.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .cohort import LabeledDataset, stratified_split
from .evalreport import roc_auc
from .features import Standardizer
from .resample import AugmentConfig, augment_minority

LN_EPS = 1e-5
INIT_GAIN = 1.0


class TabTransError(ValueError):
    pass


@dataclass(frozen=True)
class TabTransConfig:
    token_dim: int = 32
    n_heads: int = 4
    n_layers: int = 3
    ffn_dim: int = 64
    dropout: float = 0.1
    aux_weight: float = 0.3
    lr: float = 5e-5
    lr_min: float = 1e-6
    weight_decay: float = 1e-5
    clip_norm: float = 0.5
    patience: int = 50
    max_epochs: int = 300
    batch_size: int = 64
    val_fraction: float = 0.15
    schedule_T0: int = 10
    schedule_T_mult: int = 2
    # None: rebalance every batch so both classes carry equal loss mass
    main_class_weights: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise TabTransError("token_dim must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise TabTransError("dropout must be in [0, 1)")
        if self.patience < 1:
            raise TabTransError("patience must be >= 1")
        if not 0 <= self.aux_weight <= 1:
            raise TabTransError("aux_weight must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.main_class_weights is not None:
            d["main_class_weights"] = list(self.main_class_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TabTransConfig":
        d = dict(d)
        if d.get("main_class_weights") is not None:
            d["main_class_weights"] = tuple(d["main_class_weights"])
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    stop_reason: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_minority_recall", "val_auc", "lr"])
            for i, row in enumerate(zip(self.train_loss, self.val_recall, self.val_auc, self.lr), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class TabTransformer:
    def __init__(self, config: TabTransConfig, n_features: int, categorical: Mapping[int, int] | None = None):
        if n_features < 1:
            raise TabTransError("need at least one feature")
        self.config = config
        self.n_features = n_features
        self.categorical = {int(k): int(v) for k, v in (categorical or {}).items()}
        bad = [j for j in self.categorical if not 0 <= j < n_features]
        if bad:
            raise TabTransError(f"categorical indices out of range: {bad}")
        self.continuous = [j for j in range(n_features) if j not in self.categorical]
        self.params: dict[str, nc.Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ---------------------------------------------------
    def _add(self, name, value):
        self.params[name] = nc.parameter(value, name=name)

    def _linear(self, rng, name, fan_in, fan_out):
        # Xavier-uniform, gain INIT_GAIN, zero bias
        bound = INIT_GAIN * math.sqrt(6.0 / (fan_in + fan_out))
        self._add(f"{name}.w", _uniform(rng, (fan_in, fan_out), bound))
        self._add(f"{name}.b", np.zeros(fan_out))

    def _init_params(self, rng):
        d, c = self.config.token_dim, self.config
        tok_bound = 1.0 / math.sqrt(d)
        if self.continuous:
            self._add("tok.w", _uniform(rng, (len(self.continuous), d), tok_bound))
            self._add("tok.b", _uniform(rng, (len(self.continuous), d), tok_bound))
        for j, card in sorted(self.categorical.items()):
            self._add(f"emb{j}", _uniform(rng, (card, d), tok_bound))
        self._add("agg", _uniform(rng, (1, 1, d), tok_bound))
        for layer in range(c.n_layers):
            p = f"l{layer}"
            self._add(f"{p}.ln1.g", np.ones(d))
            self._add(f"{p}.ln1.b", np.zeros(d))
            self._linear(rng, f"{p}.qkv", d, 3 * d)
            self._linear(rng, f"{p}.out", d, d)
            self._add(f"{p}.ln2.g", np.ones(d))
            self._add(f"{p}.ln2.b", np.zeros(d))
            self._linear(rng, f"{p}.ff1", d, c.ffn_dim)
            self._linear(rng, f"{p}.ff2", c.ffn_dim, d)
        self._add("lnf.g", np.ones(d))
        self._add("lnf.b", np.zeros(d))
        self._linear(rng, "head_main", d, 1)
        self._linear(rng, "head_aux", d, 1)

    @property
    def parameters(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise TabTransError("state dict keys do not match the model")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise TabTransError(f"shape mismatch for {k}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    @property
    def sequence_length(self) -> int:
        return self.n_features + 1

    # -- forward ------------------------------------------------------
    def _tokens(self, X: np.ndarray) -> nc.Tensor:
        P = self.params
        b = X.shape[0]
        parts = [nc.add(np.zeros((b, 1, self.config.token_dim)), P["agg"])]
        if self.continuous:
            xc = X[:, self.continuous][:, :, None]
            parts.append(nc.add(nc.mul(xc, P["tok.w"]), P["tok.b"]))
        for j in sorted(self.categorical):
            idx = np.rint(X[:, j]).astype(np.int64)
            parts.append(nc.reshape(nc.embedding(P[f"emb{j}"], idx), (b, 1, self.config.token_dim)))
        return nc.concat(parts, axis=1)

    def _dropout(self, t, rng):
        p = self.config.dropout
        if rng is None or p == 0:
            return t
        mask = (rng.random(t.shape) >= p) / (1.0 - p)
        return nc.mul(t, mask)

    def _attention(self, h, layer, rng, keep=None):
        P, c = self.params, self.config
        b, s, d = h.shape
        nh, dh = c.n_heads, d // c.n_heads
        qkv = nc.add(nc.matmul(h, P[f"l{layer}.qkv.w"]), P[f"l{layer}.qkv.b"])
        qkv = nc.transpose(nc.reshape(qkv, (b, s, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = nc.softmax(scores, axis=-1)
        if keep is not None:
            keep.append(attn.data)
        ctx = nc.matmul(self._dropout(attn, rng), v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return nc.add(nc.matmul(ctx, P[f"l{layer}.out.w"]), P[f"l{layer}.out.b"])

    def forward(self, X, training: bool = False, rng=None, keep_attention: list | None = None):
        """(main logits, aux logits) as 1-D tensors; dropout only when ``training``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise TabTransError(f"expected (batch, {self.n_features}) input, got {X.shape}")
        if np.isnan(X).any():
            raise TabTransError("input contains missing values")
        rng = rng if training else None
        P = self.params
        h = self._tokens(X)
        for layer in range(self.config.n_layers):
            a = nc.layer_norm(h, P[f"l{layer}.ln1.g"], P[f"l{layer}.ln1.b"], eps=LN_EPS)
            h = nc.add(h, self._dropout(self._attention(a, layer, rng, keep_attention), rng))
            f = nc.layer_norm(h, P[f"l{layer}.ln2.g"], P[f"l{layer}.ln2.b"], eps=LN_EPS)
            f = nc.gelu(nc.add(nc.matmul(f, P[f"l{layer}.ff1.w"]), P[f"l{layer}.ff1.b"]))
            f = nc.add(nc.matmul(f, P[f"l{layer}.ff2.w"]), P[f"l{layer}.ff2.b"])
            h = nc.add(h, self._dropout(f, rng))
        z = nc.layer_norm(h[:, 0, :], P["lnf.g"], P["lnf.b"], eps=LN_EPS)
        main = nc.add(nc.matmul(z, P["head_main.w"]), P["head_main.b"])
        aux = nc.add(nc.matmul(z, P["head_aux.w"]), P["head_aux.b"])
        b = X.shape[0]
        return nc.reshape(main, (b,)), nc.reshape(aux, (b,))

    def predict_logits(self, X, batch_size: int = 512) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        with nc.no_grad():
            out = [self.forward(X[i : i + batch_size])[0].data for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def predict_proba(self, X) -> np.ndarray:
        return nc.sigmoid(self.predict_logits(X))


def build(config: TabTransConfig, n_features: int, categorical_spec: Mapping[int, int] | None = None) -> TabTransformer:
    return TabTransformer(config, n_features, categorical_spec)


def parameter_count(config: TabTransConfig, n_continuous: int, categorical_cardinalities: Sequence[int] = ()) -> int:
    """Closed-form parameter count for :class:`TabTransformer`."""
    d, f = config.token_dim, config.ffn_dim
    tokenizer = 2 * n_continuous * d + sum(categorical_cardinalities) * d
    per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    return tokenizer + d + config.n_layers * per_layer + 2 * d + 2 * (d + 1)


def loss(main, aux, labels, class_weights=(1.0, 1.0), aux_weight: float = 0.3, pos_weight: float | None = None):
    """Weighted BCE on the main head plus ``aux_weight`` x positive-reweighted BCE on the aux head.

    ``pos_weight`` defaults to n_neg / n_pos of ``labels``.
    """
    if not 0 <= aux_weight <= 1:
        raise TabTransError("aux_weight must be in [0, 1]")
    y = np.asarray(labels, dtype=np.float64)
    w_main = np.where(y == 1, class_weights[1], class_weights[0])
    total = nc.bce_with_logits(main, y, w_main)
    if aux_weight > 0:
        if pos_weight is None:
            n_pos = y.sum()
            pos_weight = (y.size - n_pos) / n_pos if n_pos > 0 else 1.0
        w_aux = np.where(y == 1, pos_weight, 1.0)
        total = nc.add(total, nc.mul(nc.bce_with_logits(aux, y, w_aux), aux_weight))
    return total


def minority_recall(y_true, proba, threshold: float = 0.5) -> float:
    y = np.asarray(y_true).astype(int)
    pos = y == 1
    if not pos.any():
        return 0.0
    return float(((np.asarray(proba) >= threshold) & pos).sum() / pos.sum())


# ---------------------------------------------------------------- artifact


@dataclass
class ModelArtifact:
    config: TabTransConfig
    feature_names: list[str]
    categorical: dict[int, int]
    state: dict[str, np.ndarray]
    standardizer: Standardizer | None = None
    metrics: dict = field(default_factory=dict)

    def model(self) -> TabTransformer:
        m = TabTransformer(self.config, len(self.feature_names), self.categorical)
        m.load_state_dict(self.state)
        return m

    def save(self, directory) -> Path:
        meta = {
            "kind": "tabtrans",
            "config": self.config.to_dict(),
            "feature_names": list(self.feature_names),
            "categorical": {str(k): v for k, v in self.categorical.items()},
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "metrics": self.metrics,
            "float_width_note": "trained in float64, stored as float32",
        }
        return nc.save_weights(directory, self.state, meta)

    @classmethod
    def load(cls, directory) -> "ModelArtifact":
        state, manifest = nc.load_weights(directory)
        meta = manifest["meta"]
        std = meta.get("standardizer")
        return cls(
            TabTransConfig.from_dict(meta["config"]),
            list(meta["feature_names"]),
            {int(k): int(v) for k, v in meta["categorical"].items()},
            state,
            None if std is None else Standardizer.from_dict(std),
            meta.get("metrics", {}),
        )


def predict_proba(artifact: ModelArtifact, data, feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Main-head probabilities. ``data`` is a LabeledDataset or a matrix plus ``feature_names``."""
    if isinstance(data, LabeledDataset):
        feature_names, X = data.feature_names, data.matrix
    else:
        X = np.asarray(data, dtype=float)
    if feature_names is not None and list(feature_names) != list(artifact.feature_names):
        raise TabTransError("feature names/order do not match the artifact")
    if X.shape[1] != len(artifact.feature_names):
        raise TabTransError("feature count does not match the artifact")
    return artifact.model().predict_proba(X)


# ---------------------------------------------------------------- training


def _weighted_batches(weights: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    p = weights / weights.sum()
    draws = rng.choice(weights.size, size=weights.size, replace=True, p=p)
    return [draws[i : i + batch_size] for i in range(0, draws.size, batch_size)]


def batch_balanced_weights(labels: np.ndarray) -> tuple[float, float]:
    """Per-class weights b / (2 n_c) for one batch; an absent class gets weight 1."""
    y = np.asarray(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return (y.size / (2.0 * n_neg) if n_neg else 1.0, y.size / (2.0 * n_pos) if n_pos else 1.0)


def train(
    model: TabTransformer,
    data: LabeledDataset,
    config: TabTransConfig | None = None,
    augment: AugmentConfig | None = None,
    sample_weights: np.ndarray | None = None,
    standardizer: Standardizer | None = None,
    feature_names: Sequence[str] | None = None,
) -> tuple[ModelArtifact, TrainHistory]:
    """Train with AdamW, per-epoch cosine warm restarts, clipping and recall-based early stopping.

    A stratified ``val_fraction`` is held out first; ``augment`` (if given) is
    applied to the remaining training part only and supplies the weighted
    sampler's weights. Best-epoch weights (max validation minority recall,
    earliest on ties) end up in the artifact.
    """
    config = config or model.config
    if len(set(data.labels.tolist())) < 2:
        raise TabTransError("training data must contain both classes")
    fit, val = stratified_split(data, config.val_fraction, seed=config.seed)
    weights = np.ones(len(fit)) if sample_weights is None else None
    if augment is not None:
        fit, weights = augment_minority(fit, augment)
    elif sample_weights is not None:
        # weights follow the original rows into the fit part
        index = {sid: i for i, sid in enumerate(data.subject_ids)}
        weights = np.asarray(sample_weights, dtype=float)[[index[s] for s in fit.subject_ids]]

    rng = np.random.default_rng(config.seed + 1)
    schedule = nc.LrSchedule(eta_max=config.lr, eta_min=min(config.lr_min, config.lr),
                             T0=config.schedule_T0, T_mult=config.schedule_T_mult)
    opt = nc.AdamW(lr=config.lr, weight_decay=config.weight_decay)
    params = model.parameters
    hist = TrainHistory()
    best_state, best_recall = model.state_dict(), -1.0

    for epoch in range(1, config.max_epochs + 1):
        opt.lr = schedule.lr_at(epoch - 1)
        losses = []
        for idx in _weighted_batches(weights, config.batch_size, rng):
            main, aux = model.forward(fit.matrix[idx], training=True, rng=rng)
            y = fit.labels[idx]
            cw = config.main_class_weights or batch_balanced_weights(y)
            total = loss(main, aux, y, cw, config.aux_weight)
            grads = nc.backward(total, params)
            grads, _ = nc.clip_global_norm(grads, config.clip_norm)
            opt.step(params, grads)
            losses.append(float(total.data))
        proba = model.predict_proba(val.matrix)
        recall = minority_recall(val.labels, proba)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_recall.append(recall)
        hist.val_auc.append(roc_auc(val.labels, proba))
        hist.lr.append(opt.lr)
        if recall > best_recall:
            best_recall, hist.best_epoch = recall, epoch
            best_state = model.state_dict()
        hist.stop_epoch = epoch
        if epoch - hist.best_epoch >= config.patience:
            hist.stop_reason = "patience"
            break
    else:
        hist.stop_reason = "max_epochs"

    model.load_state_dict(best_state)
    artifact = ModelArtifact(
        config=config,
        feature_names=list(feature_names or data.feature_names),
        categorical=dict(model.categorical),
        state=best_state,
        standardizer=standardizer,
        metrics={
            "best_epoch": hist.best_epoch,
            "val_minority_recall": best_recall,
            "val_auc": hist.val_auc[hist.best_epoch - 1],
            "stop_epoch": hist.stop_epoch,
            "stop_reason": hist.stop_reason,
            "main_class_weights": "per-batch balanced" if config.main_class_weights is None else list(config.main_class_weights),
        },
    )
    return artifact, hist
