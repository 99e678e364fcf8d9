"""Command-line pipeline: one JSON run config, per-stage derived seeds, write-once stage directories.

Layout of a run directory::

    <out>/manifest.json              config hash, seed, tool version
    <out>/<stage>/...                stage outputs
    <out>/<stage>/stage_manifest.json  inputs and outputs with sha256

Every stage reads its inputs from earlier stage directories, so running the
stages one by one gives the same files as ``pipeline``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from . import baselines as bl
from . import cohort as co
from . import evalreport as ev
from . import features as fe
from . import llmeval as llm
from . import resample as rs
from . import selection as se
from . import tabtrans as tt

STAGES = (
    "generate",
    "preprocess",
    "engineer",
    "select",
    "resample",
    "train-tabtrans",
    "train-baselines",
    "eval-llm",
    "evaluate",
    "interpret",
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


class StageError(ValueError):
    """Missing prerequisite or a write-once violation."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class InputPaths:
    baseline: str
    followup: str


@dataclass(frozen=True)
class PreprocessingConfig:
    sparse_threshold: float = 0.5
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.sparse_threshold <= 1:
            raise ValueError("sparse_threshold must be in (0, 1]")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.25
    r_min: float = 0.12
    collinearity_cap: float = 0.85
    pca_variance: float = 0.95
    tsne: bool = True
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.collinearity_cap <= 1:
            raise ValueError("collinearity_cap must be in (0, 1]")


@dataclass(frozen=True)
class ResamplingConfig:
    strategies: Any = "auto"  # "auto" or a list of kinds
    k_neighbors: int | None = None

    def __post_init__(self):
        if self.strategies != "auto":
            if not isinstance(self.strategies, (list, tuple)) or not self.strategies:
                raise ValueError('strategies must be "auto" or a non-empty list')
            bad = [k for k in self.strategies if k not in rs.KINDS]
            if bad:
                raise ValueError(f"unknown strategies {bad}; choose from {list(rs.KINDS)}")

    @property
    def kinds(self) -> tuple[str, ...]:
        return rs.KINDS if self.strategies == "auto" else tuple(self.strategies)


@dataclass(frozen=True)
class BaselinesConfig:
    kinds: tuple[str, ...] = bl.KINDS
    folds: int = 5
    tune_top: int = 3
    vote_top: int = 3
    grids: Mapping[str, Mapping[str, list]] = field(default_factory=lambda: dict(bl.DEFAULT_GRIDS))

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in bl.KINDS]
        if bad:
            raise ValueError(f"unknown baseline kinds {bad}")
        bad = sorted(set(self.grids) - set(bl.KINDS))
        if bad:
            raise ValueError(f"grids for unknown baseline kinds {bad}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.vote_top < 2 and len(self.kinds) >= 2:
            raise ValueError("vote_top must be >= 2")


@dataclass(frozen=True)
class LlmConfig:
    mock: str | None = "heuristic"  # heuristic | oracle | constant | null
    strategy: str = "few_shot"
    examples_per_class: int = 2
    endpoints: tuple[llm.LlmEndpoint, ...] = ()

    def __post_init__(self):
        if self.mock not in (None, "heuristic", "oracle", "constant"):
            raise ValueError("mock must be heuristic, oracle, constant or null")
        if self.strategy not in ("few_shot", "comparative"):
            raise ValueError("strategy must be few_shot or comparative")


@dataclass(frozen=True)
class EvaluationConfig:
    repeats: int = 10
    tier_high: float = ev.TIER_HIGH
    tier_moderate: float = ev.TIER_MODERATE
    threshold: float = 0.5

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0 <= self.tier_moderate <= self.tier_high <= 1:
            raise ValueError("need 0 <= tier_moderate <= tier_high <= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 2024
    input: InputPaths | None = None
    synthetic: co.SyntheticSpec | None = field(default_factory=co.SyntheticSpec)
    preprocessing: PreprocessingConfig = PreprocessingConfig()
    selection: SelectionConfig = SelectionConfig()
    resampling: ResamplingConfig = ResamplingConfig()
    augmentation: rs.AugmentConfig = rs.AugmentConfig()
    tabtrans: tt.TabTransConfig = tt.TabTransConfig()
    baselines: BaselinesConfig = BaselinesConfig()
    llm: LlmConfig = LlmConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def hash(self) -> str:
        return ev.config_hash(self.to_dict())


_SECTIONS: dict[str, type] = {
    "input": InputPaths,
    "synthetic": co.SyntheticSpec,
    "preprocessing": PreprocessingConfig,
    "selection": SelectionConfig,
    "resampling": ResamplingConfig,
    "augmentation": rs.AugmentConfig,
    "tabtrans": tt.TabTransConfig,
    "baselines": BaselinesConfig,
    "llm": LlmConfig,
    "evaluation": EvaluationConfig,
}


def _build_section(name: str, cls: type, raw: Any, problems: list[str]):
    if not isinstance(raw, Mapping):
        problems.append(f"{name}: expected an object")
        return None
    known = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(raw) - known):
        problems.append(f"{name}.{key}: unknown field")
    kwargs = {k: v for k, v in raw.items() if k in known}
    if cls is tt.TabTransConfig and kwargs.get("main_class_weights") is not None:
        kwargs["main_class_weights"] = tuple(kwargs["main_class_weights"])
    if cls is BaselinesConfig and "kinds" in kwargs:
        kwargs["kinds"] = tuple(kwargs["kinds"])
    if cls is LlmConfig and "endpoints" in kwargs:
        eps = []
        for i, e in enumerate(kwargs["endpoints"]):
            try:
                eps.append(llm.LlmEndpoint(**e))
            except (TypeError, ValueError) as exc:
                problems.append(f"llm.endpoints[{i}]: {exc}")
        kwargs["endpoints"] = tuple(eps)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


def config_from_dict(raw: Mapping) -> RunConfig:
    """Validate a JSON document into a :class:`RunConfig`; collects every problem before raising."""
    problems: list[str] = []
    if not isinstance(raw, Mapping):
        raise ConfigError(["config: expected a JSON object"])
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in sorted(set(raw) - top):
        problems.append(f"{key}: unknown field")
    kwargs: dict[str, Any] = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
            problems.append("seed: must be a non-negative integer")
        else:
            kwargs["seed"] = raw["seed"]
    if "out" in raw:
        kwargs["out"] = str(raw["out"])
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            kwargs[name] = _build_section(name, cls, raw[name], problems)
    has_input = raw.get("input") is not None
    has_synth = raw.get("synthetic") is not None
    if has_input and has_synth:
        problems.append("input/synthetic: give exactly one of them")
    if has_input and "synthetic" not in raw:
        kwargs["synthetic"] = None
    if not has_input and "synthetic" in raw and raw["synthetic"] is None:
        problems.append("input/synthetic: give exactly one of them")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: {path} is not valid JSON ({exc})"]) from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------- run directory


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class Run:
    """A run directory bound to one config."""

    def __init__(self, config: RunConfig, out: Path | None = None):
        self.config = config
        self.out = Path(out or config.out)

    def seed(self, stage: str) -> int:
        return co.derive_seed(self.config.seed, stage)

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def need(self, stage: str, name: str) -> Path:
        p = self.dir(stage) / name
        if not p.exists():
            raise StageError(f"missing prerequisite {p} (run the {stage} stage first)")
        return p

    def init(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        top = self.out / "manifest.json"
        doc = {"config_hash": self.config.hash(), "seed": self.config.seed, "tool_version": __version__,
               "config": self.config.to_dict()}
        if top.exists():
            prior = json.loads(top.read_text())
            if prior.get("config_hash") != doc["config_hash"]:
                raise StageError(f"{self.out} belongs to a different config (hash {prior.get('config_hash')})")
            return
        _dump(top, doc)

    def open_stage(self, stage: str) -> Path:
        d = self.dir(stage)
        if d.exists() and any(d.iterdir()):
            raise StageError(f"stage directory {d} already has outputs; stages are write-once")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def close_stage(self, stage: str, inputs: list[Path], extra: Mapping | None = None) -> None:
        d = self.dir(stage)
        outputs = sorted(p for p in d.rglob("*") if p.is_file())
        doc = {
            "stage": stage,
            "seed": self.seed(stage),
            "config_hash": self.config.hash(),
            "inputs": {str(p.relative_to(self.out)): _sha256(p) for p in inputs},
            "outputs": {str(p.relative_to(self.out)): _sha256(p) for p in outputs},
            **(extra or {}),
        }
        _dump(d / "stage_manifest.json", doc)


# ---------------------------------------------------------------- stages


def stage_generate(run: Run) -> None:
    cfg = run.config
    d = run.open_stage("generate")
    if cfg.input is not None:
        base = co.load_cohort(cfg.input.baseline)
        follow = co.load_cohort(cfg.input.followup)
        source = {"input": dataclasses.asdict(cfg.input)}
    else:
        spec = dataclasses.replace(cfg.synthetic, seed=run.seed("generate"))
        base, follow = co.generate_synthetic_cohort(spec)
        source = {"synthetic_seed": spec.seed}
    co.save_cohort(base, d / "baseline.csv")
    co.save_cohort(follow, d / "followup.csv")
    run.close_stage("generate", [], {"source": source, "n_subjects": len(base)})


def stage_preprocess(run: Run) -> None:
    src = run.need("generate", "baseline.csv")
    d = run.open_stage("preprocess")
    base = co.preprocess(co.load_cohort(src), run.config.preprocessing.sparse_threshold)
    co.save_cohort(base, d / "baseline.csv")
    run.close_stage("preprocess", [src])


def stage_engineer(run: Run) -> None:
    src = run.need("preprocess", "baseline.csv")
    follow_src = run.need("generate", "followup.csv")
    d = run.open_stage("engineer")
    cfg = run.config.preprocessing
    base = fe.engineer_matrix(co.load_cohort(src))
    # engineered values that could not be computed get the same fill rules
    base = co.preprocess(base, 1.0)
    data = co.link_outcomes(base, co.load_cohort(follow_src))
    train, test = co.stratified_split(data, cfg.test_fraction, seed=run.seed("engineer"))
    train.to_csv(d / "train.csv")
    test.to_csv(d / "test.csv")
    link = next(p for p in data.provenance if p.get("step") == "link_outcomes")
    run.close_stage("engineer", [src, follow_src], {
        "linked": link["linked"], "excluded": link["excluded"],
        "train_counts": list(train.class_counts), "test_counts": list(test.class_counts),
    })


def stage_select(run: Run) -> None:
    tr_p, te_p = run.need("engineer", "train.csv"), run.need("engineer", "test.csv")
    d = run.open_stage("select")
    cfg = run.config.selection
    train, test = co.LabeledDataset.from_csv(tr_p), co.LabeledDataset.from_csv(te_p)
    std = fe.fit_standardizer(train, passthrough=("sex_male",))
    train_s, test_s = fe.apply_standardizer(std, train), fe.apply_standardizer(std, test)
    result = se.ensemble_select(train_s, cfg.alpha, cfg.r_min, cfg.collinearity_cap)
    result.write_scores_csv(d / "scores.csv")
    _dump(d / "selected.json", {"selected": result.selected, "criteria": result.criteria,
                                "dropped_collinear": [list(x) for x in result.dropped_collinear]})
    _dump(d / "standardizer.json", std.to_dict())
    train_s.select_features(result.selected).to_csv(d / "train.csv")
    test_s.select_features(result.selected).to_csv(d / "test.csv")
    proj = se.pca(train_s.matrix, cfg.pca_variance)
    se.write_projection_csv(d / "pca.csv", train_s.subject_ids, proj, train_s.labels)
    se.write_loadings_csv(d / "pca_loadings.csv", train_s.feature_names, proj)
    extra = {"n_selected": len(result.selected), "pca_components": proj.n_components,
             "pca_explained_variance": proj.explained_variance.tolist()}
    if cfg.tsne:
        emb = se.tsne(train_s.matrix, cfg.tsne_perplexity, cfg.tsne_iterations, seed=run.seed("select") % 2**32)
        se.write_projection_csv(d / "tsne.csv", train_s.subject_ids, emb, train_s.labels)
        extra["tsne_final_kl"] = emb.kl_history[-1] if emb.kl_history else None
        extra["tsne_notes"] = emb.notes
    run.close_stage("select", [tr_p, te_p], extra)


def _strategies(run: Run, stage: str, salt=()) -> list[rs.ResampleStrategy]:
    cfg = run.config.resampling
    seed = co.derive_seed(run.config.seed, stage, *salt)
    return [rs.ResampleStrategy(k, cfg.k_neighbors, seed) for k in cfg.kinds]


def stage_resample(run: Run) -> None:
    src = run.need("select", "train.csv")
    d = run.open_stage("resample")
    train = co.LabeledDataset.from_csv(src)
    best, result, trace = rs.select_best_strategy(train, _strategies(run, "resample"))
    result.data.to_csv(d / "train.csv")
    rs.write_trace(d / "trace.json", trace)
    run.close_stage("resample", [src], {"selected_strategy": best.kind, "k": result.k,
                                        "class_counts": list(result.class_counts)})


def stage_train_tabtrans(run: Run) -> None:
    src = run.need("select", "train.csv")
    std_p = run.need("select", "standardizer.json")
    d = run.open_stage("train-tabtrans")
    train = co.LabeledDataset.from_csv(src)
    seed = run.seed("train-tabtrans")
    cfg = dataclasses.replace(run.config.tabtrans, seed=seed % 2**32)
    aug = dataclasses.replace(run.config.augmentation, seed=co.derive_seed(seed, "augment"))
    cat = {train.feature_names.index("sex_male"): 2} if "sex_male" in train.feature_names else {}
    model = tt.build(cfg, len(train.feature_names), cat)
    std = fe.Standardizer.from_dict(json.loads(std_p.read_text()))
    artifact, hist = tt.train(model, train, cfg, augment=aug, standardizer=std)
    artifact.save(d / "model")
    hist.write_csv(d / "history.csv")
    run.close_stage("train-tabtrans", [src, std_p], {"training": artifact.metrics,
                                                     "n_parameters": model.n_parameters()})


def stage_train_baselines(run: Run) -> None:
    src = run.need("select", "train.csv")
    rs_p = run.need("resample", "train.csv")
    rs_manifest = run.need("resample", "stage_manifest.json")
    d = run.open_stage("train-baselines")
    cfg = run.config.baselines
    seed = run.seed("train-baselines")
    train = co.LabeledDataset.from_csv(src)
    resampled = co.LabeledDataset.from_csv(rs_p)
    kind = json.loads(rs_manifest.read_text())["selected_strategy"]
    cache: dict[int, co.LabeledDataset] = {}

    def prepare(fold: int, part: co.LabeledDataset) -> co.LabeledDataset:
        # resample inside each fold with the strategy chosen on the full training set
        if fold not in cache:
            strat = rs.ResampleStrategy(kind, run.config.resampling.k_neighbors, co.derive_seed(seed, "fold", fold))
            cache[fold] = rs.resample(part, strat).data
        return cache[fold]

    cv = [bl.cross_validate(bl.BaselineSpec(k), train, cfg.folds, seed, prepare) for k in cfg.kinds]
    ranked = sorted(range(len(cv)), key=lambda i: (-cv[i].mean_auc, -cv[i].mean_f1, i))
    tuned: dict[str, bl.CvResult] = {}
    for i in ranked[: cfg.tune_top]:
        k = cfg.kinds[i]
        grid = cfg.grids.get(k) or {}
        if grid:
            _, best_cv, _ = bl.grid_search(bl.BaselineSpec(k), grid, train, seed, cfg.folds, prepare)
            tuned[k] = best_cv
    bl.write_cv_table(cv, d / "cv.csv", tuned)

    models_dir = d / "models"
    for k in cfg.kinds:
        bl.fit(bl.BaselineSpec(k), resampled, seed=co.derive_seed(seed, k)).save(models_dir / k)
    for k, res in tuned.items():
        bl.fit(res.spec, resampled, seed=co.derive_seed(seed, k)).save(models_dir / f"{k}__tuned")
    members = []
    for i in ranked[: cfg.vote_top]:
        k = cfg.kinds[i]
        members.append(f"{k}__tuned" if k in tuned else k)
    scored = [(cfg.kinds[i], cv[i].mean_auc, cv[i].mean_f1) for i in range(len(cv))]
    champion = bl.select_champion(scored) if scored else None
    run.close_stage("train-baselines", [src, rs_p], {
        "resample_strategy": kind,
        "cv": {r.spec.kind: {"auc": r.mean_auc, "f1": r.mean_f1} for r in cv},
        "tuned": {k: {"params": dict(r.spec.hyperparameters), "cv_auc": r.mean_auc} for k, r in tuned.items()},
        "soft_vote_members": members,
        "champion": champion,
    })


def _heuristic_mock(train_raw: co.LabeledDataset, scores_path: Path, selected: list[str]) -> llm.HeuristicMock:
    import csv

    with open(scores_path, newline="", encoding="utf-8") as fh:
        r = {row["feature"]: float(row["r"]) for row in csv.DictReader(fh)}
    idx = [train_raw.feature_names.index(n) for n in selected]
    X = train_raw.matrix[:, idx]
    # weights scaled so a one-SD profile shift moves the logit by about 2 r
    weights = {n: 2.0 * r[n] for n in selected}
    means = dict(zip(selected, X.mean(axis=0).tolist()))
    scales = dict(zip(selected, X.std(axis=0).tolist()))
    return llm.HeuristicMock(means, scales, weights)


def stage_eval_llm(run: Run) -> None:
    raw_tr = run.need("engineer", "train.csv")
    raw_te = run.need("engineer", "test.csv")
    sel_p = run.need("select", "selected.json")
    scores_p = run.need("select", "scores.csv")
    d = run.open_stage("eval-llm")
    cfg = run.config.llm
    seed = run.seed("eval-llm")
    selected = json.loads(sel_p.read_text())["selected"]
    train = co.LabeledDataset.from_csv(raw_tr).select_features(selected)
    test = co.LabeledDataset.from_csv(raw_te).select_features(selected)
    examples = llm.pick_examples(train, cfg.examples_per_class, seed=seed % 2**32)
    spec = llm.PromptSpec(cfg.strategy, few_shot_examples=examples if cfg.strategy == "few_shot" else (),
                          reference_ranges=llm.reference_ranges(train))
    transports: list[tuple[str, llm.Transport, float]] = []
    if cfg.mock == "heuristic":
        transports.append(("llm_mock_heuristic", _heuristic_mock(train, scores_p, selected), 1e9))
    elif cfg.mock == "oracle":
        transports.append(("llm_mock_oracle", llm.OracleMock(dict(zip(test.subject_ids, test.labels.tolist()))), 1e9))
    elif cfg.mock == "constant":
        transports.append(("llm_mock_constant", llm.ConstantMock(0.5), 1e9))
    for ep in cfg.endpoints:
        transports.append((f"llm_{ep.model}", llm.HttpTransport(ep), ep.requests_per_minute))
    rows = []
    summary = {}
    for name, transport, rpm in transports:
        result = llm.evaluate(transport, test, spec, requests_per_minute=rpm)
        result.write_transcript(d / f"transcript_{name}.jsonl")
        for sid, p in zip(result.subject_ids, result.predictions):
            rows.append([name, sid, repr(p.probability), p.risk_class, repr(p.confidence), p.parse_status])
        summary[name] = {"retries": result.retries,
                         "fallbacks": sum(p.parse_status == "fallback" for p in result.predictions)}
    import csv

    with open(d / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_name", "subject_id", "probability", "risk", "confidence", "parse_status"])
        w.writerows(rows)
    run.close_stage("eval-llm", [raw_tr, raw_te, sel_p, scores_p], {"models": summary})


def _llm_predictions(path: Path) -> dict[str, dict[str, float]]:
    import csv

    out: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["model_name"], {})[row["subject_id"]] = float(row["probability"])
    return out


def _collect_predictions(run: Run) -> tuple[co.LabeledDataset, dict[str, np.ndarray], dict[str, float | None], list[Path]]:
    te_p = run.need("select", "test.csv")
    tt_dir = run.need("train-tabtrans", "model")
    bl_manifest = run.need("train-baselines", "stage_manifest.json")
    llm_p = run.need("eval-llm", "predictions.csv")
    test = co.LabeledDataset.from_csv(te_p)
    preds: dict[str, np.ndarray] = {}
    tuned: dict[str, float | None] = {}

    artifact = tt.ModelArtifact.load(tt_dir)
    preds["tabtrans"] = tt.predict_proba(artifact, test)
    tuned["tabtrans"] = None

    info = json.loads(bl_manifest.read_text())
    models_dir = run.dir("train-baselines") / "models"
    for k in run.config.baselines.kinds:
        preds[k] = bl.predict_proba(bl.FittedBaseline.load(models_dir / k), test)
        tuned[k] = None
        if k in info["tuned"]:
            tm = bl.FittedBaseline.load(models_dir / f"{k}__tuned")
            tuned[k] = ev.roc_auc(test.labels, bl.predict_proba(tm, test))
    members = [bl.FittedBaseline.load(models_dir / m) for m in info["soft_vote_members"]]
    if len(members) >= 2:
        preds["soft_vote"] = bl.soft_vote(members, test)
        tuned["soft_vote"] = None

    for name, by_id in _llm_predictions(llm_p).items():
        preds[name] = np.array([by_id[s] for s in test.subject_ids])
        tuned[name] = None
    return test, preds, tuned, [te_p, bl_manifest, llm_p, tt_dir / "manifest.json"]


def _outputs(run: Run, test, preds, tuned, importance=None) -> ev.RunOutputs:
    thr = run.config.evaluation.threshold
    metrics, confusions, rocs, rows = {}, {}, {}, []
    for name, p in preds.items():
        cm, m = ev.evaluate_scores(test.labels, p, thr)
        metrics[name], confusions[name] = m, cm
        rocs[name] = ev.roc_curve(test.labels, p)
        rows.append(ev.comparison_row(name, m, tuned.get(name)))
    manifest = {"config_hash": run.config.hash(), "seed": run.config.seed, "tool_version": __version__,
                "n_test": len(test), "test_counts": list(test.class_counts), "threshold": thr}
    if importance is not None:
        manifest["importance_method"] = importance.method
        manifest["importance_model"] = "tabtrans"
    return ev.RunOutputs(metrics, confusions, rocs, rows, manifest, importance)


def stage_evaluate(run: Run) -> None:
    test, preds, tuned, inputs = _collect_predictions(run)
    d = run.open_stage("evaluate")
    ev.write_report(_outputs(run, test, preds, tuned), d)
    run.close_stage("evaluate", inputs)


def stage_interpret(run: Run) -> None:
    test, preds, tuned, inputs = _collect_predictions(run)
    run.need("evaluate", "metrics.json")
    d = run.open_stage("interpret")
    cfg = run.config.evaluation
    model = tt.ModelArtifact.load(run.dir("train-tabtrans") / "model").model()
    report = ev.permutation_importance(model.predict_proba, test, cfg.repeats, seed=run.seed("interpret") % 2**32)
    ev.tier(report, cfg.tier_high, cfg.tier_moderate)
    ev.write_report(_outputs(run, test, preds, tuned, report), d)
    run.close_stage("interpret", inputs, {"top_features": report.feature_names[:5]})


STAGE_FUNCS: dict[str, Callable[[Run], None]] = {
    "generate": stage_generate,
    "preprocess": stage_preprocess,
    "engineer": stage_engineer,
    "select": stage_select,
    "resample": stage_resample,
    "train-tabtrans": stage_train_tabtrans,
    "train-baselines": stage_train_baselines,
    "eval-llm": stage_eval_llm,
    "evaluate": stage_evaluate,
    "interpret": stage_interpret,
}


def run_subcommand(name: str, config: RunConfig, out: Path | None = None, log=print) -> int:
    """Run one stage (or ``pipeline``) and return the process exit status."""
    if name != "pipeline" and name not in STAGE_FUNCS:
        log(f"error: unknown stage {name!r}; choose from pipeline, {', '.join(STAGES)}")
        return EXIT_VALIDATION
    run = Run(config, out)
    try:
        run.init()
        for stage in STAGES if name == "pipeline" else (name,):
            log(f"[{stage}] running")
            STAGE_FUNCS[stage](run)
    except (ConfigError, StageError, co.CohortError) as exc:
        log(f"error: {exc}")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dxarisk", description="T2DM risk pipeline over DXA and clinical data.")
    p.add_argument("stage_name", nargs="?", help=f"pipeline or one of: {', '.join(STAGES)}")
    p.add_argument("--stage", dest="stage_flag", help="same as the positional stage name")
    p.add_argument("--config", help="run config JSON; defaults are used when omitted")
    p.add_argument("--out", help="run directory (overrides config.out)")
    p.add_argument("--seed", type=int, help="overrides config.seed")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(["seed: must be a non-negative integer"])
            config = dataclasses.replace(config, seed=args.seed)
        if args.out:
            config = dataclasses.replace(config, out=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.stage_name and args.stage_flag and args.stage_name != args.stage_flag:
        print("error: positional stage and --stage disagree", file=sys.stderr)
        return EXIT_VALIDATION
    stage = args.stage_flag or args.stage_name
    if not stage:
        print("error: name a stage (or pipeline)", file=sys.stderr)
        return EXIT_VALIDATION
    return run_subcommand(stage, config, log=lambda m: print(m, file=sys.stderr))


if __name__ == "__main__":
    sys.exit(main())
