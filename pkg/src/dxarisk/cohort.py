"""Participant records, diabetes labeling, preprocessing and splitting.

Raw cohorts are held as lists of :class:`SubjectRecord`; once labeled, data
moves into the dense :class:`LabeledDataset` used by every model.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

ID_COLUMNS = ("subject_id", "sex", "age", "visit")
SEXES = ("male", "female")
VISITS = ("baseline", "followup")

HBA1C_THRESHOLD = 7.0  # percent, inclusive
GLUCOSE_THRESHOLD = 126.0  # mg/dL, inclusive
CRITERION_FIELDS = ("self_reported_t2dm", "hba1c", "fasting_glucose", "antidiabetic_medication")
FLAG_FIELDS = ("self_reported_t2dm", "antidiabetic_medication")

CLINICAL_FEATURES = (
    "hba1c",
    "fasting_glucose",
    "self_reported_t2dm",
    "antidiabetic_medication",
    "ldl",
    "hdl",
)

# name -> (male mean, male sd, female mean, female sd); grams, cm^2, g/cm^2, unitless scores
DXA_DISTRIBUTIONS: dict[str, tuple[float, float, float, float]] = {
    "android_fat_mass": (2600.0, 900.0, 2400.0, 850.0),
    "gynoid_fat_mass": (4200.0, 1200.0, 5600.0, 1500.0),
    "vat_mass": (1100.0, 420.0, 750.0, 320.0),
    "vat_volume": (1180.0, 450.0, 800.0, 340.0),
    "total_fat_mass": (27000.0, 7500.0, 31000.0, 8000.0),
    "total_lean_mass": (56000.0, 7000.0, 41000.0, 5500.0),
    "total_fat_free_mass": (59000.0, 7300.0, 43500.0, 5700.0),
    "trunk_fat_mass": (14500.0, 4200.0, 15000.0, 4300.0),
    "trunk_lean_mass": (27000.0, 3500.0, 20000.0, 2800.0),
    "arms_fat_mass": (2900.0, 900.0, 3700.0, 1100.0),
    "arms_lean_mass": (7000.0, 1100.0, 4600.0, 800.0),
    "legs_fat_mass": (8500.0, 2400.0, 11000.0, 2900.0),
    "legs_lean_mass": (19000.0, 2600.0, 14000.0, 2100.0),
    "total_area": (2300.0, 180.0, 2000.0, 160.0),
    "l1_bmd": (1.02, 0.13, 0.98, 0.13),
    "l2_bmd": (1.08, 0.14, 1.04, 0.14),
    "l3_bmd": (1.12, 0.15, 1.08, 0.14),
    "l4_bmd": (1.11, 0.15, 1.06, 0.15),
    "neck_bmd": (0.92, 0.13, 0.85, 0.12),
    "troch_bmd": (0.80, 0.12, 0.70, 0.11),
    "ward_bmd": (0.78, 0.14, 0.72, 0.14),
    "shaft_bmd": (1.15, 0.15, 0.98, 0.14),
    "ward_bmc": (0.95, 0.20, 0.80, 0.18),
    "spine_t_score": (-0.4, 1.2, -0.5, 1.2),
    "neck_t_score": (-0.5, 1.0, -0.7, 1.0),
    "troch_t_score": (-0.3, 1.0, -0.6, 1.0),
    "ward_t_score": (-0.8, 1.1, -1.0, 1.1),
    "shaft_t_score": (-0.2, 1.0, -0.4, 1.0),
    "neck_z_score": (0.0, 1.0, 0.0, 1.0),
    "troch_z_score": (0.0, 1.0, 0.0, 1.0),
    "ward_z_score": (0.0, 1.0, 0.0, 1.0),
    "shaft_z_score": (0.0, 1.0, 0.0, 1.0),
    "l1_width": (4.3, 0.35, 3.8, 0.30),
}
CLINICAL_DISTRIBUTIONS: dict[str, tuple[float, float, float, float]] = {
    "hba1c": (5.5, 0.45, 5.4, 0.42),
    "fasting_glucose": (95.0, 10.0, 92.0, 9.5),
    "ldl": (120.0, 32.0, 115.0, 30.0),
    "hdl": (44.0, 10.0, 54.0, 12.0),
}
DXA_FEATURES = tuple(DXA_DISTRIBUTIONS)
SCORE_SUFFIXES = ("_t_score", "_z_score")

# DXA shifts for cases, in per-sex SD units
PLANTED_DXA_EFFECTS = {
    "vat_mass": 1.0,
    "vat_volume": 1.0,
    "ward_bmd": -0.3,
    "troch_bmd": -0.3,
}
# baseline glycemia of future cases; see README "Synthetic cohort"
DEFAULT_EFFECT_SIZES = {**PLANTED_DXA_EFFECTS, "hba1c": 1.2, "fasting_glucose": 1.2}
AGE_RANGE = (25, 84)


class CohortError(ValueError):
    """Invalid cohort input or an impossible preprocessing request."""


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sex: str
    age: int
    visit: str
    clinical: Mapping[str, float | None] = field(default_factory=dict)
    dxa: Mapping[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        if not self.subject_id:
            raise CohortError("subject_id must be non-empty")
        if self.sex not in SEXES:
            raise CohortError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.visit not in VISITS:
            raise CohortError(f"visit must be one of {VISITS}, got {self.visit!r}")
        if self.age < 0:
            raise CohortError(f"{self.subject_id}: negative age")
        for name, value in self.dxa.items():
            if value is None or math.isnan(value):
                continue
            if name.endswith("_bmd") and value <= 0:
                raise CohortError(f"{self.subject_id}: {name} must be > 0")
            if name.endswith(("_mass", "_area", "_volume", "_bmc")) and value < 0:
                raise CohortError(f"{self.subject_id}: {name} must be >= 0")

    def get(self, name: str) -> float | None:
        if name in self.clinical:
            return self.clinical[name]
        return self.dxa.get(name)

    def values(self) -> dict[str, float | None]:
        return {**self.clinical, **self.dxa}


@dataclass
class RawCohort:
    records: list[SubjectRecord]
    feature_names: list[str]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        known = set(self.feature_names)
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.visit)
            if key in seen:
                raise CohortError(f"duplicate record {key}")
            seen.add(key)
            extra = (set(r.clinical) | set(r.dxa)) - known
            if extra:
                raise CohortError(f"{r.subject_id}: unknown features {sorted(extra)}")

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([_nan(r.get(name)) for r in self.records], dtype=float)

    def missing_fraction(self) -> dict[str, float]:
        if not self.records:
            return {n: 0.0 for n in self.feature_names}
        return {n: float(np.isnan(self.column(n)).mean()) for n in self.feature_names}


@dataclass
class LabeledDataset:
    matrix: np.ndarray
    labels: np.ndarray
    feature_names: list[str]
    subject_ids: list[str]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        n = len(self.labels)
        if self.matrix.ndim != 2 or self.matrix.shape != (n, len(self.feature_names)):
            raise CohortError(f"matrix shape {self.matrix.shape} inconsistent with {n} labels and {len(self.feature_names)} features")
        if len(self.subject_ids) != n:
            raise CohortError("subject_ids length mismatch")
        if np.isnan(self.matrix).any():
            raise CohortError("LabeledDataset matrix contains missing values")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise CohortError("labels must be 0/1")

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self) -> tuple[int, int]:
        n_pos = int(self.labels.sum())
        return len(self.labels) - n_pos, n_pos

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.matrix[index],
            self.labels[index],
            list(self.feature_names),
            [self.subject_ids[i] for i in np.arange(len(self))[index]],
            list(self.provenance),
        )

    def select_features(self, names: Sequence[str]) -> "LabeledDataset":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise CohortError(f"unknown features {missing}")
        cols = [self.feature_names.index(n) for n in names]
        return replace(self, matrix=self.matrix[:, cols], feature_names=list(names), provenance=list(self.provenance))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "label", *self.feature_names])
            for sid, y, row in zip(self.subject_ids, self.labels, self.matrix):
                w.writerow([sid, int(y), *(_fmt(v) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "LabeledDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["subject_id", "label"]:
            raise CohortError(f"{path}: expected header starting with subject_id,label")
        names = rows[0][2:]
        body = rows[1:]
        matrix = np.array([[float(v) for v in r[2:]] for r in body], dtype=float).reshape(len(body), len(names))
        return cls(matrix, [int(r[1]) for r in body], names, [r[0] for r in body])


@dataclass(frozen=True)
class SyntheticSpec:
    n_male_control: int = 579
    n_male_case: int = 146
    n_female_control: int = 524
    n_female_case: int = 133
    effect_sizes: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_EFFECT_SIZES))
    missingness_rate: float = 0.05
    sparse_columns: Mapping[str, float] = field(default_factory=lambda: {"shaft_z_score": 0.6})
    seed: int = 2024

    def __post_init__(self):
        counts = (self.n_male_control, self.n_male_case, self.n_female_control, self.n_female_case)
        if min(counts) < 0:
            raise CohortError("synthetic counts must be >= 0")
        if not 0 <= self.missingness_rate < 0.9:
            raise CohortError("missingness_rate must be in [0, 0.9)")
        unknown = set(self.effect_sizes) - set(DXA_DISTRIBUTIONS) - set(CLINICAL_DISTRIBUTIONS)
        if unknown:
            raise CohortError(f"effect sizes for unknown features {sorted(unknown)}")

    @classmethod
    def headline_totals(cls, **overrides) -> "SyntheticSpec":
        """287 cases / 1,095 controls (the cohort-level totals) split by sex share."""
        return cls(n_male_control=575, n_male_case=150, n_female_control=520, n_female_case=137, **overrides)

    @property
    def n_cases(self) -> int:
        return self.n_male_case + self.n_female_case

    @property
    def n_total(self) -> int:
        return self.n_male_control + self.n_male_case + self.n_female_control + self.n_female_case


# ---------------------------------------------------------------- helpers


def _nan(v):
    return np.nan if v is None else float(v)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def default_schema() -> tuple[tuple[str, ...], tuple[str, ...]]:
    from .features import ENGINEERED_NAMES

    return CLINICAL_FEATURES, DXA_FEATURES + ENGINEERED_NAMES


def _split_groups(names: Sequence[str], clinical: Sequence[str]):
    cl = set(clinical)
    return [n for n in names if n in cl], [n for n in names if n not in cl]


# ---------------------------------------------------------------- I/O


def load_cohort(path, clinical: Sequence[str] | None = None, dxa: Sequence[str] | None = None) -> RawCohort:
    """Parse a cohort CSV (UTF-8, header row, empty cell = missing)."""
    path = Path(path)
    default_clinical, default_dxa = default_schema()
    clinical = tuple(clinical if clinical is not None else default_clinical)
    dxa = tuple(dxa if dxa is not None else default_dxa)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CohortError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CohortError(f"{path}: empty file") from None
    missing_ids = [c for c in ID_COLUMNS if c not in header]
    if missing_ids:
        raise CohortError(f"{path}: header missing columns {missing_ids}")
    known = set(clinical) | set(dxa)
    features = [c for c in header if c not in ID_COLUMNS]
    unknown = [c for c in features if c not in known]
    if unknown:
        raise CohortError(f"{path}: header has columns not in schema: {unknown}")
    col = {c: i for i, c in enumerate(header)}
    records = []
    for rownum, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise CohortError(f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}")
        values = {}
        for name in features:
            cell = row[col[name]].strip()
            if cell == "":
                values[name] = None
                continue
            try:
                values[name] = float(cell)
            except ValueError:
                raise CohortError(f"{path}: non-numeric value {cell!r} at row {rownum}, column {name}") from None
        try:
            age = int(float(row[col["age"]]))
        except ValueError:
            raise CohortError(f"{path}: non-numeric value {row[col['age']]!r} at row {rownum}, column age") from None
        records.append(
            SubjectRecord(
                subject_id=row[col["subject_id"]],
                sex=row[col["sex"]],
                age=age,
                visit=row[col["visit"]],
                clinical={k: v for k, v in values.items() if k in clinical},
                dxa={k: v for k, v in values.items() if k not in clinical},
            )
        )
    # file name and content hash rather than the full path, so a run directory can move
    prov = {"step": "load", "source": path.name, "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
            "rows": len(records)}
    return RawCohort(records, features, [prov])


def save_cohort(cohort: RawCohort, path, sidecar: bool = True) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ID_COLUMNS, *cohort.feature_names])
        for r in cohort.records:
            vals = r.values()
            w.writerow([r.subject_id, r.sex, r.age, r.visit, *(_fmt(vals.get(n)) for n in cohort.feature_names)])
    if sidecar:
        path.with_suffix(".provenance.json").write_text(json.dumps(cohort.provenance, indent=2, sort_keys=True))


# ---------------------------------------------------------------- labeling


def label_diabetes(record: SubjectRecord) -> int | None:
    """1 if any diabetic criterion holds, 0 if none do, None if unlabelable.

    Missing criterion fields count as not satisfied; a record with all four
    missing cannot be labeled.
    """
    vals = [record.get(f) for f in CRITERION_FIELDS]
    if all(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
        return None
    self_rep, hba1c, glucose, meds = (None if v is None or math.isnan(v) else v for v in vals)
    if self_rep is not None and self_rep >= 0.5:
        return 1
    if meds is not None and meds >= 0.5:
        return 1
    if hba1c is not None and hba1c >= HBA1C_THRESHOLD:
        return 1
    if glucose is not None and glucose >= GLUCOSE_THRESHOLD:
        return 1
    return 0


# ---------------------------------------------------------------- preprocessing


def preprocess(cohort: RawCohort, sparse_threshold: float = 0.5) -> RawCohort:
    """Drop sparse columns, forward-fill in (subject_id, visit) order, median-fill leading gaps."""
    if not 0 < sparse_threshold <= 1:
        raise CohortError("sparse_threshold must be in (0, 1]")
    fractions = cohort.missing_fraction()
    dropped = [n for n in cohort.feature_names if fractions[n] > sparse_threshold]
    kept = [n for n in cohort.feature_names if n not in dropped]
    if not kept:
        raise CohortError("every feature column exceeds the missingness threshold")
    order = sorted(range(len(cohort.records)), key=lambda i: (cohort.records[i].subject_id, cohort.records[i].visit))
    records = [cohort.records[i] for i in order]
    filled = {}
    ffill_counts, median_counts = {}, {}
    for name in kept:
        col = np.array([_nan(r.get(name)) for r in records], dtype=float)
        observed = col[~np.isnan(col)]
        n_ffill = n_median = 0
        last = np.nan
        for i, v in enumerate(col):
            if np.isnan(v):
                if not np.isnan(last):
                    col[i] = last
                    n_ffill += 1
            else:
                last = v
        if np.isnan(col).any():
            if observed.size == 0:
                raise CohortError(f"column {name} entirely missing after drop phase")
            med = float(np.median(observed))
            n_median = int(np.isnan(col).sum())
            col[np.isnan(col)] = med
        filled[name] = col
        ffill_counts[name] = n_ffill
        median_counts[name] = n_median
    clinical_names = {n for r in cohort.records for n in r.clinical}
    out = []
    for i, r in enumerate(records):
        clin = {n: float(filled[n][i]) for n in kept if n in clinical_names}
        dxa = {n: float(filled[n][i]) for n in kept if n not in clinical_names}
        out.append(SubjectRecord(r.subject_id, r.sex, r.age, r.visit, clin, dxa))
    step = {
        "step": "preprocess",
        "sparse_threshold": sparse_threshold,
        "dropped_columns": dropped,
        "forward_filled": {k: v for k, v in ffill_counts.items() if v},
        "median_filled": {k: v for k, v in median_counts.items() if v},
    }
    return RawCohort(out, kept, [*cohort.provenance, step])


# ---------------------------------------------------------------- problem modeling


def link_outcomes(
    baseline: RawCohort,
    followup: RawCohort,
    age_range: tuple[int, int] = AGE_RANGE,
    exclude: Sequence[str] = FLAG_FIELDS,
) -> LabeledDataset:
    """Baseline features labeled by the follow-up diabetes status.

    The age filter is applied to the baseline visit. Criterion flags are kept
    out of the feature matrix.
    """
    follow = {r.subject_id: r for r in followup.records}
    names = [n for n in baseline.feature_names if n not in exclude]
    rows, labels, ids = [], [], []
    excluded = {"age": 0, "no_followup": 0, "unlabelable": 0}
    for r in sorted(baseline.records, key=lambda r: r.subject_id):
        if not age_range[0] <= r.age <= age_range[1]:
            excluded["age"] += 1
            continue
        f = follow.get(r.subject_id)
        if f is None:
            excluded["no_followup"] += 1
            continue
        y = label_diabetes(f)
        if y is None:
            excluded["unlabelable"] += 1
            continue
        rows.append([float(r.age), 1.0 if r.sex == "male" else 0.0, *(_nan(r.get(n)) for n in names)])
        labels.append(y)
        ids.append(r.subject_id)
    if not rows:
        raise CohortError("no subjects could be linked to a follow-up outcome")
    matrix = np.array(rows, dtype=float)
    if np.isnan(matrix).any():
        raise CohortError("baseline cohort still has missing values; run preprocess first")
    step = {"step": "link_outcomes", "age_range": list(age_range), "excluded": excluded, "linked": len(rows)}
    return LabeledDataset(matrix, labels, ["age", "sex_male", *names], ids, [*baseline.provenance, step])


def stratified_split(data: LabeledDataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0 < test_fraction < 1:
        raise CohortError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in (0, 1):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size < 2:
            raise CohortError(f"class {cls} has fewer than 2 members")
        n_test = int(math.floor(idx.size * test_fraction + 0.5))
        n_test = min(max(n_test, 1), idx.size - 1)
        test_idx.extend(rng.permutation(idx)[:n_test].tolist())
    mask = np.zeros(len(data), dtype=bool)
    mask[test_idx] = True
    step = {"step": "stratified_split", "test_fraction": test_fraction, "seed": seed}
    train, test = data.subset(~mask), data.subset(mask)
    train.provenance.append({**step, "part": "train"})
    test.provenance.append({**step, "part": "test"})
    return train, test


# ---------------------------------------------------------------- synthetic data


def derive_seed(seed: int, *labels) -> int:
    h = hashlib.sha256(repr((int(seed), *labels)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def generate_synthetic_cohort(spec: SyntheticSpec = SyntheticSpec()) -> tuple[RawCohort, RawCohort]:
    """Draw a baseline and follow-up cohort with planted case/control shifts.

    Each feature is drawn independently from the per-sex normal in
    ``DXA_DISTRIBUTIONS`` / ``CLINICAL_DISTRIBUTIONS``; cases get
    ``effect_sizes[name]`` standard deviations added at baseline. Masses are
    floored at 0 and BMD at 0.05. Missingness is injected completely at random
    into baseline cells and into follow-up non-criterion cells.
    """
    rng = np.random.default_rng(spec.seed)
    groups = [
        ("male", 0, spec.n_male_control),
        ("male", 1, spec.n_male_case),
        ("female", 0, spec.n_female_control),
        ("female", 1, spec.n_female_case),
    ]
    subjects = [(sex, case) for sex, case, n in groups for _ in range(n)]
    order = rng.permutation(len(subjects))
    subjects = [subjects[i] for i in order]
    width = max(4, len(str(len(subjects))))
    cont = {**CLINICAL_DISTRIBUTIONS, **DXA_DISTRIBUTIONS}
    feature_names = [*CLINICAL_FEATURES, *DXA_FEATURES]

    baseline, followup = [], []
    for i, (sex, case) in enumerate(subjects):
        sid = f"S{i + 1:0{width}d}"
        age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
        base = {}
        for name, (mm, ms, fm, fs) in cont.items():
            mu, sd = (mm, ms) if sex == "male" else (fm, fs)
            shift = spec.effect_sizes.get(name, 0.0) if case else 0.0
            base[name] = _physical(name, mu + sd * (shift + rng.standard_normal()))
        base["self_reported_t2dm"] = 0.0
        base["antidiabetic_medication"] = 0.0
        # baseline glycemia stays below the diagnostic thresholds
        base["hba1c"] = min(base["hba1c"], HBA1C_THRESHOLD - 0.1)
        base["fasting_glucose"] = min(base["fasting_glucose"], GLUCOSE_THRESHOLD - 1.0)

        follow = {n: v * (1.0 + 0.02 * rng.standard_normal()) for n, v in base.items() if n in DXA_DISTRIBUTIONS}
        follow = {n: _physical(n, v) for n, v in follow.items()}
        follow["ldl"], follow["hdl"] = base["ldl"], base["hdl"]
        if case:
            follow.update(_case_followup(rng))
        else:
            follow["hba1c"] = float(min(base["hba1c"] + 0.1 * rng.standard_normal(), HBA1C_THRESHOLD - 0.1))
            follow["fasting_glucose"] = float(min(base["fasting_glucose"] + 3.0 * rng.standard_normal(), GLUCOSE_THRESHOLD - 1.0))
            follow["self_reported_t2dm"] = 0.0
            follow["antidiabetic_medication"] = 0.0

        for name in feature_names:
            rate = spec.sparse_columns.get(name, spec.missingness_rate)
            if rate > 0 and rng.random() < rate:
                base[name] = None
            if name not in CRITERION_FIELDS and rate > 0 and rng.random() < rate:
                follow[name] = None

        baseline.append(_record(sid, sex, age, "baseline", base))
        followup.append(_record(sid, sex, age, "followup", follow))

    prov = {
        "step": "generate_synthetic",
        "seed": spec.seed,
        "counts": {"male_control": spec.n_male_control, "male_case": spec.n_male_case,
                   "female_control": spec.n_female_control, "female_case": spec.n_female_case},
        "effect_sizes": dict(spec.effect_sizes),
        "missingness_rate": spec.missingness_rate,
        "sparse_columns": dict(spec.sparse_columns),
    }
    return (
        RawCohort(baseline, list(feature_names), [{**prov, "visit": "baseline"}]),
        RawCohort(followup, list(feature_names), [{**prov, "visit": "followup"}]),
    )


def _physical(name: str, value: float) -> float:
    if name.endswith(SCORE_SUFFIXES):
        return float(value)
    if name.endswith(("_bmd", "_bmc")):
        return float(max(value, 0.05))
    return float(max(value, 0.0))


def _case_followup(rng) -> dict[str, float]:
    """Follow-up criteria for a case: at least one criterion satisfied."""
    out = {
        "hba1c": float(rng.uniform(5.6, 6.9)),
        "fasting_glucose": float(rng.uniform(95.0, 125.0)),
        "self_reported_t2dm": 0.0,
        "antidiabetic_medication": 0.0,
    }
    which = int(rng.integers(4))
    if which == 0:
        out["hba1c"] = float(rng.uniform(7.0, 10.0))
    elif which == 1:
        out["fasting_glucose"] = float(rng.uniform(126.0, 220.0))
    elif which == 2:
        out["self_reported_t2dm"] = 1.0
    else:
        out["antidiabetic_medication"] = 1.0
        out["hba1c"] = float(rng.uniform(6.5, 8.5))
    return out


def _record(sid, sex, age, visit, values) -> SubjectRecord:
    clinical = {k: values.get(k) for k in CLINICAL_FEATURES}
    dxa = {k: values.get(k) for k in DXA_FEATURES}
    return SubjectRecord(sid, sex, age, visit, clinical, dxa)
