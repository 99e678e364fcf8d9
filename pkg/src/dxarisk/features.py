"""Engineered DXA features and train-fitted standardization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .cohort import LabeledDataset, RawCohort, SubjectRecord

EPS = 1e-8
OSTEOPOROSIS_T = -2.5
SPINE_BMD = ("l1_bmd", "l2_bmd", "l3_bmd", "l4_bmd")

ENGINEERED_NAMES = (
    "Central_Obesity_Ratio",
    "Visceral_Adiposity_Index",
    "Muscle_Fat_Ratio",
    "Trunk_Fat_Percentage",
    "FFM_Index",
    "Spine_BMD_Mean",
    "Bone_Health_Composite",
    "Osteoporosis_Risk",
    "Peripheral_Fat_Ratio",
    "BMD_Coefficient_Variation",
)


@dataclass(frozen=True)
class EngineeredFeatures:
    central_obesity_ratio: float | None = None
    visceral_adiposity_index: float | None = None
    muscle_fat_ratio: float | None = None
    trunk_fat_percentage: float | None = None
    ffm_index: float | None = None
    spine_bmd_mean: float | None = None
    bone_health_composite: float | None = None
    osteoporosis_risk: int | None = None
    peripheral_fat_ratio: float | None = None
    bmd_coefficient_variation: float | None = None

    def as_named(self) -> dict[str, float | None]:
        """Keyed by the report column names (``Central_Obesity_Ratio`` ...)."""
        return dict(zip(ENGINEERED_NAMES, asdict(self).values()))


def _present(v) -> bool:
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def _ratio(num, den):
    if not (_present(num) and _present(den)):
        return None
    return num / (den + EPS)


def _available(values) -> list[float]:
    return [float(v) for v in values if _present(v)]


def engineer_values(v: Mapping[str, float | None]) -> EngineeredFeatures:
    """The ten engineered features from a flat name -> value mapping.

    Ratio features need every input; the averaging features (spine BMD mean,
    T-score composite, osteoporosis count, BMD CV) use whatever is available
    and go missing only when nothing is.
    """
    g = v.get
    trunk_pct = _ratio(g("trunk_fat_mass"), g("total_fat_mass"))
    ffm = g("total_fat_free_mass")
    area = g("total_area")
    ffm_index = ffm / math.sqrt(area + EPS) if _present(ffm) and _present(area) else None
    arms, legs = g("arms_fat_mass"), g("legs_fat_mass")
    peripheral = _ratio(arms + legs, g("trunk_fat_mass")) if _present(arms) and _present(legs) else None

    spine = _available(g(n) for n in SPINE_BMD)
    tscores = _available(val for name, val in v.items() if name.endswith("_t_score"))
    bmds = _available(val for name, val in v.items() if name.endswith("_bmd"))
    if bmds:
        mu = sum(bmds) / len(bmds)
        sigma = math.sqrt(sum((b - mu) ** 2 for b in bmds) / len(bmds))
        cv = sigma / (mu + EPS)
    else:
        cv = None

    return EngineeredFeatures(
        central_obesity_ratio=_ratio(g("android_fat_mass"), g("gynoid_fat_mass")),
        visceral_adiposity_index=_ratio(g("vat_mass"), g("total_fat_mass")),
        muscle_fat_ratio=_ratio(g("total_lean_mass"), g("total_fat_mass")),
        trunk_fat_percentage=None if trunk_pct is None else trunk_pct * 100.0,
        ffm_index=ffm_index,
        spine_bmd_mean=sum(spine) / len(spine) if spine else None,
        bone_health_composite=sum(tscores) / len(tscores) if tscores else None,
        osteoporosis_risk=sum(1 for t in tscores if t < OSTEOPOROSIS_T) if tscores else None,
        peripheral_fat_ratio=peripheral,
        bmd_coefficient_variation=cv,
    )


def engineer(record: SubjectRecord) -> EngineeredFeatures:
    return engineer_values(record.values())


def engineer_matrix(cohort: RawCohort) -> RawCohort:
    """Append the ten engineered columns (as DXA-derived values) to every record."""
    records = []
    for r in cohort.records:
        extra = engineer(r).as_named()
        extra = {k: (None if val is None else float(val)) for k, val in extra.items()}
        records.append(replace(r, dxa={**r.dxa, **extra}))
    names = [n for n in cohort.feature_names if n not in ENGINEERED_NAMES] + list(ENGINEERED_NAMES)
    step = {"step": "engineer", "added": list(ENGINEERED_NAMES)}
    return RawCohort(records, names, [*cohort.provenance, step])


@dataclass
class Standardizer:
    feature_names: list[str]
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # bool per feature; False = passed through untouched
    flagged: list[str] = field(default_factory=list)

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        out = np.array(matrix, dtype=float, copy=True)
        s = self.scaled
        out[:, s] = (out[:, s] - self.mean[s]) / self.std[s]
        return out

    def inverse_transform(self, matrix: np.ndarray) -> np.ndarray:
        out = np.array(matrix, dtype=float, copy=True)
        s = self.scaled
        out[:, s] = out[:, s] * self.std[s] + self.mean[s]
        return out

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "scaled": self.scaled.tolist(),
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(list(d["feature_names"]), np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["scaled"], dtype=bool), list(d.get("flagged", [])))


def fit_standardizer(train: LabeledDataset, passthrough: Sequence[str] = ()) -> Standardizer:
    """Population (1/n) mean/std per column; zero-variance and passthrough columns are left unscaled."""
    if len(train) == 0:
        raise ValueError("cannot fit a standardizer on an empty dataset")
    mean = train.matrix.mean(axis=0)
    std = train.matrix.std(axis=0)
    keep = np.array([n not in passthrough for n in train.feature_names])
    scaled = (std > 0) & keep
    flagged = [n for n, s in zip(train.feature_names, std) if s == 0]
    return Standardizer(list(train.feature_names), mean, np.where(std > 0, std, 1.0), scaled, flagged)


def apply_standardizer(s: Standardizer, data: LabeledDataset) -> LabeledDataset:
    if list(data.feature_names) != list(s.feature_names):
        raise ValueError("feature names differ from the fitted standardizer")
    step = {"step": "standardize", "flagged": list(s.flagged)}
    return replace(data, matrix=s.transform(data.matrix), provenance=[*data.provenance, step])
