"""Cohort ingestion, normalization, and prediction-pair construction.

Raw CSVs hold one row per visit (patient_id, age, one column per feature,
blanks for missing scores). Features are normalized to [0, 1] and oriented
so that larger always means more severe. Prediction pairs select, per
patient, one (input visits, target visit) split with the target a fixed
time delay after the last input visit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import Dataset, PatientSeries, Visit


class DataError(Exception):
    """Malformed cohort file or inconsistent dataset."""


@dataclass(frozen=True)
class FeatureSpec:
    """How one raw clinical score maps onto the normalized [0, 1] scale."""

    name: str
    raw_max: float
    direction: str = "increasing"  # w.r.t. severity

    def __post_init__(self):
        if self.raw_max <= 0:
            raise ValueError(f"{self.name}: raw_max must be positive")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError(f"{self.name}: direction must be increasing|decreasing")

    def normalize(self, raw: float) -> float:
        v = raw / self.raw_max
        return 1.0 - v if self.direction == "decreasing" else v

    def denormalize(self, v: float) -> float:
        raw = 1.0 - v if self.direction == "decreasing" else v
        return raw * self.raw_max


@dataclass(frozen=True)
class PredictionPair:
    """One supervised example: early visits in, one later feature value out."""

    patient_id: str
    input_visits: tuple
    target_age: float
    target_value: float
    target_feature_index: int
    delta_t: float

    def __post_init__(self):
        object.__setattr__(self, "input_visits", tuple(self.input_visits))
        last_in = self.input_visits[-1].age
        if any(v.age >= self.target_age for v in self.input_visits):
            raise ValueError("input visits must precede the target age")
        if not 0.0 <= self.target_value <= 1.0:
            raise ValueError("target value must be normalized")
        # the realized gap may deviate from the nominal delta_t by the split
        # tolerance; anything beyond a year signals a construction bug
        if abs(self.target_age - (last_in + self.delta_t)) > 1.0:
            raise ValueError("target age inconsistent with delta_t")


@dataclass(frozen=True)
class SplitResult:
    """Prediction pairs plus the patients that had no admissible split."""

    pairs: tuple
    discarded_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "discarded_ids", tuple(self.discarded_ids))
        kept = {p.patient_id for p in self.pairs}
        if kept & set(self.discarded_ids):
            raise ValueError("a patient cannot be both kept and discarded")

    def to_manifest(self) -> dict:
        return {
            "version": 1,
            "pairs": [
                {
                    "patient_id": p.patient_id,
                    "n_input_visits": len(p.input_visits),
                    "last_input_age": p.input_visits[-1].age,
                    "target_age": p.target_age,
                    "target_feature_index": p.target_feature_index,
                    "delta_t": p.delta_t,
                }
                for p in self.pairs
            ],
            "discarded_ids": list(self.discarded_ids),
        }


def load_dataset(path, specs) -> Dataset:
    """Read a cohort CSV and return a normalized Dataset.

    Expected columns: patient_id, age, then one column per FeatureSpec.
    Blank cells mark missing scores. Raises DataError (with the offending
    row number) on unknown columns, non-numeric ages, or out-of-range values.
    """
    df = pd.read_csv(path, dtype={"patient_id": str})
    expected = {"patient_id", "age"} | {s.name for s in specs}
    unknown = set(df.columns) - expected
    if unknown:
        raise DataError(f"unknown column(s): {sorted(unknown)}")
    missing = expected - set(df.columns)
    if missing:
        raise DataError(f"missing column(s): {sorted(missing)}")

    ages = pd.to_numeric(df["age"], errors="coerce")
    bad = ages.isna() & df["age"].notna() | df["age"].isna()
    if bad.any():
        row = int(np.flatnonzero(bad)[0]) + 2  # 1-based, plus header
        raise DataError(f"row {row}: non-numeric or missing age")

    for spec in specs:
        col = pd.to_numeric(df[spec.name], errors="coerce")
        observed = df[spec.name].notna()
        out = observed & ((col < 0) | (col > spec.raw_max) | col.isna())
        if out.any():
            row = int(np.flatnonzero(out)[0]) + 2
            raise DataError(
                f"row {row}: {spec.name} outside [0, {spec.raw_max}]"
            )

    patients = []
    for pid, grp in df.groupby("patient_id", sort=True):
        grp = grp.sort_values("age")
        visits = []
        for _, row in grp.iterrows():
            values = np.zeros(len(specs))
            mask = np.zeros(len(specs), dtype=bool)
            for k, spec in enumerate(specs):
                raw = row[spec.name]
                if pd.notna(raw):
                    values[k] = spec.normalize(float(raw))
                    mask[k] = True
            visits.append(Visit(age=float(row["age"]), values=values, mask=mask))
        patients.append(PatientSeries(id=str(pid), visits=visits))

    return Dataset(
        patients=patients,
        feature_names=[s.name for s in specs],
        feature_meta=[(s.raw_max, s.direction) for s in specs],
    )


def save_dataset(ds: Dataset, path):
    """Write a Dataset back to the cohort CSV format (normalized values are
    denormalized through feature_meta when present, else written as-is)."""
    specs = _specs_from_meta(ds)
    rows = []
    for p in ds.patients:
        for v in p.visits:
            row = {"patient_id": p.id, "age": v.age}
            for k, name in enumerate(ds.feature_names):
                if v.mask[k]:
                    val = v.values[k]
                    row[name] = specs[k].denormalize(val) if specs[k] else val
                else:
                    row[name] = np.nan
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)


def _specs_from_meta(ds: Dataset):
    if len(ds.feature_meta) != len(ds.feature_names):
        return [None] * len(ds.feature_names)
    return [
        FeatureSpec(name, raw_max, direction)
        for name, (raw_max, direction) in zip(ds.feature_names, ds.feature_meta)
    ]


def admissible_splits(series: PatientSeries, delta_t, tolerance, feature_index):
    """Enumerate all (k, p_star) visit-index pairs whose age gap falls within
    [delta_t - tolerance, delta_t + tolerance] and whose target feature is
    observed at p_star."""
    ages = series.ages
    out = []
    for k in range(len(ages)):
        for p_star in range(k + 1, len(ages)):
            gap = ages[p_star] - ages[k]
            if abs(gap - delta_t) <= tolerance and series.visits[p_star].mask[feature_index]:
                out.append((k, p_star))
    return out


def split_delta_t(ds: Dataset, delta_t, tolerance, feature_index, rng) -> SplitResult:
    """Select one prediction pair per patient, discarding patients without an
    admissible split. When several splits exist one is chosen uniformly at
    random; visits between the last input and the target are dropped."""
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    pairs, discarded = [], []
    for series in ds.patients:
        options = admissible_splits(series, delta_t, tolerance, feature_index)
        if not options:
            discarded.append(series.id)
            continue
        k, p_star = options[rng.integers(len(options))]
        target = series.visits[p_star]
        inputs = [v for v in series.visits if v.age <= series.visits[k].age]
        pairs.append(
            PredictionPair(
                patient_id=series.id,
                input_visits=inputs,
                target_age=target.age,
                target_value=float(target.values[feature_index]),
                target_feature_index=feature_index,
                delta_t=delta_t,
            )
        )
    return SplitResult(pairs=pairs, discarded_ids=discarded)


@dataclass(frozen=True)
class PartitionScheme:
    """Patient-level partition fractions applied to the ΔT-eligible subjects.

    Subjects already discarded by the ΔT rule always land in the estimation
    set; of the rest, floor(fraction * n) go to test and validation and the
    remainder joins the estimation set.
    """

    test_fraction: float
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.test_fraction < 0 or self.validation_fraction < 0:
            raise ValueError("fractions must be non-negative")
        if self.test_fraction + self.validation_fraction > 1.0 + 1e-12:
            raise ValueError("fractions must sum to at most 1")


def partition(ds: Dataset, scheme: PartitionScheme, discarded_ids, rng):
    """Split a cohort into (estimation, test, validation) datasets.

    discarded_ids are the subjects with no admissible ΔT split; they are
    forced into the estimation set. Eligible subjects are shuffled and dealt
    to test then validation by floored fractions, remainder to estimation.
    """
    discarded = set(discarded_ids)
    eligible = [p for p in ds.patients if p.id not in discarded]
    order = rng.permutation(len(eligible))
    n_test = int(np.floor(scheme.test_fraction * len(eligible)))
    n_val = int(np.floor(scheme.validation_fraction * len(eligible)))
    test_ids = {eligible[i].id for i in order[:n_test]}
    val_ids = {eligible[i].id for i in order[n_test : n_test + n_val]}

    def subset(pred):
        return Dataset(
            patients=[p for p in ds.patients if pred(p.id)],
            feature_names=ds.feature_names,
            feature_meta=ds.feature_meta,
        )

    estimation = subset(lambda i: i in discarded or (i not in test_ids and i not in val_ids))
    test = subset(lambda i: i in test_ids)
    validation = subset(lambda i: i in val_ids)
    if len(test) == 0:
        raise DataError("partition produced an empty test set")
    return estimation, test, validation


SIMULATED_ID_PREFIX = "sim-"


def strict_simulated_training_guard(training: Dataset, estimation_ids) -> bool:
    """True iff the training cohort is purely simulated: every id carries the
    simulated prefix and no estimation-set id leaks in."""
    est = set(estimation_ids)
    for p in training.patients:
        if not p.id.startswith(SIMULATED_ID_PREFIX):
            return False
        if p.id in est:
            return False
    return True


def write_manifest(result: SplitResult, path):
    with open(path, "w") as fh:
        json.dump(result.to_manifest(), fh, indent=2)
