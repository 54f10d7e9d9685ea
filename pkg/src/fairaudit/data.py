"""Tabular datasets with protected-feature annotations.

A :class:`TableSchema` describes every feature the audit knows about, which of
them are protected, and which ones the model under audit actually receives.
Loaders return :class:`RawTable` objects whose categorical cells are always
members of the schema vocabulary and which contain no missing cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"

DATA_DIR_ENV = "FAIRAUDIT_DATA_DIR"

_SCHEMA_DIR = Path(__file__).parent / "schemas"

# sha256 of the vendored source files
CHECKSUMS = {
    "adult.data": "5b00264637dbfec36bdeaab5676b0b309ff9eb788d63554ca0a249491c86603d",
    "adult.test": "a2a9044bc167a35b2361efbabec64e89d69ce82d9790d2980119aac5fd7e9c05",
    "compas-scores-two-years.csv": "c451db85908b2f7fef1d83203bedf6b71ecda0d5af468d82ae62178f91d0cc7d",
}


class DataError(ValueError):
    """Raised when a table cannot be loaded or does not match its schema."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    categories: tuple[str, ...] | None = None
    protected: bool = False
    model_input: bool = True
    # numeric only: round decoded values to integers
    integer: bool = False

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise DataError(f"feature {self.name!r}: categorical feature needs categories")
            cats = tuple(str(c) for c in self.categories)
            if len(set(cats)) != len(cats):
                raise DataError(f"feature {self.name!r}: duplicate categories")
            object.__setattr__(self, "categories", cats)
        elif self.categories is not None:
            raise DataError(f"feature {self.name!r}: numeric feature cannot have categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.categories is not None:
            out["categories"] = list(self.categories)
        out["protected"] = self.protected
        out["model_input"] = self.model_input
        if self.integer:
            out["integer"] = True
        return out


@dataclass(frozen=True)
class TableSchema:
    features: tuple[FeatureSpec, ...]
    positive_label: Any
    label_column: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise DataError("schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if self.positive_label is None:
            raise DataError("schema needs a positive_label")

    def __getitem__(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(f.name == name for f in self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def categorical(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.is_categorical]

    @property
    def numeric(self) -> list[FeatureSpec]:
        return [f for f in self.features if not f.is_categorical]

    @property
    def protected(self) -> list[str]:
        return [f.name for f in self.features if f.protected]

    @property
    def model_inputs(self) -> list[str]:
        return [f.name for f in self.features if f.model_input]

    @property
    def withheld(self) -> list[str]:
        """Features present in the data but hidden from the model under audit."""
        return [f.name for f in self.features if not f.model_input]

    def with_withheld(self, names: Iterable[str]) -> "TableSchema":
        """Copy of the schema with ``names`` removed from the model input."""
        names = set(names)
        missing = names - set(self.names)
        if missing:
            raise DataError(f"unknown features: {sorted(missing)}")
        feats = tuple(replace(f, model_input=f.name not in names) for f in self.features)
        return replace(self, features=feats)

    def to_dict(self) -> dict[str, Any]:
        return {
            "positive_label": self.positive_label,
            "label_column": self.label_column,
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TableSchema":
        feats = []
        for fd in d["features"]:
            fd = dict(fd)
            if fd.get("categories") is not None:
                fd["categories"] = tuple(fd["categories"])
            feats.append(FeatureSpec(**fd))
        return cls(tuple(feats), d["positive_label"], d.get("label_column"))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_schema(path: str | os.PathLike) -> TableSchema:
    with open(path) as fh:
        return TableSchema.from_dict(yaml.safe_load(fh))


def save_schema(schema: TableSchema, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(schema.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class RawTable:
    """Rows in schema column order, optional labels, and the number of dropped rows."""

    schema: TableSchema
    rows: pd.DataFrame
    labels: pd.Series | None = None
    dropped: int = 0

    def __post_init__(self):
        rows = self.rows.reset_index(drop=True)
        missing = [n for n in self.schema.names if n not in rows.columns]
        if missing:
            raise DataError(f"rows are missing schema columns {missing}")
        rows = rows[self.schema.names].copy()
        for f in self.schema.features:
            if f.is_categorical:
                rows[f.name] = rows[f.name].astype(str)
                bad = ~rows[f.name].isin(f.categories)
                if bad.any():
                    val = rows.loc[bad, f.name].iloc[0]
                    raise DataError(f"feature {f.name!r}: unknown category {val!r}")
            else:
                rows[f.name] = rows[f.name].astype(float)
        if rows.isna().any().any():
            raise DataError("table contains missing cells")
        object.__setattr__(self, "rows", rows)
        if self.labels is not None:
            labels = pd.Series(self.labels).reset_index(drop=True)
            if len(labels) != len(rows):
                raise DataError(f"{len(labels)} labels for {len(rows)} rows")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def y(self) -> np.ndarray:
        """Ground truth as 0/1 with 1 for the preferred outcome."""
        if self.labels is None:
            raise DataError("table has no labels")
        return (self.labels == self.schema.positive_label).to_numpy().astype(int)

    def take(self, idx: Sequence[int] | np.ndarray) -> "RawTable":
        idx = np.asarray(idx, dtype=int)
        labels = None if self.labels is None else self.labels.iloc[idx]
        return RawTable(self.schema, self.rows.iloc[idx], labels)


def _coerce_frame(
    df: pd.DataFrame,
    schema: TableSchema,
    labels: pd.Series | None,
    unknown: str = "error",
    source: str = "",
) -> RawTable:
    """Drop rows with missing or (under ``unknown='drop'``) out-of-vocabulary cells."""
    if unknown not in ("error", "drop"):
        raise ValueError(f"unknown policy must be 'error' or 'drop', got {unknown!r}")
    df = df.reset_index(drop=True)
    keep = ~df[schema.names].isna().any(axis=1)
    if labels is not None:
        labels = labels.reset_index(drop=True)
        keep &= ~labels.isna()
    n_missing = int((~keep).sum())
    n_oov = 0
    for f in schema.categorical:
        col = df[f.name].astype(str).str.strip()
        df[f.name] = col
        bad = keep & ~col.isin(f.categories)
        if bad.any():
            if unknown == "error":
                val = col[bad].iloc[0]
                raise DataError(f"{source}feature {f.name!r}: unknown category {val!r}")
            n_oov += int(bad.sum())
            keep &= ~bad
    for f in schema.numeric:
        vals = pd.to_numeric(df[f.name], errors="coerce")
        bad = keep & vals.isna()
        n_missing += int(bad.sum())
        keep &= ~bad
        df[f.name] = vals
    dropped = int((~keep).sum())
    if n_oov:
        logger.warning("%sdropped %d rows with unknown categories", source, n_oov)
    if dropped:
        logger.info("%sdropped %d rows (%d missing, %d unknown category)", source, dropped, n_missing, n_oov)
    if not keep.any():
        raise DataError(f"{source}no rows left after dropping {dropped}")
    rows = df.loc[keep, schema.names]
    lab = None if labels is None else labels[keep]
    return RawTable(schema, rows, lab, dropped)


def load_csv(
    path: str | os.PathLike,
    schema: TableSchema,
    unknown: str = "error",
    label_column: str | None = None,
) -> RawTable:
    """Read a headed CSV restricted to the schema columns.

    Rows with missing cells are always dropped and counted. Rows with a
    category outside the vocabulary raise unless ``unknown="drop"``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(path, skipinitialspace=True, na_values=["?", ""], keep_default_na=True)
    df.columns = [c.strip() for c in df.columns]
    missing = [n for n in schema.names if n not in df.columns]
    if missing:
        raise DataError(f"{path.name}: columns {missing} not found")
    label_column = label_column or schema.label_column
    labels = None
    if label_column and label_column in df.columns:
        labels = df[label_column]
        if isinstance(schema.positive_label, str):
            labels = labels.where(labels.isna(), labels.astype(str).str.strip())
    return _coerce_frame(df, schema, labels, unknown, f"{path.name}: ")


def split(table: RawTable, fraction: float, seed: int) -> tuple[RawTable, RawTable]:
    """Random disjoint partition; the second part holds ``round(fraction * n)`` rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(table)
    if n == 0:
        raise DataError("cannot split an empty table")
    n_second = int(np.floor(fraction * n + 0.5)) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    second = np.sort(perm[:n_second])
    first = np.sort(perm[n_second:])
    return table.take(first), table.take(second)


def data_dir() -> Path:
    """Directory holding the dataset files: ``$FAIRAUDIT_DATA_DIR`` or the bundled ``data/``."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


def _checked(name: str, directory: Path | None = None) -> Path:
    path = (directory or data_dir()) / name
    if not path.exists():
        raise DataError(f"missing dataset file {path}; set {DATA_DIR_ENV} to the directory holding it")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != CHECKSUMS[name]:
        raise DataError(f"checksum mismatch for {path}")
    return path


def adult_schema() -> TableSchema:
    return load_schema(_SCHEMA_DIR / "adult.yaml")


def compas_schema() -> TableSchema:
    return load_schema(_SCHEMA_DIR / "compas.yaml")


ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]

_ADULT_RENAME = {
    "age": "Age",
    "workclass": "Workclass",
    "education_num": "Education Level",
    "marital_status": "Marital Status",
    "occupation": "Occupation",
    "relationship": "Relationship",
    "race": "Race",
    "sex": "Sex",
    "capital_gain": "Capital Gain",
    "capital_loss": "Capital Loss",
    "hours_per_week": "Hours per Week",
    "native_country": "Native Country",
}

_MARITAL = {
    "Married-civ-spouse": "Married",
    "Married-AF-spouse": "Military spouse",
    "Married-spouse-absent": "Spouse absent",
    "Never-married": "Never married",
}


def _read_adult(path: Path, skiprows: int) -> tuple[pd.DataFrame, pd.Series]:
    df = pd.read_csv(
        path, header=None, names=ADULT_COLUMNS, skipinitialspace=True,
        na_values="?", skiprows=skiprows,
    )
    df = df.dropna(how="all")
    labels = df.pop("income").str.rstrip(".")
    df = df.drop(columns=["fnlwgt", "education"]).rename(columns=_ADULT_RENAME)
    df["Marital Status"] = df["Marital Status"].replace(_MARITAL)
    return df, labels


def load_adult(directory: Path | None = None) -> tuple[RawTable, RawTable]:
    """The fixed UCI Adult train/test split.

    Twelve features are kept: ``fnlwgt`` is a sampling weight and ``education``
    duplicates ``education_num``. Rows with ``?`` cells are dropped
    (30162 train and 15060 test rows remain). The vocabulary comes from the
    training split; test rows with unseen categories are dropped with a warning.
    """
    schema = adult_schema()
    train_df, train_y = _read_adult(_checked("adult.data", directory), 0)
    test_df, test_y = _read_adult(_checked("adult.test", directory), 1)
    train = _coerce_frame(train_df, schema, train_y, "error", "adult.data: ")
    test = _coerce_frame(test_df, schema, test_y, "drop", "adult.test: ")
    return train, test


_AGE_CAT = {"Less than 25": "<25", "25 - 45": "25-45", "Greater than 45": ">45"}


def compas_frame(directory: Path | None = None) -> tuple[pd.DataFrame, pd.Series]:
    """ProPublica two-year recidivism table after the usual row filter.

    Kept rows satisfy ``-30 <= days_b_screening_arrest <= 30``,
    ``is_recid != -1``, ``c_charge_degree != "O"`` and ``score_text != "N/A"``,
    leaving 6172 people.
    """
    raw = pd.read_csv(_checked("compas-scores-two-years.csv", directory))
    raw = raw[
        raw.days_b_screening_arrest.between(-30, 30)
        & (raw.is_recid != -1)
        & (raw.c_charge_degree != "O")
        & (raw.score_text != "N/A")
    ]
    df = pd.DataFrame({
        "Sex": raw.sex,
        "Age": raw.age_cat.map(_AGE_CAT),
        "Race": raw.race,
        "Priors Count": raw.priors_count,
        "Charge Degree": raw.c_charge_degree,
        "Juvenile Felonies": raw.juv_fel_count,
        "Juvenile Misdemeanors": raw.juv_misd_count,
    })
    labels = raw.two_year_recid.map({0: "no", 1: "yes"})
    return df, labels


def load_compas(seed: int = 0, directory: Path | None = None, test_fraction: float = 0.2) -> tuple[RawTable, RawTable]:
    """COMPAS with a seeded 80/20 train/test split; the preferred outcome is no recidivism."""
    df, labels = compas_frame(directory)
    full = _coerce_frame(df, compas_schema(), labels, "error", "compas: ")
    return split(full, test_fraction, seed)
