"""Subject-level records, study collections and their validation.

A :class:`StudyCollection` holds one concurrent study and any number of
historical studies. Records are immutable; helpers turn lists of records
into numpy columns for the numerical modules.

Similarity-vector layout
------------------------
``similarity_vector`` returns two parts:

* continuous: continuous covariates in schema order, then the outcome
  (when ``include_outcome_in_similarity``);
* categorical: level index of every categorical covariate in schema order,
  then the event flag (when ``include_event_in_similarity`` and the record
  carries one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray


class SchemaMismatchError(ValueError):
    """A record does not conform to the declared covariate schema."""


@dataclass(frozen=True)
class SubjectRecord:
    study_id: str
    arm: int
    outcome: float
    event: int | None = None
    continuous: tuple[float, ...] = ()
    categorical: tuple[str, ...] = ()


@dataclass(frozen=True)
class CovariateSchema:
    continuous_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    categorical_levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    include_outcome_in_similarity: bool = True
    include_event_in_similarity: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "continuous_names", tuple(self.continuous_names))
        object.__setattr__(self, "categorical_names", tuple(self.categorical_names))
        levels = {k: tuple(v) for k, v in dict(self.categorical_levels).items()}
        object.__setattr__(self, "categorical_levels", levels)
        names = self.continuous_names + self.categorical_names
        if len(set(names)) != len(names):
            raise ValueError(f"covariate names must be unique, got {names}")
        for name in self.categorical_names:
            lv = levels.get(name)
            if not lv:
                raise ValueError(f"no levels declared for categorical covariate {name!r}")
            if len(set(lv)) != len(lv):
                raise ValueError(f"duplicate levels for {name!r}: {lv}")

    def level_index(self, name: str, level: str) -> int:
        try:
            return self.categorical_levels[name].index(level)
        except ValueError:
            raise SchemaMismatchError(
                f"unknown level {level!r} for {name!r}; declared {self.categorical_levels[name]}"
            ) from None

    @property
    def n_levels(self) -> tuple[int, ...]:
        return tuple(len(self.categorical_levels[n]) for n in self.categorical_names)


@dataclass(frozen=True)
class StudyCollection:
    """One concurrent study plus historical studies keyed by study id."""

    concurrent: tuple[SubjectRecord, ...]
    historical: Mapping[str, tuple[SubjectRecord, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "concurrent", tuple(self.concurrent))
        object.__setattr__(
            self, "historical", {str(k): tuple(v) for k, v in dict(self.historical).items()}
        )

    @property
    def concurrent_id(self) -> str:
        return self.concurrent[0].study_id if self.concurrent else ""

    @property
    def historical_ids(self) -> list[str]:
        return list(self.historical)

    @property
    def n_historical(self) -> int:
        return sum(len(v) for v in self.historical.values())

    def historical_records(self) -> list[SubjectRecord]:
        return [r for recs in self.historical.values() for r in recs]

    def all_records(self) -> list[SubjectRecord]:
        return list(self.concurrent) + self.historical_records()

    def without_history(self) -> StudyCollection:
        return StudyCollection(self.concurrent, {})


@dataclass(frozen=True)
class Violation:
    study_id: str
    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.study_id}[{self.index}] {self.field}: {self.message}"


def _check_record(
    rec: SubjectRecord, idx: int, schema: CovariateSchema, survival: bool
) -> list[Violation]:
    out: list[Violation] = []

    def bad(fld: str, msg: str) -> None:
        out.append(Violation(rec.study_id, idx, fld, msg))

    if rec.arm not in (0, 1):
        bad("arm", f"must be 0 or 1, got {rec.arm!r}")
    if rec.event is not None and rec.event not in (0, 1):
        bad("event", f"must be 0 or 1, got {rec.event!r}")
    if not isinstance(rec.outcome, (int, float)) or not math.isfinite(rec.outcome):
        bad("outcome", f"must be a finite number, got {rec.outcome!r}")
    elif survival and rec.outcome <= 0:
        bad("outcome", f"survival time must be > 0, got {rec.outcome!r}")
    if survival and rec.event is None:
        bad("event", "event flag is required for survival data")
    if len(rec.continuous) != len(schema.continuous_names):
        bad(
            "continuous",
            f"arity {len(rec.continuous)} != schema arity {len(schema.continuous_names)}",
        )
    elif any(not math.isfinite(v) for v in rec.continuous):
        bad("continuous", "missing or non-finite covariate value")
    if len(rec.categorical) != len(schema.categorical_names):
        bad(
            "categorical",
            f"arity {len(rec.categorical)} != schema arity {len(schema.categorical_names)}",
        )
    else:
        for name, level in zip(schema.categorical_names, rec.categorical):
            if level not in schema.categorical_levels[name]:
                bad(name, f"unknown level {level!r}")
    return out


def validate_collection(
    collection: StudyCollection, schema: CovariateSchema, survival: bool = False
) -> list[Violation]:
    """Return every invariant violation in ``collection``; empty when valid.

    Violations are data, not faults: nothing is raised.
    """
    out: list[Violation] = []
    if not collection.concurrent:
        out.append(Violation("", -1, "concurrent", "concurrent study is empty"))
    cid = collection.concurrent_id
    for i, rec in enumerate(collection.concurrent):
        if rec.study_id != cid:
            out.append(Violation(rec.study_id, i, "study_id", f"concurrent record not in study {cid!r}"))
        out.extend(_check_record(rec, i, schema, survival))
    for sid, recs in collection.historical.items():
        if sid == cid:
            out.append(Violation(sid, -1, "study_id", "historical id equals concurrent id"))
        if not recs:
            out.append(Violation(sid, -1, "historical", "historical study is empty"))
        for i, rec in enumerate(recs):
            if rec.study_id != sid:
                out.append(Violation(rec.study_id, i, "study_id", f"record filed under study {sid!r}"))
            out.extend(_check_record(rec, i, schema, survival))
    return out


def similarity_vector(
    record: SubjectRecord, schema: CovariateSchema
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Split a record into its continuous and categorical similarity parts."""
    if len(record.continuous) != len(schema.continuous_names) or len(record.categorical) != len(
        schema.categorical_names
    ):
        raise SchemaMismatchError("record arity does not match schema")
    cont = list(record.continuous)
    if schema.include_outcome_in_similarity:
        cont.append(record.outcome)
    cat = [schema.level_index(n, v) for n, v in zip(schema.categorical_names, record.categorical)]
    if schema.include_event_in_similarity and record.event is not None:
        cat.append(int(record.event))
    return np.asarray(cont, dtype=float), np.asarray(cat, dtype=np.int64)


def similarity_matrix(
    records: Sequence[SubjectRecord], schema: CovariateSchema
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Stack ``similarity_vector`` over records: (n, p_cont) and (n, p_cat)."""
    parts = [similarity_vector(r, schema) for r in records]
    n = len(parts)
    p_cont = len(schema.continuous_names) + int(schema.include_outcome_in_similarity)
    if not parts:
        return np.empty((0, p_cont)), np.empty((0, 0), dtype=np.int64)
    cont = np.vstack([p[0] for p in parts]).reshape(n, -1)
    cat = np.vstack([p[1] for p in parts]).reshape(n, -1)
    return cont, cat


def categorical_radices(schema: CovariateSchema, with_event: bool) -> tuple[int, ...]:
    radices = schema.n_levels
    if schema.include_event_in_similarity and with_event:
        radices = radices + (2,)
    return radices


@dataclass(frozen=True)
class Columns:
    """Column view of a list of records."""

    study_id: NDArray[np.str_]
    arm: NDArray[np.int64]
    outcome: NDArray[np.float64]
    event: NDArray[np.int64]
    continuous: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.outcome)


def columns(records: Iterable[SubjectRecord], n_continuous: int | None = None) -> Columns:
    recs = list(records)
    if n_continuous is None:
        n_continuous = len(recs[0].continuous) if recs else 0
    return Columns(
        study_id=np.array([r.study_id for r in recs], dtype=str),
        arm=np.array([r.arm for r in recs], dtype=np.int64),
        outcome=np.array([r.outcome for r in recs], dtype=float),
        event=np.array([1 if r.event is None else r.event for r in recs], dtype=np.int64),
        continuous=np.array([r.continuous for r in recs], dtype=float).reshape(len(recs), n_continuous),
    )


def design_matrix(
    records: Sequence[SubjectRecord], schema: CovariateSchema
) -> tuple[NDArray[np.float64], list[str]]:
    """Analysis covariates: continuous columns then treatment-coded dummies.

    Each categorical covariate contributes one indicator per non-reference
    level (the first declared level is the reference).
    """
    n = len(records)
    cols = [np.array([r.continuous[j] for r in records], dtype=float) for j in range(len(schema.continuous_names))]
    names = list(schema.continuous_names)
    for j, name in enumerate(schema.categorical_names):
        for level in schema.categorical_levels[name][1:]:
            cols.append(np.array([1.0 if r.categorical[j] == level else 0.0 for r in records]))
            names.append(f"{name}={level}")
    if not cols:
        return np.empty((n, 0)), names
    return np.column_stack(cols), names


def default_schema(collection: StudyCollection) -> CovariateSchema:
    """Continuous-only schema named ``x1..xp`` inferred from record arity."""
    recs = collection.all_records()
    if any(r.categorical for r in recs):
        raise SchemaMismatchError("categorical covariates need an explicit schema")
    p = len(recs[0].continuous) if recs else 0
    return CovariateSchema(continuous_names=tuple(f"x{j + 1}" for j in range(p)))
