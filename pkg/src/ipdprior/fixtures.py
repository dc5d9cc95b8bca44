"""Synthetic datasets for tests, demos and the CLI.

Nothing here reads real patient data; the survival fixture only mimics the
shape of a four-trial lung-cancer control-arm pool (one concurrent trial,
two similar historical trials, one historical trial with much longer
survival).
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import CovariateSchema, StudyCollection, SubjectRecord

RACE_LEVELS = ("white", "black", "asian", "other")
SEX_LEVELS = ("F", "M")


def normal_fixture(
    seed: int,
    n_concurrent: int = 40,
    n_historical: Sequence[int] = (60,),
    n_covariates: int = 1,
    outcome_shift: float = 0.0,
    theta: float = 0.5,
) -> StudyCollection:
    """Normal-linear data; historical outcomes are shifted by ``outcome_shift``."""
    rng = np.random.default_rng(seed)

    def block(sid: str, n: int, treat: bool, shift: float) -> tuple[SubjectRecord, ...]:
        x = rng.normal(1.0, 1.0, (n, n_covariates))
        z = rng.integers(0, 2, n) if treat else np.zeros(n, dtype=int)
        if treat and n >= 2 and z.min() == z.max():
            z[0] = 1 - z[0]
        y = x.sum(axis=1) + theta * z + shift + rng.standard_normal(n)
        return tuple(
            SubjectRecord(sid, int(zi), float(yi), None, tuple(float(v) for v in xi)) for xi, zi, yi in zip(x, z, y)
        )

    hist = {f"H{h + 1}": block(f"H{h + 1}", n, False, outcome_shift) for h, n in enumerate(n_historical)}
    return StudyCollection(block("C", n_concurrent, True, 0.0), hist)


def survival_schema() -> CovariateSchema:
    return CovariateSchema(
        continuous_names=("age",),
        categorical_names=("sex", "race"),
        categorical_levels={"sex": SEX_LEVELS, "race": RACE_LEVELS},
    )


def survival_fixture(seed: int = 0, sizes: dict[str, int] | None = None) -> StudyCollection:
    """Weibull-distributed survival (months) with administrative censoring.

    ``STUDY57`` is the concurrent trial (both arms); ``INTEREST`` and
    ``ZODIAC`` are control arms with median survival near 9 months;
    ``PROCLAIM`` is a control arm with median near 25 months.
    """
    sizes = sizes or {"STUDY57": 120, "INTEREST": 150, "ZODIAC": 150, "PROCLAIM": 100}
    medians = {"STUDY57": 9.0, "INTEREST": 8.5, "ZODIAC": 9.5, "PROCLAIM": 25.0}
    rng = np.random.default_rng(seed)
    shape = 1.3

    def block(sid: str, treat: bool) -> tuple[SubjectRecord, ...]:
        n = sizes[sid]
        age = rng.normal(60.0, 8.0, n)
        sex = rng.choice(SEX_LEVELS, n, p=[0.35, 0.65])
        race = rng.choice(RACE_LEVELS, n, p=[0.7, 0.1, 0.15, 0.05])
        z = rng.integers(0, 2, n) if treat else np.zeros(n, dtype=int)
        # median m of a Weibull(shape k) with rate exp(eta): m = (log 2 / exp(eta))**(1/k)
        eta = np.log(np.log(2.0)) - shape * np.log(medians[sid]) + 0.01 * (age - 60) - 0.1 * z
        t = (rng.exponential(1.0, n) / np.exp(eta)) ** (1.0 / shape)
        cens = rng.uniform(12.0, 60.0, n)
        obs = np.minimum(t, cens)
        ev = (t <= cens).astype(int)
        return tuple(
            SubjectRecord(sid, int(zi), float(round(ti, 4)), int(ei), (float(round(a, 1)),), (str(s), str(r)))
            for ti, ei, zi, a, s, r in zip(obs, ev, z, age, sex, race)
        )

    conc = block("STUDY57", True)
    hist = {sid: block(sid, False) for sid in sizes if sid != "STUDY57"}
    return StudyCollection(conc, hist)


def to_csv(collection: StudyCollection, schema: CovariateSchema, with_event: bool | None = None) -> str:
    """Render a collection in the CLI's comma-separated layout."""
    recs = collection.all_records()
    if with_event is None:
        with_event = any(r.event is not None for r in recs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["study_id", "arm", "outcome"] + (["event"] if with_event else [])
    w.writerow(header + list(schema.continuous_names) + list(schema.categorical_names))
    for r in recs:
        row = [r.study_id, r.arm, repr(float(r.outcome))] + ([r.event] if with_event else [])
        w.writerow(row + [repr(float(v)) for v in r.continuous] + list(r.categorical))
    return buf.getvalue()


def write_csv(path: str | Path, collection: StudyCollection, schema: CovariateSchema) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(to_csv(collection, schema), encoding="utf-8", newline="\n")
    return p
