import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ipdprior.data_model import (
    CovariateSchema,
    SchemaMismatchError,
    StudyCollection,
    SubjectRecord,
    default_schema,
    design_matrix,
    similarity_matrix,
    similarity_vector,
    validate_collection,
)

SCHEMA_2 = CovariateSchema(continuous_names=("x1", "x2"))


def rec(sid="C", arm=0, y=0.0, x=(0.0, 0.0), event=None, cat=()):
    return SubjectRecord(sid, arm, y, event, tuple(x), tuple(cat))


def test_well_formed_collection_has_no_violations():
    col = StudyCollection((rec(arm=0), rec(arm=1)), {"H": (rec("H"),)})
    assert validate_collection(col, SCHEMA_2) == []


def test_arm_two_is_one_violation_naming_arm():
    col = StudyCollection((rec(arm=2), rec(arm=1)), {"H": (rec("H"),)})
    v = validate_collection(col, SCHEMA_2)
    assert len(v) == 1 and v[0].field == "arm"


def test_arity_violation_for_extra_covariate():
    col = StudyCollection((rec(),), {"H": (rec("H", x=(1.0, 2.0, 3.0)),)})
    v = validate_collection(col, SCHEMA_2)
    assert len(v) == 1
    assert v[0].field == "continuous" and v[0].study_id == "H" and v[0].index == 0


def test_collection_level_violations():
    col = StudyCollection((), {"H": ()})
    fields = {v.field for v in validate_collection(col, SCHEMA_2)}
    assert {"concurrent", "historical"} <= fields
    clash = StudyCollection((rec("C"),), {"C": (rec("C"),)})
    assert any(v.field == "study_id" for v in validate_collection(clash, SCHEMA_2))


def test_survival_requirements():
    col = StudyCollection((rec(y=-1.0, event=1), rec(y=2.0)), {})
    v = validate_collection(col, SCHEMA_2, survival=True)
    assert {(x.index, x.field) for x in v} == {(0, "outcome"), (1, "event")}


def test_missing_covariate_rejected():
    col = StudyCollection((rec(x=(math.nan, 1.0)),), {})
    assert [v.field for v in validate_collection(col, SCHEMA_2)] == ["continuous"]


def test_similarity_vector_layouts():
    s1 = CovariateSchema(continuous_names=("x",))
    cont, cat = similarity_vector(SubjectRecord("C", 0, 0.4, None, (1.2,)), s1)
    assert cont.tolist() == [1.2, 0.4] and cat.size == 0
    s2 = CovariateSchema(continuous_names=("x",), include_outcome_in_similarity=False)
    cont, _ = similarity_vector(SubjectRecord("C", 0, 0.4, None, (1.2,)), s2)
    assert cont.tolist() == [1.2]
    s3 = CovariateSchema(("age",), ("sex",), {"sex": ("F", "M")})
    cont, cat = similarity_vector(SubjectRecord("C", 0, 7.8, 1, (61.0,), ("M",)), s3)
    assert cont.tolist() == [61.0, 7.8] and cat.tolist() == [1, 1]


def test_unknown_level_is_schema_mismatch():
    s = CovariateSchema((), ("sex",), {"sex": ("F", "M")})
    with pytest.raises(SchemaMismatchError):
        similarity_vector(SubjectRecord("C", 0, 1.0, None, (), ("X",)), s)
    col = StudyCollection((SubjectRecord("C", 0, 1.0, None, (), ("X",)),), {})
    assert [v.field for v in validate_collection(col, s)] == ["sex"]


def test_schema_rejects_duplicate_names_and_missing_levels():
    with pytest.raises(ValueError):
        CovariateSchema(("a",), ("a",), {"a": ("x",)})
    with pytest.raises(ValueError):
        CovariateSchema((), ("b",), {})


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2),
    st.floats(-1e6, 1e6),
)
def test_similarity_vector_is_pure(x, y):
    r = SubjectRecord("C", 0, y, None, tuple(x))
    a = similarity_vector(r, SCHEMA_2)
    b = similarity_vector(r, SCHEMA_2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_design_matrix_dummies_use_first_level_as_reference():
    s = CovariateSchema(("age",), ("race",), {"race": ("w", "b", "a")})
    recs = [SubjectRecord("C", 0, 1.0, None, (50.0,), (lv,)) for lv in ("w", "b", "a")]
    X, names = design_matrix(recs, s)
    assert names == ["age", "race=b", "race=a"]
    assert X.tolist() == [[50, 0, 0], [50, 1, 0], [50, 0, 1]]


def test_default_schema_and_matrix_shapes():
    col = StudyCollection((rec(), rec(arm=1)), {})
    assert default_schema(col).continuous_names == ("x1", "x2")
    cont, cat = similarity_matrix(list(col.concurrent), SCHEMA_2)
    assert cont.shape == (2, 3) and cat.shape == (2, 0)
