import numpy as np
import pytest
from hypothesis import given, strategies as st

from admtl import clinical
from admtl.clinical import (
    ADAS_ITEMS,
    ITEM_MAXIMA,
    AdasCogAssessment,
    EligibilityError,
    RowParseError,
    SchemaError,
    ValidationError,
    build_feature_vector,
    build_target_vector,
    derive_global,
    parse_clinical_csv,
    write_clinical_csv,
)
from conftest import make_subject


def test_item_table():
    assert len(ADAS_ITEMS) == 13
    assert [item.id for item in ADAS_ITEMS] == [f"Q{i}" for i in range(1, 14)]
    assert all(item.max_score > 0 for item in ADAS_ITEMS)
    assert sum(ITEM_MAXIMA) == 85


def test_derive_global_zero_and_ones():
    assert derive_global([0.0] * 13) == 0.0
    assert derive_global([1.0] * 13) == 13.0


def test_derive_global_maxima():
    assert derive_global(list(ITEM_MAXIMA)) == 85.0


def test_derive_global_wrong_length():
    with pytest.raises(ValidationError):
        derive_global([1.0] * 12)


def test_assessment_rejects_out_of_range():
    scores = [0.0] * 13
    scores[1] = 6.0  # Q2 max is 5
    with pytest.raises(ValidationError, match="Q2"):
        AdasCogAssessment.from_items("S1", "BL", scores)


def test_assessment_rejects_bad_global():
    with pytest.raises(ValidationError, match="global"):
        AdasCogAssessment(
            subject_id="S1", timepoint="BL", item_scores=(1.0,) * 13, global_score=5.0
        )


def test_feature_vector_ordering():
    subject = make_subject(bl=[1.0] * 13, m06=[2.0] * 13)
    features = build_feature_vector(subject)
    assert features.shape == (26,)
    assert (features[:13] == 1.0).all()
    assert (features[13:] == 2.0).all()


def test_feature_vector_round_trip():
    bl = [min(i + 0.5, m) for i, m in enumerate(ITEM_MAXIMA)]
    m06 = [m / 2 for m in ITEM_MAXIMA]
    subject = make_subject(bl=bl, m06=m06)
    features = build_feature_vector(subject)
    assert features[:13].tolist() == pytest.approx(bl)
    assert features[13:].tolist() == pytest.approx(m06)


def test_feature_vector_missing_timepoint():
    subject = make_subject()
    del subject.assessments["M06"]
    with pytest.raises(EligibilityError, match="M06"):
        build_feature_vector(subject)


def test_target_vector_sum_invariant():
    m24 = [0.0] * 13
    m24[0], m24[3], m24[7] = 3.0, 2.0, 3.0
    subject = make_subject(m24=m24)
    target = build_target_vector(subject)
    assert target.shape == (14,)
    assert target[0] == pytest.approx(8.0)
    assert target[0] == pytest.approx(target[1:].sum(), abs=1e-9)


def test_target_vector_missing_m24():
    subject = make_subject()
    del subject.assessments["M24"]
    with pytest.raises(EligibilityError, match="M24"):
        build_target_vector(subject)


@given(
    st.lists(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        min_size=13,
        max_size=13,
    )
)
def test_target_sum_property(fractions):
    scores = [f * m for f, m in zip(fractions, ITEM_MAXIMA)]
    subject = make_subject(m24=scores)
    target = build_target_vector(subject)
    assert abs(target[0] - target[1:].sum()) <= 1e-9


def test_csv_round_trip(tmp_path, small_cohort):
    path = tmp_path / "cohort.csv"
    write_clinical_csv(small_cohort, path)
    parsed = parse_clinical_csv(path)
    assert len(parsed) == len(small_cohort)
    by_id = {s.subject_id: s for s in parsed}
    for original in small_cohort:
        loaded = by_id[original.subject_id]
        for tp in ("BL", "M06", "M24"):
            assert loaded.assessments[tp].item_scores == pytest.approx(
                original.assessments[tp].item_scores, abs=1e-9
            )
    # idempotence: serialize the parsed cohort again, byte-identical
    path2 = tmp_path / "cohort2.csv"
    write_clinical_csv(parsed, path2)
    assert path.read_text() == path2.read_text()


def test_parse_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("subject_id,diagnosis,age,sex,timepoint,Q1\nS1,NC,70,M,BL,0\n")
    with pytest.raises(SchemaError, match="Q2"):
        parse_clinical_csv(path)


def test_parse_non_numeric_score(tmp_path):
    header = ",".join(clinical.CSV_COLUMNS)
    row = "S1,NC,70,M,BL," + ",".join(["0"] * 12) + ",oops"
    path = tmp_path / "bad.csv"
    path.write_text(header + "\n" + row + "\n")
    with pytest.raises(RowParseError, match="line 2"):
        parse_clinical_csv(path)


def test_parse_out_of_range_score(tmp_path):
    header = ",".join(clinical.CSV_COLUMNS)
    row = "S1,NC,70,M,BL,11," + ",".join(["0"] * 12)  # Q1 max is 10
    path = tmp_path / "bad.csv"
    path.write_text(header + "\n" + row + "\n")
    with pytest.raises(ValidationError, match="Q1"):
        parse_clinical_csv(path)


def test_parse_ignores_unknown_timepoint(tmp_path, caplog):
    header = ",".join(clinical.CSV_COLUMNS)
    rows = [
        "S1,NC,70,M,BL," + ",".join(["0"] * 13),
        "S1,NC,70,M,M12," + ",".join(["1"] * 13),
    ]
    path = tmp_path / "cohort.csv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    cohort = parse_clinical_csv(path)
    assert len(cohort) == 1
    assert list(cohort[0].assessments) == ["BL"]


def test_parse_table1_counts(tmp_path, table1_cohort):
    path = tmp_path / "full.csv"
    write_clinical_csv(table1_cohort, path)
    parsed = parse_clinical_csv(path)
    assert len(parsed) == 435
    counts = {}
    for subject in parsed:
        counts[subject.diagnosis] = counts.get(subject.diagnosis, 0) + 1
    assert counts == {"AD": 17, "NC": 203, "MCI": 215}


def test_eligibility_requires_all_visits():
    subject = make_subject()
    assert subject.is_eligible()
    del subject.assessments["M06"]
    assert not subject.is_eligible()


def test_eligibility_baseline_filter():
    high = [m * 0.5 for m in ITEM_MAXIMA]  # global 42.5 > 20
    subject = make_subject(bl=high)
    assert not subject.is_eligible()


def test_eligibility_mri_requirement(tmp_path):
    subject = make_subject()
    assert not subject.is_eligible(require_mri=True)
    subject.mri_path = tmp_path / "scan.nii"
    assert subject.is_eligible(require_mri=True)


def test_validate_cohort_reports_subject_and_item():
    subject = make_subject()
    bad = AdasCogAssessment.from_items("S001", "BL", [0.0] * 13)
    bad.item_scores = tuple([99.0] + [0.0] * 12)  # bypass constructor check
    subject.assessments["BL"] = bad
    errors = clinical.validate_cohort([subject])
    assert any(e["subject_id"] == "S001" and "Q1" in e["field"] for e in errors)
