import numpy as np
import pytest

from admtl.clinical import AdasCogAssessment, SubjectRecord
from admtl.synth import CohortSpec, GroupSpec, generate_cohort


def make_subject(
    subject_id="S001",
    diagnosis="MCI",
    bl=None,
    m06=None,
    m24=None,
):
    """Subject with the given per-visit item scores (defaults to zeros)."""
    zeros = [0.0] * 13
    assessments = {}
    for tp, scores in (("BL", bl), ("M06", m06), ("M24", m24)):
        if scores is None:
            scores = zeros
        assessments[tp] = AdasCogAssessment.from_items(subject_id, tp, scores)
    return SubjectRecord(
        subject_id=subject_id,
        diagnosis=diagnosis,
        age=72.0,
        sex="F",
        assessments=assessments,
    )


@pytest.fixture
def subject():
    return make_subject()


@pytest.fixture(scope="session")
def small_cohort():
    """60-subject cohort, fast enough for training smoke tests."""
    groups = {
        "AD": GroupSpec(10, 17.1, 2.1, 73.4, 8.3, 0.5, 2.5),
        "NC": GroupSpec(25, 9.5, 4.2, 76.0, 5.2, 0.5, 0.2),
        "MCI": GroupSpec(25, 14.5, 3.9, 74.7, 7.5, 0.6, 1.2),
    }
    return generate_cohort(CohortSpec(groups=groups, seed=7))


@pytest.fixture(scope="session")
def table1_cohort():
    """Full 435-subject cohort shaped like the reference demographics."""
    return generate_cohort(CohortSpec(seed=0))
