"""ADAS-Cog 13 domain types, CSV ingestion, and model input/target vectors."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

LOGGER = logging.getLogger(__name__)

TIMEPOINTS = ("BL", "M06", "M24")
DIAGNOSES = ("NC", "MCI", "AD")

GLOBAL_SUM_TOL = 1e-9

# Inclusion filter: baseline global score must not exceed this value.
BASELINE_GLOBAL_MAX = 20.0


class ClinicalDataError(Exception):
    """Base class for clinical ingestion/validation failures."""


class SchemaError(ClinicalDataError):
    """The CSV header is missing a required column."""


class RowParseError(ClinicalDataError):
    """A row could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ClinicalDataError):
    """A parsed value violates an item range or sum constraint."""


class EligibilityError(ClinicalDataError):
    """A subject is missing data required by the requested operation."""


@dataclass(frozen=True)
class AdasCogItem:
    id: str
    label: str
    max_score: float


# Standard ADAS-Cog 13 item definitions. The per-item maxima sum to 85.
ADAS_ITEMS: Tuple[AdasCogItem, ...] = (
    AdasCogItem("Q1", "Word Recall", 10),
    AdasCogItem("Q2", "Commands", 5),
    AdasCogItem("Q3", "Constructional Praxis", 5),
    AdasCogItem("Q4", "Delayed Word Recall", 10),
    AdasCogItem("Q5", "Naming", 5),
    AdasCogItem("Q6", "Ideational Praxis", 5),
    AdasCogItem("Q7", "Orientation", 8),
    AdasCogItem("Q8", "Word Recognition", 12),
    AdasCogItem("Q9", "Recall of Test Instructions", 5),
    AdasCogItem("Q10", "Spoken Language Ability", 5),
    AdasCogItem("Q11", "Word-Finding Difficulty", 5),
    AdasCogItem("Q12", "Comprehension", 5),
    AdasCogItem("Q13", "Number Cancellation", 5),
)

ITEM_IDS: Tuple[str, ...] = tuple(item.id for item in ADAS_ITEMS)
ITEM_MAXIMA: Tuple[float, ...] = tuple(item.max_score for item in ADAS_ITEMS)
NUM_ITEMS = len(ADAS_ITEMS)

CSV_COLUMNS = ["subject_id", "diagnosis", "age", "sex", "timepoint"] + list(ITEM_IDS)


def derive_global(item_scores: Sequence[float]) -> float:
    """Global score is the arithmetic sum of the 13 item scores."""
    if len(item_scores) != NUM_ITEMS:
        raise ValidationError(
            f"expected {NUM_ITEMS} item scores, got {len(item_scores)}"
        )
    return float(sum(item_scores))


@dataclass
class AdasCogAssessment:
    subject_id: str
    timepoint: str
    item_scores: Tuple[float, ...]
    global_score: float

    def __post_init__(self) -> None:
        if self.timepoint not in TIMEPOINTS:
            raise ValidationError(
                f"{self.subject_id}: unknown timepoint {self.timepoint!r}"
            )
        if len(self.item_scores) != NUM_ITEMS:
            raise ValidationError(
                f"{self.subject_id}: expected {NUM_ITEMS} item scores, "
                f"got {len(self.item_scores)}"
            )
        self.item_scores = tuple(float(v) for v in self.item_scores)
        for score, item in zip(self.item_scores, ADAS_ITEMS):
            if not 0.0 <= score <= item.max_score:
                raise ValidationError(
                    f"{self.subject_id}: {item.id} score {score} outside "
                    f"[0, {item.max_score}]"
                )
        if abs(self.global_score - sum(self.item_scores)) > GLOBAL_SUM_TOL:
            raise ValidationError(
                f"{self.subject_id}: global score {self.global_score} does not "
                f"equal the item sum {sum(self.item_scores)}"
            )

    @classmethod
    def from_items(
        cls, subject_id: str, timepoint: str, item_scores: Sequence[float]
    ) -> "AdasCogAssessment":
        return cls(
            subject_id=subject_id,
            timepoint=timepoint,
            item_scores=tuple(float(v) for v in item_scores),
            global_score=derive_global(item_scores),
        )


@dataclass
class SubjectRecord:
    subject_id: str
    diagnosis: str
    age: float
    sex: str
    assessments: Dict[str, AdasCogAssessment] = field(default_factory=dict)
    mri_path: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.diagnosis not in DIAGNOSES:
            raise ValidationError(
                f"{self.subject_id}: unknown diagnosis {self.diagnosis!r}"
            )
        if self.sex not in ("M", "F"):
            raise ValidationError(f"{self.subject_id}: unknown sex {self.sex!r}")

    def assessment(self, timepoint: str) -> AdasCogAssessment:
        if timepoint not in self.assessments:
            raise EligibilityError(
                f"subject {self.subject_id} has no {timepoint} assessment"
            )
        return self.assessments[timepoint]

    def is_eligible(self, require_mri: bool = False) -> bool:
        """Complete-case eligibility: all three visits, baseline global <= 20,
        and an MRI reference when the modality needs one."""
        if any(tp not in self.assessments for tp in TIMEPOINTS):
            return False
        if self.assessments["BL"].global_score > BASELINE_GLOBAL_MAX:
            return False
        if require_mri and self.mri_path is None:
            return False
        return True


# Model input: 13 items at BL followed by 13 items at M06.
FEATURE_DIM = 2 * NUM_ITEMS
# Model output: global at index 0, then the 13 items, all at M24.
TARGET_DIM = 1 + NUM_ITEMS

FEATURE_NAMES: Tuple[str, ...] = tuple(
    f"{item_id}_{tp}" for tp in ("BL", "M06") for item_id in ITEM_IDS
)
TARGET_NAMES: Tuple[str, ...] = ("global",) + ITEM_IDS


def build_feature_vector(subject: SubjectRecord) -> np.ndarray:
    """Input features: BL item scores then M06 item scores (26 values)."""
    bl = subject.assessment("BL")
    m06 = subject.assessment("M06")
    return np.asarray(bl.item_scores + m06.item_scores, dtype=np.float64)


def build_target_vector(subject: SubjectRecord) -> np.ndarray:
    """Targets at M24: global score first, then the 13 item scores."""
    m24 = subject.assessment("M24")
    return np.asarray((m24.global_score,) + m24.item_scores, dtype=np.float64)


def parse_clinical_csv(path: Path | str) -> List[SubjectRecord]:
    """Read the long-format clinical CSV into one record per subject.

    One row per (subject, timepoint); the global score is recomputed as the
    item sum. Rows at unknown timepoints are skipped with a warning.
    """
    path = Path(path)
    df = pd.read_csv(path, dtype={"subject_id": str}, float_precision="round_trip")
    for col in CSV_COLUMNS:
        if col not in df.columns:
            raise SchemaError(f"missing required column {col!r} in {path}")

    records: Dict[str, SubjectRecord] = {}
    for idx, row in df.iterrows():
        line = idx + 2  # header occupies line 1
        timepoint = str(row["timepoint"])
        if timepoint not in TIMEPOINTS:
            LOGGER.warning(
                "%s line %d: ignoring unknown timepoint %r", path, line, timepoint
            )
            continue
        scores = []
        for item_id in ITEM_IDS:
            value = row[item_id]
            try:
                scores.append(float(value))
            except (TypeError, ValueError):
                raise RowParseError(
                    f"non-numeric {item_id} value {value!r}", line
                ) from None
            if not np.isfinite(scores[-1]):
                raise RowParseError(f"non-finite {item_id} value {value!r}", line)
        subject_id = str(row["subject_id"])
        assessment = AdasCogAssessment.from_items(subject_id, timepoint, scores)
        if subject_id not in records:
            try:
                age = float(row["age"])
            except (TypeError, ValueError):
                raise RowParseError(f"non-numeric age {row['age']!r}", line) from None
            records[subject_id] = SubjectRecord(
                subject_id=subject_id,
                diagnosis=str(row["diagnosis"]),
                age=age,
                sex=str(row["sex"]),
            )
        records[subject_id].assessments[timepoint] = assessment
    return list(records.values())


def write_clinical_csv(cohort: Sequence[SubjectRecord], path: Path | str) -> None:
    """Emit the long-format CSV understood by parse_clinical_csv."""
    rows = []
    for subject in cohort:
        for tp in TIMEPOINTS:
            if tp not in subject.assessments:
                continue
            assessment = subject.assessments[tp]
            row = {
                "subject_id": subject.subject_id,
                "diagnosis": subject.diagnosis,
                "age": subject.age,
                "sex": subject.sex,
                "timepoint": tp,
            }
            row.update(dict(zip(ITEM_IDS, assessment.item_scores)))
            rows.append(row)
    pd.DataFrame(rows, columns=CSV_COLUMNS).to_csv(path, index=False)


def validate_cohort(cohort: Sequence[SubjectRecord]) -> List[Dict[str, str]]:
    """Collect per-subject validation problems as JSON-ready records."""
    errors: List[Dict[str, str]] = []
    for subject in cohort:
        for tp, assessment in subject.assessments.items():
            for score, item in zip(assessment.item_scores, ADAS_ITEMS):
                if not 0.0 <= score <= item.max_score:
                    errors.append(
                        {
                            "subject_id": subject.subject_id,
                            "field": f"{item.id}@{tp}",
                            "message": f"score {score} outside [0, {item.max_score}]",
                        }
                    )
            if abs(assessment.global_score - sum(assessment.item_scores)) > GLOBAL_SUM_TOL:
                errors.append(
                    {
                        "subject_id": subject.subject_id,
                        "field": f"global@{tp}",
                        "message": "global score does not equal the item sum",
                    }
                )
    return errors


def write_validation_report(errors: List[Dict[str, str]], path: Path | str) -> None:
    Path(path).write_text(json.dumps(errors, indent=2))


def eligible_subjects(
    cohort: Sequence[SubjectRecord], require_mri: bool = False
) -> List[SubjectRecord]:
    return [s for s in cohort if s.is_eligible(require_mri=require_mri)]
