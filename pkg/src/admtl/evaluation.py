"""Metrics, the per-output report, and sub-score contribution analysis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .clinical import ITEM_IDS, NUM_ITEMS, TARGET_NAMES, SubjectRecord
from .model import MtlModel
from .training import VolumeProvider, assemble_tensors


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined when either vector has zero variance."""


def _check_pair(pred, true) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError(
            f"expected equal-length nonempty vectors, got {pred.shape} and {true.shape}"
        )
    return pred, true


def mae(pred, true) -> float:
    pred, true = _check_pair(pred, true)
    return float(np.abs(pred - true).mean())


def rmse(pred, true) -> float:
    pred, true = _check_pair(pred, true)
    return float(np.sqrt(((pred - true) ** 2).mean()))


def pearson(pred, true) -> float:
    pred, true = _check_pair(pred, true)
    if pred.size < 2:
        raise ValueError("pearson needs at least 2 samples")
    dp = pred - pred.mean()
    dt = true - true.mean()
    denom = np.sqrt((dp * dp).sum() * (dt * dt).sum())
    if denom == 0:
        raise UndefinedCorrelationError("zero variance input")
    return float(np.clip((dp * dt).sum() / denom, -1.0, 1.0))


def subscore_contribution(predicted_subscores: Sequence[float]) -> Optional[List[float]]:
    """Percent share of each clamped predicted sub-score in their sum.

    Returns None when every clamped sub-score is zero (degenerate case).
    """
    values = np.asarray(predicted_subscores, dtype=np.float64)
    if values.shape != (NUM_ITEMS,):
        raise ValueError(f"expected {NUM_ITEMS} sub-scores, got shape {values.shape}")
    clamped = np.clip(values, 0.0, None)
    total = clamped.sum()
    if total == 0:
        return None
    return (100.0 * clamped / total).tolist()


@dataclass
class OutputMetrics:
    name: str
    mae: float
    rmse: float
    pearson_r: Optional[float]  # None when undefined (zero variance)


@dataclass
class SubjectRow:
    subject_id: str
    diagnosis: str
    true: List[float]  # 14 values, canonical target order
    predicted: List[float]
    abs_error: List[float]
    contribution_pct: Optional[List[float]]  # 13 values or None if degenerate


@dataclass
class EvaluationReport:
    outputs: List[OutputMetrics]
    subjects: List[SubjectRow]
    dominance: List[Tuple[str, float]]  # (item, mean contribution %), descending

    def to_json(self) -> dict:
        return {
            "outputs": [vars(o) for o in self.outputs],
            "subjects": [vars(s) for s in self.subjects],
            "dominance": [[item, value] for item, value in self.dominance],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvaluationReport":
        return cls(
            outputs=[OutputMetrics(**o) for o in payload["outputs"]],
            subjects=[SubjectRow(**s) for s in payload["subjects"]],
            dominance=[(item, value) for item, value in payload["dominance"]],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "EvaluationReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _mean_contributions(subjects: Sequence[SubjectRow]) -> List[Tuple[str, float]]:
    rows = [s.contribution_pct for s in subjects if s.contribution_pct is not None]
    if not rows:
        return [(item, 0.0) for item in ITEM_IDS]
    means = np.asarray(rows).mean(axis=0)
    ranked = sorted(zip(ITEM_IDS, means.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return ranked


def build_report(
    subject_ids: Sequence[str],
    diagnoses: Sequence[str],
    true: np.ndarray,
    predicted: np.ndarray,
) -> EvaluationReport:
    """Assemble the report from prediction/target matrices (n, 14)."""
    outputs = []
    for col, name in enumerate(TARGET_NAMES):
        try:
            r: Optional[float] = pearson(predicted[:, col], true[:, col])
        except (UndefinedCorrelationError, ValueError):
            r = None
        outputs.append(
            OutputMetrics(
                name=name,
                mae=mae(predicted[:, col], true[:, col]),
                rmse=rmse(predicted[:, col], true[:, col]),
                pearson_r=r,
            )
        )
    subjects = []
    for i, (sid, dx) in enumerate(zip(subject_ids, diagnoses)):
        subjects.append(
            SubjectRow(
                subject_id=sid,
                diagnosis=dx,
                true=true[i].tolist(),
                predicted=predicted[i].tolist(),
                abs_error=np.abs(predicted[i] - true[i]).tolist(),
                contribution_pct=subscore_contribution(predicted[i, 1:]),
            )
        )
    return EvaluationReport(
        outputs=outputs, subjects=subjects, dominance=_mean_contributions(subjects)
    )


def evaluate(
    model: MtlModel,
    subjects: Sequence[SubjectRecord],
    volume_provider: Optional[VolumeProvider] = None,
) -> EvaluationReport:
    eligible = [s for s in subjects if s.is_eligible()]
    if not eligible:
        raise ValueError("no eligible subjects to evaluate")
    tensors = assemble_tensors(eligible, model.modality, volume_provider)
    model.eval()
    with torch.no_grad():
        preds = model(
            volumes=tensors.get("volumes") if model.modality.use_mri else None,
            clinical=tensors["clinical"] if model.modality.use_clinical else None,
        ).numpy().astype(np.float64)
    true = tensors["targets"].numpy().astype(np.float64)
    return build_report(
        [s.subject_id for s in eligible],
        [s.diagnosis for s in eligible],
        true,
        preds,
    )


def dominance_report(report: EvaluationReport, k: int) -> Dict[str, object]:
    """Top-k items by mean contribution with their cumulative share."""
    if not 1 <= k <= NUM_ITEMS:
        raise ValueError(f"k must be in [1, {NUM_ITEMS}], got {k}")
    top = report.dominance[:k]
    return {
        "items": [item for item, _ in top],
        "mean_contribution_pct": [value for _, value in top],
        "cumulative_share_pct": float(sum(value for _, value in top)),
    }


def predictions_csv(report: EvaluationReport, path: Path | str) -> None:
    """subject_id, 14 true values, 14 predicted values."""
    lines = [
        "subject_id,"
        + ",".join(f"true_{n}" for n in TARGET_NAMES)
        + ","
        + ",".join(f"pred_{n}" for n in TARGET_NAMES)
    ]
    for row in report.subjects:
        lines.append(
            row.subject_id
            + ","
            + ",".join(f"{v:.6f}" for v in row.true)
            + ","
            + ",".join(f"{v:.6f}" for v in row.predicted)
        )
    Path(path).write_text("\n".join(lines) + "\n")
