"""Deterministic ADNI-like synthetic cohort: trajectories and phantom MRI."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .clinical import (
    ADAS_ITEMS,
    ITEM_IDS,
    ITEM_MAXIMA,
    NUM_ITEMS,
    AdasCogAssessment,
    SubjectRecord,
)
from .imaging import Volume

YEARS = {"BL": 0.0, "M06": 0.5, "M24": 2.0}


@dataclass
class GroupSpec:
    size: int
    baseline_global_mean: float
    baseline_global_sd: float
    age_mean: float
    age_sd: float
    male_fraction: float
    progression_drift: float  # global points per year


@dataclass
class CohortSpec:
    groups: Dict[str, GroupSpec] = field(default_factory=lambda: default_groups())
    noise_sd: float = 1.0  # per-item visit noise, points
    seed: int = 0

    def __post_init__(self) -> None:
        for name, group in self.groups.items():
            if group.size < 0:
                raise ValueError(f"group {name}: negative size")
            if group.baseline_global_sd < 0 or group.age_sd < 0:
                raise ValueError(f"group {name}: negative SD")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def default_groups() -> Dict[str, GroupSpec]:
    """Cohort shaped like the 435-subject ADNI-1 sample (17 AD / 203 NC / 215 MCI)."""
    return {
        "AD": GroupSpec(17, 17.1, 2.1, 73.4, 8.3, 8 / 17, 2.5),
        "NC": GroupSpec(203, 9.5, 4.2, 76.0, 5.2, 102 / 203, 0.2),
        "MCI": GroupSpec(215, 14.5, 3.9, 74.7, 7.5, 138 / 215, 1.2),
    }


def _allocate_items(global_score: float, rng: np.random.Generator) -> np.ndarray:
    """Split a global score across the 13 items, respecting item ranges.

    Weights are proportional to item maxima with multiplicative jitter;
    clipping residue is redistributed to items with headroom so the item
    sum equals the global score exactly.
    """
    maxima = np.array(ITEM_MAXIMA)
    weights = maxima * rng.gamma(shape=4.0, scale=0.25, size=NUM_ITEMS)
    weights = np.maximum(weights, 1e-6)
    scores = global_score * weights / weights.sum()
    for _ in range(50):
        clipped = np.clip(scores, 0.0, maxima)
        residual = global_score - clipped.sum()
        if abs(residual) < 1e-12:
            scores = clipped
            break
        headroom = (maxima - clipped) if residual > 0 else clipped
        total = headroom.sum()
        if total <= 0:
            scores = clipped
            break
        scores = clipped + residual * headroom / total
    return np.clip(scores, 0.0, maxima)


def _subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(subject_id.encode())])


def generate_cohort(spec: CohortSpec) -> List[SubjectRecord]:
    """Deterministic synthetic cohort with BL/M06/M24 ADAS-Cog trajectories."""
    cohort: List[SubjectRecord] = []
    maxima = np.array(ITEM_MAXIMA)
    for group_name in sorted(spec.groups):
        group = spec.groups[group_name]
        for i in range(group.size):
            subject_id = f"SYN-{group_name}-{i:04d}"
            rng = _subject_rng(spec.seed, subject_id)
            baseline_global = float(
                np.clip(
                    rng.normal(group.baseline_global_mean, group.baseline_global_sd),
                    0.0,
                    20.0,
                )
            )
            age = float(np.clip(rng.normal(group.age_mean, group.age_sd), 50.0, 95.0))
            sex = "M" if rng.random() < group.male_fraction else "F"

            baseline_items = _allocate_items(baseline_global, rng)
            drift_share = maxima / maxima.sum()  # item share of global drift
            assessments = {}
            for tp, years in YEARS.items():
                items = baseline_items + group.progression_drift * years * drift_share
                if years > 0 and spec.noise_sd > 0:
                    items = items + rng.normal(0.0, spec.noise_sd, size=NUM_ITEMS)
                items = np.clip(items, 0.0, maxima)
                assessments[tp] = AdasCogAssessment.from_items(
                    subject_id, tp, items.tolist()
                )
            cohort.append(
                SubjectRecord(
                    subject_id=subject_id,
                    diagnosis=group_name,
                    age=age,
                    sex=sex,
                    assessments=assessments,
                )
            )
    return cohort


@dataclass
class SignalPlan:
    signal_items: Tuple[str, ...] = ("Q1", "Q4", "Q8")
    region_center: Tuple[int, int, int] = (32, 32, 32)
    region_radius_base: float = 14.0
    atrophy_gain: float = 1.0  # voxels of radius lost per point of mean item score
    background_mean: float = 0.2
    background_sd: float = 0.05
    region_intensity: float = 0.9
    gain_field_strength: float = 0.0  # 0 disables the multiplicative bias field

    def validate(self, shape: Tuple[int, int, int]) -> None:
        unknown = set(self.signal_items) - set(ITEM_IDS)
        if unknown:
            raise ValueError(f"unknown signal items {sorted(unknown)}")
        for c, extent in zip(self.region_center, shape):
            if c - self.region_radius_base < 0 or c + self.region_radius_base > extent:
                raise ValueError(
                    f"signal region (center {self.region_center}, radius "
                    f"{self.region_radius_base}) does not fit inside shape {shape}"
                )


def default_signal_plan(shape: Tuple[int, int, int]) -> SignalPlan:
    m = min(shape)
    return SignalPlan(
        region_center=tuple(s // 2 for s in shape),
        region_radius_base=0.25 * m,
        atrophy_gain=0.015 * m,
    )


def planned_radius(subject: SubjectRecord, plan: SignalPlan) -> float:
    bl = subject.assessment("BL")
    idx = [ITEM_IDS.index(item) for item in plan.signal_items]
    mean_score = float(np.mean([bl.item_scores[i] for i in idx]))
    return max(plan.region_radius_base - plan.atrophy_gain * mean_score, 1.0)


def generate_volume(
    subject: SubjectRecord,
    plan: SignalPlan,
    shape: Tuple[int, int, int] = (64, 64, 64),
    seed: int = 0,
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0),
) -> Volume:
    """Phantom MRI: noise texture plus a bright sphere whose radius shrinks
    with the subject's baseline memory-item scores."""
    plan.validate(shape)
    rng = _subject_rng(seed, subject.subject_id + "/mri")
    voxels = np.clip(
        rng.normal(plan.background_mean, plan.background_sd, size=shape), 0.0, None
    )

    radius = planned_radius(subject, plan)
    grid = np.indices(shape).astype(np.float64)
    dist = np.sqrt(
        sum((grid[a] - plan.region_center[a]) ** 2 for a in range(3))
    )
    # soft 1-voxel edge so radius varies sub-voxel smoothly
    membership = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    voxels = voxels + (plan.region_intensity - voxels) * membership

    if plan.gain_field_strength > 0:
        axes = [np.linspace(0.0, np.pi, s) for s in shape]
        gain = 1.0 + plan.gain_field_strength * (
            np.cos(axes[0])[:, None, None]
            * np.cos(axes[1])[None, :, None]
            * np.cos(axes[2])[None, None, :]
        )
        voxels = voxels * gain

    return Volume(
        voxels=voxels, spacing=spacing, subject_id=subject.subject_id
    )
