"""Shapley attribution with background replacement: exact and sampled modes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .clinical import FEATURE_DIM, FEATURE_NAMES
from .model import MtlModel

EXACT_MODE_MAX_GROUPS = 15


class AttributionError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    clinical_indices: Tuple[int, ...] = ()
    is_mri: bool = False


def default_feature_groups(use_mri: bool) -> List[FeatureGroup]:
    """Every clinical feature its own group; the whole MRI volume as one."""
    groups = [
        FeatureGroup(name=name, clinical_indices=(i,))
        for i, name in enumerate(FEATURE_NAMES)
    ]
    if use_mri:
        groups.append(FeatureGroup(name="mri", is_mri=True))
    return groups


@dataclass
class AttributionConfig:
    target_output: int = 0  # head to explain; 0 is the global score
    mode: str = "exact"  # exact | sampled
    num_permutations: int = 200
    seed: int = 0
    groups: Optional[List[FeatureGroup]] = None

    def __post_init__(self) -> None:
        if self.mode not in ("exact", "sampled"):
            raise AttributionError(f"unknown mode {self.mode!r}")
        if self.num_permutations < 1:
            raise AttributionError("num_permutations must be >= 1")


@dataclass
class Attribution:
    sample_id: str
    target_output: int
    group_names: List[str]
    shapley_values: List[float]
    base_value: float  # mean model output over the background set
    prediction: float  # model output on the explained sample


ValueFunction = Callable[[np.ndarray], float]  # boolean membership -> v(S)


def exact_shapley(value_fn: ValueFunction, num_groups: int) -> np.ndarray:
    """Exact Shapley values by full coalition enumeration."""
    if num_groups > EXACT_MODE_MAX_GROUPS:
        raise AttributionError(
            f"exact mode supports at most {EXACT_MODE_MAX_GROUPS} groups "
            f"(got {num_groups}); use sampled mode"
        )
    cache: Dict[frozenset, float] = {}
    for size in range(num_groups + 1):
        for subset in combinations(range(num_groups), size):
            mask = np.zeros(num_groups, dtype=bool)
            mask[list(subset)] = True
            cache[frozenset(subset)] = float(value_fn(mask))

    phi = np.zeros(num_groups)
    fact = math.factorial
    m = num_groups
    for j in range(m):
        others = [g for g in range(m) if g != j]
        for size in range(m):
            weight = fact(size) * fact(m - size - 1) / fact(m)
            for subset in combinations(others, size):
                s = frozenset(subset)
                phi[j] += weight * (cache[s | {j}] - cache[s])
    return phi


def sampled_shapley(
    value_fn: ValueFunction, num_groups: int, num_permutations: int, seed: int
) -> np.ndarray:
    """Monte Carlo Shapley: average marginal contributions over permutations."""
    rng = np.random.default_rng(seed)
    phi = np.zeros(num_groups)
    for _ in range(num_permutations):
        order = rng.permutation(num_groups)
        mask = np.zeros(num_groups, dtype=bool)
        prev = value_fn(mask)
        for j in order:
            mask[j] = True
            current = value_fn(mask)
            phi[j] += current - prev
            prev = current
    return phi / num_permutations


PredictFn = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


def attribute(
    predict_fn: PredictFn,
    sample_clinical: np.ndarray,
    background_clinical: np.ndarray,
    config: AttributionConfig,
    sample_volume: Optional[np.ndarray] = None,
    background_volumes: Optional[np.ndarray] = None,
    sample_id: str = "sample",
) -> Attribution:
    """Shapley attribution of predict_fn's output for one sample.

    v(S) replaces features outside S with each background sample's values
    and averages the prediction over the background set.
    """
    groups = config.groups or default_feature_groups(sample_volume is not None)
    sample_clinical = np.asarray(sample_clinical, dtype=np.float64)
    background_clinical = np.atleast_2d(np.asarray(background_clinical, dtype=np.float64))
    if background_clinical.shape[0] == 0:
        raise AttributionError("background set is empty")
    covered = sorted(i for g in groups for i in g.clinical_indices)
    if covered != list(range(sample_clinical.shape[0])):
        raise AttributionError("feature groups must partition the clinical features")
    if any(g.is_mri for g in groups) and sample_volume is None:
        raise AttributionError("an MRI group is configured but no volume was given")

    n_bg = background_clinical.shape[0]

    def value_fn(mask: np.ndarray) -> float:
        clinical = background_clinical.copy()
        volumes = None
        if background_volumes is not None:
            volumes = np.array(background_volumes, copy=True)
        for g, member in zip(groups, mask):
            if not member:
                continue
            if g.is_mri:
                volumes = np.broadcast_to(sample_volume, volumes.shape).copy()
            else:
                clinical[:, list(g.clinical_indices)] = sample_clinical[
                    list(g.clinical_indices)
                ]
        out = np.asarray(predict_fn(clinical, volumes), dtype=np.float64)
        return float(out.mean())

    if config.mode == "exact":
        phi = exact_shapley(value_fn, len(groups))
    else:
        phi = sampled_shapley(
            value_fn, len(groups), config.num_permutations, config.seed
        )

    base = value_fn(np.zeros(len(groups), dtype=bool))
    full = value_fn(np.ones(len(groups), dtype=bool))
    return Attribution(
        sample_id=sample_id,
        target_output=config.target_output,
        group_names=[g.name for g in groups],
        shapley_values=phi.tolist(),
        base_value=base,
        prediction=full,
    )


def model_predict_fn(model: MtlModel, target_output: int) -> PredictFn:
    """Adapt an MtlModel to the (clinical, volumes) -> outputs interface."""

    def predict(clinical: np.ndarray, volumes: Optional[np.ndarray]) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            out = model(
                volumes=(
                    torch.as_tensor(volumes, dtype=torch.float32)
                    if model.modality.use_mri
                    else None
                ),
                clinical=(
                    torch.as_tensor(clinical, dtype=torch.float32)
                    if model.modality.use_clinical
                    else None
                ),
            )
        return out[:, target_output].numpy().astype(np.float64)

    return predict


def shapley_attribution(
    model: MtlModel,
    sample_clinical: np.ndarray,
    background_clinical: np.ndarray,
    config: AttributionConfig,
    sample_volume: Optional[np.ndarray] = None,
    background_volumes: Optional[np.ndarray] = None,
    sample_id: str = "sample",
) -> Attribution:
    return attribute(
        model_predict_fn(model, config.target_output),
        sample_clinical,
        background_clinical,
        config,
        sample_volume=sample_volume,
        background_volumes=background_volumes,
        sample_id=sample_id,
    )


def importance_summary(attributions: Sequence[Attribution]) -> List[Tuple[str, float]]:
    """Mean absolute Shapley value per group, ranked descending."""
    if not attributions:
        raise AttributionError("no attributions given")
    names = attributions[0].group_names
    for a in attributions[1:]:
        if a.group_names != names:
            raise AttributionError("attributions use different feature groupings")
    values = np.abs(np.asarray([a.shapley_values for a in attributions])).mean(axis=0)
    return sorted(zip(names, values.tolist()), key=lambda kv: (-kv[1], kv[0]))
