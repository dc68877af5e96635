"""Subject-level splitting and the Adam training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .clinical import SubjectRecord, build_feature_vector, build_target_vector
from .imaging import Volume
from .loss import LossConfig, total_loss
from .model import ModalityConfig, MtlModel

LOGGER = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_patience: int = 10
    split_ratio: float = 0.8
    seed: int = 0
    modality: ModalityConfig = field(default_factory=ModalityConfig)

    def __post_init__(self) -> None:
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_total_loss: float
    val_total_loss: float
    val_mae_global: float
    val_pearson_global: float


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "epochs": [vars(e) for e in self.epochs],
        }


def split_subjects(
    cohort: Sequence[SubjectRecord], split_ratio: float, seed: int
) -> Tuple[List[str], List[str]]:
    """Disjoint train/val subject ids, stratified by diagnosis group."""
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    rng = np.random.default_rng(seed)
    groups: Dict[str, List[str]] = {}
    for subject in cohort:
        groups.setdefault(subject.diagnosis, []).append(subject.subject_id)

    if any(len(ids) < 2 for ids in groups.values()):
        LOGGER.warning(
            "a diagnosis group has < 2 subjects; falling back to unstratified split"
        )
        groups = {"all": [s.subject_id for s in cohort]}

    train_ids: List[str] = []
    val_ids: List[str] = []
    for name in sorted(groups):
        ids = sorted(groups[name])
        rng.shuffle(ids)
        n_train = int(round(split_ratio * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1)
        train_ids.extend(ids[:n_train])
        val_ids.extend(ids[n_train:])
    return sorted(train_ids), sorted(val_ids)


VolumeProvider = Callable[[SubjectRecord], Volume]


def assemble_tensors(
    subjects: Sequence[SubjectRecord],
    modality: ModalityConfig,
    volume_provider: Optional[VolumeProvider] = None,
) -> Dict[str, torch.Tensor]:
    """Stack features/targets (and volumes when needed) for a subject list."""
    features = np.stack([build_feature_vector(s) for s in subjects])
    targets = np.stack([build_target_vector(s) for s in subjects])
    out = {
        "clinical": torch.as_tensor(features, dtype=torch.float32),
        "targets": torch.as_tensor(targets, dtype=torch.float32),
    }
    if modality.use_mri:
        if volume_provider is None:
            raise TrainingError("use_mri=True requires a volume provider")
        vols = np.stack([volume_provider(s).voxels for s in subjects])
        out["volumes"] = torch.as_tensor(vols, dtype=torch.float32)
    return out


def _forward(model: MtlModel, tensors: Dict[str, torch.Tensor], idx=None) -> torch.Tensor:
    volumes = tensors.get("volumes")
    clinical = tensors["clinical"]
    if idx is not None:
        volumes = volumes[idx] if volumes is not None else None
        clinical = clinical[idx]
    return model(
        volumes=volumes if model.modality.use_mri else None,
        clinical=clinical if model.modality.use_clinical else None,
    )


def train(
    model: MtlModel,
    cohort: Sequence[SubjectRecord],
    config: TrainConfig,
    volume_provider: Optional[VolumeProvider] = None,
) -> Tuple[MtlModel, TrainHistory]:
    """Adam on the combined loss with early stopping and best-epoch restore."""
    from .evaluation import pearson  # local import avoids a module cycle

    eligible = [s for s in cohort if s.is_eligible()]
    if not eligible:
        raise TrainingError("no eligible subjects in the cohort")
    train_ids, val_ids = split_subjects(eligible, config.split_ratio, config.seed)
    by_id = {s.subject_id: s for s in eligible}
    train_subjects = [by_id[i] for i in train_ids]
    val_subjects = [by_id[i] for i in val_ids]
    if not train_subjects:
        raise TrainingError("empty training set")

    train_t = assemble_tensors(train_subjects, config.modality, volume_provider)
    val_t = assemble_tensors(val_subjects, config.modality, volume_provider)

    loss_config = LossConfig(alpha=config.alpha)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    gen = torch.Generator().manual_seed(config.seed)

    history = TrainHistory()
    best_val = float("inf")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    epochs_since_best = 0
    n = len(train_subjects)

    for epoch in range(config.max_epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            preds = _forward(model, train_t, idx)
            loss = total_loss(preds, train_t["targets"][idx], loss_config)
            if not torch.isfinite(loss):
                bad = [
                    h for h in range(preds.shape[1])
                    if not torch.isfinite(preds[:, h]).all()
                ]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                    f" (offending heads: {bad or 'none; targets?'})"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= n

        model.eval()
        with torch.no_grad():
            val_preds = _forward(model, val_t)
            val_loss = float(total_loss(val_preds, val_t["targets"], loss_config))
            errs = (val_preds[:, 0] - val_t["targets"][:, 0]).abs()
            val_mae = float(errs.mean())
            try:
                val_r = pearson(
                    val_preds[:, 0].numpy(), val_t["targets"][:, 0].numpy()
                )
            except ValueError:
                val_r = float("nan")
        history.epochs.append(
            EpochRecord(epoch, epoch_loss, val_loss, val_mae, val_r)
        )

        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.early_stop_patience:
                break

    model.load_state_dict(best_state)
    return model, history
