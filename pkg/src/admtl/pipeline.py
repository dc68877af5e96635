"""Experiment driver: synth -> preprocess -> train -> evaluate -> explain.

Stages are cached by config-subtree hash so reruns only redo work whose
inputs changed. Every run writes a manifest with content hashes and the
fully resolved config.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import clinical, evaluation, explain, imaging, synth, training
from .model import BackboneConfig, MtlModel, ModalityConfig, build_model, load_checkpoint, save_checkpoint
from .registration import RegistrationConfig, register_rigid

LOGGER = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict = {
    "seed": 0,
    "cohort": {"noise_sd": 1.0, "groups": None},
    "volume_shape": [32, 32, 32],
    "signal": {"gain_field_strength": 0.1},
    "preprocess": {"smoothing_scale": 24.0, "bias_correct": True, "register": False},
    "backbone": {
        "kind": "vit",
        "patch_size": 8,
        "embed_dim": 32,
        "depth": 2,
        "num_heads": 4,
        "window_size": 4,
        "num_stages": 2,
        "mlp_ratio": 2.0,
        "pooling": "mean",
    },
    "modality": {"use_mri": False, "use_clinical": True},
    "trunk_width": 64,
    "train": {
        "alpha": 0.5,
        "learning_rate": 1e-3,
        "batch_size": 8,
        "max_epochs": 100,
        "early_stop_patience": 10,
        "split_ratio": 0.8,
    },
    "explain": {
        "mode": "sampled",
        "num_permutations": 50,
        "num_samples": 5,
        "background_size": 20,
        "target_output": 0,
    },
}


class PipelineError(RuntimeError):
    pass


def resolve_config(overrides: Optional[Dict] = None) -> Dict:
    """Merge user overrides into the defaults (one nesting level deep)."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    return config


def _hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stage_hashes(config: Dict) -> Dict[str, str]:
    """Chained per-stage hashes: a change upstream invalidates downstream."""
    h: Dict[str, str] = {}
    h["synth"] = _hash(
        {
            "seed": config["seed"],
            "cohort": config["cohort"],
            "volume_shape": config["volume_shape"],
            "signal": config["signal"],
            "use_mri": config["modality"]["use_mri"],
        }
    )
    h["preprocess"] = _hash({"prev": h["synth"], "preprocess": config["preprocess"]})
    h["train"] = _hash(
        {
            "prev": h["preprocess"],
            "backbone": config["backbone"],
            "modality": config["modality"],
            "trunk_width": config["trunk_width"],
            "train": config["train"],
            "seed": config["seed"],
        }
    )
    h["evaluate"] = _hash({"prev": h["train"]})
    h["explain"] = _hash({"prev": h["train"], "explain": config["explain"]})
    return h


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.data: Dict = {"stages": {}}
        if path.exists():
            self.data = json.loads(path.read_text())

    def is_current(self, stage: str, stage_hash: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None or entry["hash"] != stage_hash:
            return False
        return all(Path(f).exists() for f in entry["files"])

    def record(self, stage: str, stage_hash: str, files: Sequence[Path]) -> None:
        self.data["stages"][stage] = {
            "hash": stage_hash,
            "files": {str(f): _file_hash(Path(f)) for f in files},
        }
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _cohort_spec(config: Dict) -> synth.CohortSpec:
    cohort_cfg = config["cohort"]
    groups = synth.default_groups()
    if cohort_cfg.get("groups"):
        groups = {
            name: synth.GroupSpec(**params) for name, params in cohort_cfg["groups"].items()
        }
    return synth.CohortSpec(
        groups=groups, noise_sd=cohort_cfg.get("noise_sd", 1.0), seed=config["seed"]
    )


def _signal_plan(config: Dict) -> synth.SignalPlan:
    shape = tuple(config["volume_shape"])
    plan = synth.default_signal_plan(shape)
    for key, value in config["signal"].items():
        setattr(plan, key, tuple(value) if key in ("signal_items", "region_center") else value)
    return plan


def _backbone_config(config: Dict) -> BackboneConfig:
    params = dict(config["backbone"])
    params["input_shape"] = tuple(config["volume_shape"])
    return BackboneConfig(**params)


class ExperimentRun:
    """One output directory owned by one run (lock file enforced)."""

    def __init__(self, config: Dict, out_dir: Path | str):
        self.config = resolve_config(config)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hashes = stage_hashes(self.config)
        self.manifest = Manifest(self.out / "manifest.json")
        (self.out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True))

    # -- locking ---------------------------------------------------------
    def __enter__(self) -> "ExperimentRun":
        self._lock = self.out / ".lock"
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise PipelineError(
                f"{self.out} is locked by another run (remove {self._lock} if stale)"
            ) from None
        return self

    def __exit__(self, *exc) -> None:
        self._lock.unlink(missing_ok=True)

    # -- paths -----------------------------------------------------------
    @property
    def clinical_csv(self) -> Path:
        return self.out / "clinical.csv"

    @property
    def volumes_dir(self) -> Path:
        return self.out / "volumes"

    @property
    def preproc_dir(self) -> Path:
        return self.out / "preproc"

    def _volume_path(self, subject_id: str, preproc: bool) -> Path:
        base = self.preproc_dir if preproc else self.volumes_dir
        suffix = "_preproc" if preproc else ""
        return base / f"{subject_id}{suffix}.nii"

    # -- stages ----------------------------------------------------------
    def run_synth(self) -> List[Path]:
        stage = "synth"
        if self.manifest.is_current(stage, self.hashes[stage]):
            LOGGER.info("synth: up to date, skipping")
            return []
        spec = _cohort_spec(self.config)
        cohort = synth.generate_cohort(spec)
        clinical.write_clinical_csv(cohort, self.clinical_csv)
        files = [self.clinical_csv]
        if self.config["modality"]["use_mri"]:
            plan = _signal_plan(self.config)
            shape = tuple(self.config["volume_shape"])
            self.volumes_dir.mkdir(exist_ok=True)
            for subject in cohort:
                volume = synth.generate_volume(
                    subject, plan, shape=shape, seed=self.config["seed"]
                )
                path = self._volume_path(subject.subject_id, preproc=False)
                imaging.save_volume(volume, path)
                files.append(path)
        synth_manifest = self.out / "synth_manifest.json"
        synth_manifest.write_text(
            json.dumps(
                {
                    "seed": self.config["seed"],
                    "n_subjects": len(cohort),
                    "files": [str(f) for f in files],
                },
                indent=2,
            )
        )
        files.append(synth_manifest)
        self.manifest.record(stage, self.hashes[stage], files)
        return files

    def run_preprocess(self) -> List[Path]:
        stage = "preprocess"
        if self.manifest.is_current(stage, self.hashes[stage]):
            LOGGER.info("preprocess: up to date, skipping")
            return []
        files: List[Path] = []
        if self.config["modality"]["use_mri"]:
            cfg = self.config["preprocess"]
            self.preproc_dir.mkdir(exist_ok=True)
            cohort = clinical.parse_clinical_csv(self.clinical_csv)
            reference = None
            for subject in cohort:
                volume = imaging.load_volume(
                    self._volume_path(subject.subject_id, preproc=False)
                )
                mask = imaging.foreground_mask(volume.voxels)
                cv_before = imaging.coefficient_of_variation(volume.voxels, mask)
                if cfg["bias_correct"]:
                    volume = imaging.correct_bias_field(volume, cfg["smoothing_scale"])
                cv_after = imaging.coefficient_of_variation(volume.voxels, mask)
                transform = {"rotation": [0.0] * 3, "translation": [0.0] * 3}
                converged = True
                if cfg["register"]:
                    if reference is None:
                        reference = volume
                    else:
                        result = register_rigid(volume, reference, RegistrationConfig())
                        volume = result.resampled
                        transform = {
                            "rotation": list(result.transform.rotation),
                            "translation": list(result.transform.translation),
                        }
                        converged = result.converged
                volume = imaging.normalize_intensity(volume)
                path = self._volume_path(subject.subject_id, preproc=True)
                imaging.save_volume(volume, path)
                sidecar = path.with_suffix(".json")
                sidecar.write_text(
                    json.dumps(
                        {
                            "transform": transform,
                            "converged": converged,
                            "cv_before": cv_before,
                            "cv_after": cv_after,
                        },
                        indent=2,
                    )
                )
                files.extend([path, sidecar])
        self.manifest.record(stage, self.hashes[stage], files)
        return files

    def _volume_provider(self) -> training.VolumeProvider:
        def provider(subject: clinical.SubjectRecord) -> imaging.Volume:
            return imaging.load_volume(self._volume_path(subject.subject_id, preproc=True))

        return provider

    def _load_cohort(self) -> List[clinical.SubjectRecord]:
        cohort = clinical.parse_clinical_csv(self.clinical_csv)
        if self.config["modality"]["use_mri"]:
            for subject in cohort:
                subject.mri_path = self._volume_path(subject.subject_id, preproc=True)
        return cohort

    def _build_model(self) -> MtlModel:
        return build_model(
            _backbone_config(self.config),
            ModalityConfig(**self.config["modality"]),
            trunk_width=self.config["trunk_width"],
            seed=self.config["seed"],
        )

    def run_train(self) -> List[Path]:
        stage = "train"
        checkpoint = self.out / "checkpoint.pt"
        history_path = self.out / "history.json"
        if self.manifest.is_current(stage, self.hashes[stage]):
            LOGGER.info("train: up to date, skipping")
            return []
        cohort = self._load_cohort()
        model = self._build_model()
        config = training.TrainConfig(
            seed=self.config["seed"],
            modality=ModalityConfig(**self.config["modality"]),
            **self.config["train"],
        )
        provider = self._volume_provider() if config.modality.use_mri else None
        model, history = training.train(model, cohort, config, volume_provider=provider)
        save_checkpoint(model, checkpoint)
        history_path.write_text(
            json.dumps(
                {"config": self.config, **history.to_json()}, indent=2, sort_keys=True
            )
        )
        self.manifest.record(stage, self.hashes[stage], [checkpoint, history_path])
        return [checkpoint, history_path]

    def _validation_subjects(self) -> List[clinical.SubjectRecord]:
        cohort = [s for s in self._load_cohort() if s.is_eligible()]
        _, val_ids = training.split_subjects(
            cohort, self.config["train"]["split_ratio"], self.config["seed"]
        )
        by_id = {s.subject_id: s for s in cohort}
        return [by_id[i] for i in val_ids]

    def run_evaluate(self) -> List[Path]:
        stage = "evaluate"
        report_path = self.out / "report.json"
        csv_path = self.out / "predictions.csv"
        if self.manifest.is_current(stage, self.hashes[stage]):
            LOGGER.info("evaluate: up to date, skipping")
            return []
        model = load_checkpoint(self.out / "checkpoint.pt")
        subjects = self._validation_subjects()
        provider = self._volume_provider() if model.modality.use_mri else None
        report = evaluation.evaluate(model, subjects, volume_provider=provider)
        report_path.write_text(
            json.dumps(
                {"config": self.config, "metrics": report.to_json()},
                indent=2,
                sort_keys=True,
            )
        )
        evaluation.predictions_csv(report, csv_path)
        self.manifest.record(stage, self.hashes[stage], [report_path, csv_path])
        return [report_path, csv_path]

    def run_explain(self) -> List[Path]:
        stage = "explain"
        attr_path = self.out / "attributions.json"
        rank_path = self.out / "importance.csv"
        if self.manifest.is_current(stage, self.hashes[stage]):
            LOGGER.info("explain: up to date, skipping")
            return []
        cfg = self.config["explain"]
        model = load_checkpoint(self.out / "checkpoint.pt")
        subjects = self._validation_subjects()
        use_mri = model.modality.use_mri
        provider = self._volume_provider() if use_mri else None

        background = subjects[: cfg["background_size"]]
        explained = subjects[: cfg["num_samples"]]
        bg_clinical = np.stack([clinical.build_feature_vector(s) for s in background])
        bg_volumes = (
            np.stack([provider(s).voxels for s in background]) if use_mri else None
        )
        config = explain.AttributionConfig(
            target_output=cfg["target_output"],
            mode=cfg["mode"],
            num_permutations=cfg["num_permutations"],
            seed=self.config["seed"],
            groups=explain.default_feature_groups(use_mri),
        )
        attributions = []
        for subject in explained:
            attributions.append(
                explain.shapley_attribution(
                    model,
                    clinical.build_feature_vector(subject),
                    bg_clinical,
                    config,
                    sample_volume=provider(subject).voxels if use_mri else None,
                    background_volumes=bg_volumes,
                    sample_id=subject.subject_id,
                )
            )
        attr_path.write_text(
            json.dumps(
                {"config": self.config, "attributions": [vars(a) for a in attributions]},
                indent=2,
                sort_keys=True,
            )
        )
        ranking = explain.importance_summary(attributions)
        rank_path.write_text(
            "group,mean_abs_shapley\n"
            + "\n".join(f"{name},{value:.9f}" for name, value in ranking)
            + "\n"
        )
        self.manifest.record(stage, self.hashes[stage], [attr_path, rank_path])
        return [attr_path, rank_path]

    def run_all(self) -> Dict:
        self.run_synth()
        self.run_preprocess()
        self.run_train()
        self.run_evaluate()
        self.run_explain()
        return self.manifest.data


def run_pipeline(config: Dict, out_dir: Path | str) -> Dict:
    with ExperimentRun(config, out_dir) as run:
        return run.run_all()


MODALITY_LABELS = {
    (True, True): "Baseline MRI + ADAS-Cog clinical scores",
    (True, False): "Baseline MRI",
    (False, True): "ADAS-Cog clinical scores",
}

BACKBONE_LABELS = {"vit": "ViT", "swin": "Swin Transformer", "none": "N/A"}


def run_ablation(
    config: Dict, variants: Sequence[Dict], out_dir: Path | str
) -> Dict:
    """Train one model per modality variant on the identical cohort and split.

    Emits ablation.json with one row per variant in the
    {Feature Extraction, Input data, MAE, RMSE, r} layout.
    """
    if not variants:
        raise PipelineError("no ablation variants given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = resolve_config(config)
    rows = []
    split_hashes = set()
    for variant in variants:
        variant_config = copy.deepcopy(base)
        variant_config["modality"] = dict(variant)
        if not variant["use_mri"]:
            variant_config["backbone"] = dict(variant_config["backbone"], kind="none")
        label = MODALITY_LABELS[(variant["use_mri"], variant["use_clinical"])]
        variant_dir = out_dir / (
            "variant_"
            + ("mri" if variant["use_mri"] else "")
            + ("clinical" if variant["use_clinical"] else "")
        )
        try:
            with ExperimentRun(variant_config, variant_dir) as run:
                run.run_synth()
                run.run_preprocess()
                run.run_train()
                run.run_evaluate()
                metrics = json.loads((variant_dir / "report.json").read_text())["metrics"]
                global_metrics = metrics["outputs"][0]
                split_ids = [
                    s.subject_id for s in run._validation_subjects()
                ]
                split_hash = _hash(split_ids)
                split_hashes.add(split_hash)
                rows.append(
                    {
                        "feature_extraction": BACKBONE_LABELS[
                            variant_config["backbone"]["kind"]
                        ],
                        "regression_module": "Linear Layer",
                        "input_data": label,
                        "mae": global_metrics["mae"],
                        "rmse": global_metrics["rmse"],
                        "r": global_metrics["pearson_r"],
                        "split_hash": split_hash,
                    }
                )
        except Exception as exc:  # keep the partial report on variant failure
            LOGGER.exception("variant %s failed", label)
            rows.append({"input_data": label, "error": str(exc)})
    report = {
        "columns": ["Feature Extraction", "Input data", "MAE", "RMSE", "r"],
        "rows": rows,
        "shared_split": len(split_hashes) <= 1,
    }
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
