import json

import pytest
from click.testing import CliRunner

from admtl.cli import main
from admtl.pipeline import (
    ExperimentRun,
    PipelineError,
    resolve_config,
    run_ablation,
    run_pipeline,
    stage_hashes,
)

TINY_GROUPS = {
    "AD": dict(size=4, baseline_global_mean=17.1, baseline_global_sd=2.1,
               age_mean=73.4, age_sd=8.3, male_fraction=0.5, progression_drift=2.5),
    "NC": dict(size=8, baseline_global_mean=9.5, baseline_global_sd=4.2,
               age_mean=76.0, age_sd=5.2, male_fraction=0.5, progression_drift=0.2),
    "MCI": dict(size=8, baseline_global_mean=14.5, baseline_global_sd=3.9,
                age_mean=74.7, age_sd=7.5, male_fraction=0.6, progression_drift=1.2),
}

TINY_CLINICAL = {
    "seed": 1,
    "cohort": {"groups": TINY_GROUPS},
    "train": {"max_epochs": 3, "early_stop_patience": 3},
    "explain": {"num_permutations": 5, "num_samples": 2, "background_size": 4},
}

TINY_MRI = {
    **TINY_CLINICAL,
    "volume_shape": [16, 16, 16],
    "backbone": {"kind": "vit", "patch_size": 4, "embed_dim": 16, "depth": 1, "num_heads": 2},
    "modality": {"use_mri": True, "use_clinical": True},
}


def test_resolve_config_merges_nested():
    config = resolve_config({"train": {"max_epochs": 7}})
    assert config["train"]["max_epochs"] == 7
    assert config["train"]["batch_size"] == 8  # default preserved


def test_stage_hashes_chain():
    base = stage_hashes(resolve_config({}))
    changed = stage_hashes(resolve_config({"cohort": {"noise_sd": 2.0}}))
    assert base["synth"] != changed["synth"]
    assert base["train"] != changed["train"]
    same_downstream = stage_hashes(resolve_config({"explain": {"num_samples": 3}}))
    assert base["train"] == same_downstream["train"]
    assert base["explain"] != same_downstream["explain"]


def test_full_pipeline_clinical_only(tmp_path):
    out = tmp_path / "run"
    manifest = run_pipeline(TINY_CLINICAL, out)
    assert set(manifest["stages"]) == {"synth", "preprocess", "train", "evaluate", "explain"}
    for name in ("checkpoint.pt", "history.json", "report.json", "predictions.csv",
                 "attributions.json", "importance.csv", "config.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 1  # resolved config embedded
    assert len(report["metrics"]["outputs"]) == 14


def test_rerun_skips_everything(tmp_path):
    out = tmp_path / "run"
    first = run_pipeline(TINY_CLINICAL, out)
    checkpoint_mtime = (out / "checkpoint.pt").stat().st_mtime_ns
    second = run_pipeline(TINY_CLINICAL, out)
    assert first == second
    assert (out / "checkpoint.pt").stat().st_mtime_ns == checkpoint_mtime


def test_incremental_rerun_after_delete(tmp_path):
    out = tmp_path / "run"
    run_pipeline(TINY_CLINICAL, out)
    checkpoint_mtime = (out / "checkpoint.pt").stat().st_mtime_ns
    (out / "report.json").unlink()
    run_pipeline(TINY_CLINICAL, out)
    assert (out / "report.json").exists()
    # training untouched: only evaluate re-executed
    assert (out / "checkpoint.pt").stat().st_mtime_ns == checkpoint_mtime


def test_reproducible_reports(tmp_path):
    run_pipeline(TINY_CLINICAL, tmp_path / "a")
    run_pipeline(TINY_CLINICAL, tmp_path / "b")
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a == b


def test_lock_file_blocks_second_run(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / ".lock").touch()
    with pytest.raises(PipelineError, match="locked"):
        with ExperimentRun(TINY_CLINICAL, out):
            pass


def test_mri_pipeline_emits_sidecars(tmp_path):
    out = tmp_path / "run"
    config = dict(TINY_MRI)
    config["train"] = {"max_epochs": 1, "early_stop_patience": 1}
    with ExperimentRun(config, out) as run:
        run.run_synth()
        run.run_preprocess()
        run.run_train()
        run.run_evaluate()
    sidecars = sorted(out.glob("preproc/*_preproc.json"))
    assert len(sidecars) == 20
    payload = json.loads(sidecars[0].read_text())
    assert {"transform", "converged", "cv_before", "cv_after"} <= set(payload)
    assert (out / "report.json").exists()


def test_ablation_single_variant(tmp_path):
    report = run_ablation(
        TINY_CLINICAL, [{"use_mri": False, "use_clinical": True}], tmp_path / "abl"
    )
    assert len(report["rows"]) == 1
    row = report["rows"][0]
    assert row["feature_extraction"] == "N/A"
    assert row["input_data"] == "ADAS-Cog clinical scores"
    assert report["columns"] == ["Feature Extraction", "Input data", "MAE", "RMSE", "r"]


def test_ablation_shared_split(tmp_path):
    config = dict(TINY_MRI)
    config["train"] = {"max_epochs": 1, "early_stop_patience": 1}
    variants = [
        {"use_mri": False, "use_clinical": True},
        {"use_mri": True, "use_clinical": False},
        {"use_mri": True, "use_clinical": True},
    ]
    report = run_ablation(config, variants, tmp_path / "abl")
    assert len(report["rows"]) == 3
    hashes = {row["split_hash"] for row in report["rows"]}
    assert len(hashes) == 1
    assert report["shared_split"]


def test_cli_run_and_rerun(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(TINY_CLINICAL))
    runner = CliRunner()
    result = runner.invoke(
        main, ["run", "--config", str(config_path), "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "report.json").exists()


def test_cli_synth_only(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(TINY_CLINICAL))
    runner = CliRunner()
    result = runner.invoke(
        main, ["synth", "--config", str(config_path), "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "clinical.csv").exists()
    assert not (tmp_path / "out" / "checkpoint.pt").exists()


def test_cli_flag_overrides(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(TINY_CLINICAL))
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "synth", "--config", str(config_path), "--out", str(tmp_path / "out"),
            "--seed", "42",
        ],
    )
    assert result.exit_code == 0, result.output
    config = json.loads((tmp_path / "out" / "config.json").read_text())
    assert config["seed"] == 42
