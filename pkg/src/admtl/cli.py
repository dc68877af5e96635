"""Command-line entry points for the experiment pipeline."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click

from . import pipeline

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

MODALITY_CHOICES = {
    "clinical": {"use_mri": False, "use_clinical": True},
    "mri": {"use_mri": True, "use_clinical": False},
    "both": {"use_mri": True, "use_clinical": True},
}


def _load_config(config_path, seed, modality, backbone, alpha) -> dict:
    overrides = {}
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
    if seed is not None:
        overrides["seed"] = seed
    if modality is not None:
        overrides["modality"] = MODALITY_CHOICES[modality]
    if backbone is not None:
        overrides.setdefault("backbone", {})["kind"] = backbone
    if alpha is not None:
        overrides.setdefault("train", {})["alpha"] = alpha
    return pipeline.resolve_config(overrides)


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), required=True)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option(
        "--modality", type=click.Choice(sorted(MODALITY_CHOICES)), default=None
    )(fn)
    fn = click.option(
        "--backbone", type=click.Choice(["vit", "swin", "none"]), default=None
    )(fn)
    fn = click.option("--alpha", type=float, default=None)(fn)
    return fn


@click.group()
def main() -> None:
    """Joint prediction of ADAS-Cog 13 global and sub-scores at Month 24."""


def _make_stage_command(name: str, stages: list[str], help_text: str):
    @main.command(name=name, help=help_text)
    @common_options
    def command(config_path, out_dir, seed, modality, backbone, alpha):
        config = _load_config(config_path, seed, modality, backbone, alpha)
        with pipeline.ExperimentRun(config, out_dir) as run:
            for stage in stages:
                getattr(run, f"run_{stage}")()
        click.echo(f"{name}: done ({out_dir})")

    return command


_make_stage_command("synth", ["synth"], "Generate the synthetic cohort (CSV + volumes).")
_make_stage_command(
    "preprocess", ["synth", "preprocess"], "Bias-correct, register, and normalize volumes."
)
_make_stage_command(
    "train", ["synth", "preprocess", "train"], "Train the multi-task model."
)
_make_stage_command(
    "evaluate",
    ["synth", "preprocess", "train", "evaluate"],
    "Evaluate on the validation split and write report.json.",
)
_make_stage_command(
    "explain",
    ["synth", "preprocess", "train", "explain"],
    "Shapley attributions for validation samples.",
)


@main.command(name="run", help="Run the full pipeline end to end.")
@common_options
def run_command(config_path, out_dir, seed, modality, backbone, alpha):
    config = _load_config(config_path, seed, modality, backbone, alpha)
    manifest = pipeline.run_pipeline(config, out_dir)
    click.echo(json.dumps({"stages": sorted(manifest["stages"])}, indent=2))


@main.command(name="ablate", help="Modality ablation: clinical-only, MRI-only, combined.")
@common_options
@click.option(
    "--variants",
    default="clinical,mri,both",
    show_default=True,
    help="Comma-separated modality variants to train.",
)
def ablate_command(config_path, out_dir, seed, modality, backbone, alpha, variants):
    config = _load_config(config_path, seed, modality, backbone, alpha)
    variant_list = [MODALITY_CHOICES[v.strip()] for v in variants.split(",") if v.strip()]
    report = pipeline.run_ablation(config, variant_list, out_dir)
    for row in report["rows"]:
        if "error" in row:
            click.echo(f"{row['input_data']}: FAILED ({row['error']})")
        else:
            click.echo(
                f"{row['feature_extraction']:<18} {row['input_data']:<42} "
                f"MAE {row['mae']:.3f}  RMSE {row['rmse']:.3f}  r {row['r']}"
            )


if __name__ == "__main__":
    main()
