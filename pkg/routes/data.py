from pathlib import Path
from typing import List, Optional

import typer

from routes.common import ConfigOption, OutOption, SeedOption, SetOption, pipeline_action, run_stage

router = typer.Typer(help="World, corpus, features and discrete units.")


@router.command("world-gen")
def world_gen(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Define the synthetic tone-language world."""
    run_stage(config, seed, out, overrides, pipeline_action("world_gen"))


@router.command("corpus-gen")
def corpus_gen(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Synthesize parallel utterance pairs for every direction and split."""
    run_stage(config, seed, out, overrides, pipeline_action("corpus_gen"))


@router.command("features")
def features(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Extract log band-energy frames for source and target audio."""
    run_stage(config, seed, out, overrides, pipeline_action("extract_features"))


@router.command("kmeans-train")
def kmeans_train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Fit one k-means model per family (or per language)."""
    run_stage(config, seed, out, overrides, pipeline_action("kmeans_train"))


@router.command("units-extract")
def units_extract(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Quantize and deduplicate target audio; build the extended vocabulary."""
    run_stage(config, seed, out, overrides, pipeline_action("units_extract"))
