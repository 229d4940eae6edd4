from pathlib import Path
from typing import List, Optional

import typer

from routes.common import ConfigOption, OutOption, SeedOption, SetOption, pipeline_action, run_stage

router = typer.Typer(help="Unit vocoders.")


@router.command("vocoder-train")
def vocoder_train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Train one vocoder per family (vocoder.scope=multi) or per language (mono)."""
    run_stage(config, seed, out, overrides, pipeline_action("vocoder_train"))


@router.command("resynth")
def resynth(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Write PCM16 WAVs for translated (or gold, with eval.gold_units=true) units."""
    run_stage(config, seed, out, overrides, pipeline_action("resynth"))
