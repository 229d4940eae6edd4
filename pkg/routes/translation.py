from pathlib import Path
from typing import List, Optional

import typer

from routes.common import ConfigOption, OutOption, SeedOption, SetOption, pipeline_action, run_stage

router = typer.Typer(help="Speech-to-masked-unit translation.")


@router.command("s2mu-train")
def s2mu_train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Train the S2MU model (multilingual, or bilingual with s2mu.mode=bilingual)."""
    run_stage(config, seed, out, overrides, pipeline_action("s2mu_train"))


@router.command("translate")
def translate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Decode target units for the eval.split rows (masked unless s2mu.masked=false)."""
    run_stage(config, seed, out, overrides, pipeline_action("translate"))
