import logging
from pathlib import Path
from typing import List, Optional

import typer

from routes.common import ConfigOption, OutOption, SeedOption, SetOption, run_stage
from services.experiment_service import ExperimentService
from services.pipeline_service import PipelineService

logger = logging.getLogger(__name__)

router = typer.Typer(help="ASR-BLEU evaluation and comparison experiments.")


@router.command("evaluate")
def evaluate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Score resynthesized translations with the oracle ASR (ASR-BLEU and WER per direction)."""

    def action(run_config):
        report = PipelineService(run_config).evaluate()
        for row in report.directions:
            logger.info(f"{row.direction}: ASR-BLEU {row.bleu.score:.2f} (n={row.n_examples})")
        logger.info(f"avg: ASR-BLEU {report.macro_average:.2f}")
        return report

    run_stage(config, seed, out, overrides, action)


@router.command("experiment")
def experiment(
    preset: str = typer.Argument(
        ..., help="vocoder-compare | s2st-compare | unit-granularity | mask-ablation | unit-sweep",
    ),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    overrides: List[str] = SetOption,
):
    """Run a comparison preset and write its CSV/JSON tables."""

    def action(run_config):
        table = ExperimentService(run_config).run(preset)
        logger.info(f"{preset}: {len(table)} result rows")
        return table

    run_stage(config, seed, out, overrides, action)
