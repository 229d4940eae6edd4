import logging
from pathlib import Path
from typing import Callable, List, Optional, TypeVar

import typer

from models.config import RunConfig
from services.pipeline_service import PipelineService
from utils.config import load_run_config
from utils.errors import PipelineError

logger = logging.getLogger(__name__)

T = TypeVar("T")

ConfigOption = typer.Option(None, "--config", help="Plain-text section.key=value configuration file.")
SeedOption = typer.Option(None, "--seed", min=0, help="Run seed (overrides the config file).")
OutOption = typer.Option(None, "--out", help="Output directory (overrides the config file).")
SetOption = typer.Option([], "--set", help="Override one key: section.key=value (repeatable).")


def run_stage(
    config_path: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    overrides: List[str],
    action: Callable[[RunConfig], T],
) -> T:
    """Resolve the configuration and run ``action``; pipeline errors become their exit codes."""
    try:
        config = load_run_config(config_path, overrides, seed=seed, out=out)
        return action(config)
    except PipelineError as e:
        logger.error(e.detail)
        raise typer.Exit(code=e.exit_code)
    except typer.Exit:
        raise
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        raise typer.Exit(code=1)


def pipeline_action(method: str) -> Callable[[RunConfig], object]:
    """``action`` running one :class:`PipelineService` stage by method name."""
    return lambda config: getattr(PipelineService(config), method)()
