import logging
import sys

import typer

from routes.data import router as data_router
from routes.evaluation import router as evaluation_router
from routes.translation import router as translation_router
from routes.vocoder import router as vocoder_router
from utils.config import load_environment

app = typer.Typer(
    name="tones2st",
    help="Masked-unit speech-to-speech translation over synthetic tone languages.",
    no_args_is_help=True,
    add_completion=False,
)

for router in (data_router, translation_router, vocoder_router, evaluation_router):
    app.registered_commands.extend(router.registered_commands)


@app.callback()
def main():
    """Configure logging once per invocation (stderr; level from TONES2ST_LOG_LEVEL)."""
    level = load_environment()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


if __name__ == "__main__":
    app()
