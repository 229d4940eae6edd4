import sys
from datetime import datetime, timezone
from typing import Dict, Optional, TextIO

from pydantic import BaseModel, Field


class ProgressEvent(BaseModel):
    event: str
    stage: Optional[str] = None
    step: Optional[int] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    detail: Optional[str] = None
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


_stream: Optional[TextIO] = None


def set_stream(stream: Optional[TextIO]) -> None:
    """Redirect events (tests); ``None`` restores stdout."""
    global _stream
    _stream = stream


def emit(event: str, stage: Optional[str] = None, step: Optional[int] = None, detail: Optional[str] = None, **metrics) -> ProgressEvent:
    """Write one JSON object per line to standard output."""
    record = ProgressEvent(
        event=event,
        stage=stage,
        step=step,
        detail=detail,
        metrics={key: float(value) for key, value in metrics.items()},
    )
    stream = _stream or sys.stdout
    stream.write(record.model_dump_json(exclude_none=True) + "\n")
    stream.flush()
    return record
