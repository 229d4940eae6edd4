from typing import Dict, Optional

from pydantic import BaseModel, Field


class ArtifactManifest(BaseModel):
    """Written as ``manifest.json`` in every stage directory; no timestamps so reruns are byte-identical."""

    stage: str
    config_hash: str
    inputs: Dict[str, str] = Field(default_factory=dict)    # path -> sha256
    outputs: Dict[str, str] = Field(default_factory=dict)   # path relative to the stage dir -> sha256
    metadata: Dict[str, str] = Field(default_factory=dict)
    upstream: Optional[str] = None
