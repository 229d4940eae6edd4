from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class FeatureConfig(BaseModel):
    """Frame analyzer settings; window and hop are in samples."""

    window: int = Field(default=200, ge=1)   # 25 ms at 8 kHz
    hop: int = Field(default=80, ge=1)       # 10 ms at 8 kHz
    n_bands: int = Field(default=40, ge=1)
    n_fft: int = Field(default=512, ge=2)

    @model_validator(mode="after")
    def check_window(self):
        if self.window < self.hop:
            raise ValueError(f"window ({self.window}) must be >= hop ({self.hop})")
        if self.n_fft < self.window:
            raise ValueError(f"n_fft ({self.n_fft}) must be >= window ({self.window})")
        return self


class FrameFeatures(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: np.ndarray  # [T_frames x D]
    frame_hop: float    # seconds
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


class KMeansModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    centroids: np.ndarray  # [k x D]
    k: int = Field(..., ge=2)
    family: str
    inertia: float
    inertia_history: List[float] = Field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


class RunLengthUnits(BaseModel):
    """Deduplicated units. ``durations`` is None when they are left to a predictor."""

    units: List[int] = Field(default_factory=list)
    durations: Optional[List[int]] = None
    family: str
    language: Optional[str] = None
    id_space: Literal["raw", "extended"] = "raw"

    @model_validator(mode="after")
    def check_runs(self):
        if any(a == b for a, b in zip(self.units, self.units[1:])):
            raise ValueError("consecutive units must differ")
        if self.durations is not None:
            if len(self.durations) != len(self.units):
                raise ValueError("durations and units differ in length")
            if any(d < 1 for d in self.durations):
                raise ValueError("durations must be positive frame counts")
        return self

    @property
    def total_frames(self) -> int:
        return sum(self.durations or [])

    def expand(self) -> List[int]:
        """Frame-level unit sequence (inverse of dedup)."""
        if self.durations is None:
            return list(self.units)
        return [u for u, d in zip(self.units, self.durations) for _ in range(d)]
