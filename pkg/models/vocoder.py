from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator


class MelConfig(BaseModel):
    sample_rate: int = Field(default=8000, ge=1)
    n_fft: int = Field(default=256, ge=8)
    hop: int = Field(default=80, ge=1)
    n_mels: int = Field(default=32, ge=1)
    fmin: float = Field(default=0.0, ge=0.0)
    fmax: Optional[float] = None
    floor: float = Field(default=1e-5, gt=0.0)


class VocoderConfig(BaseModel):
    """Unit-to-waveform generator plus its auxiliary modules for one family."""

    family: str
    languages: List[str]
    num_units: int = Field(..., ge=1)
    num_speakers: int = Field(default=4, ge=1)
    unit_dim: int = Field(default=32, ge=1)
    speaker_dim: int = Field(default=128, ge=1)
    language_dim: int = Field(default=128, ge=1)
    language_mode: Literal["prepend", "concat", "none"] = "prepend"
    hop: int = Field(default=80, ge=1)
    upsample_strides: List[int] = Field(default_factory=lambda: [8, 10])
    upsample_channels: int = Field(default=64, ge=2)
    residual_blocks: int = Field(default=4, ge=0)
    residual_kernel: int = Field(default=3, ge=1)
    residual_dilations: List[int] = Field(default_factory=lambda: [1, 3])
    duration_channels: int = Field(default=32, ge=1)
    duration_kernel: int = Field(default=3, ge=1)
    lid_channels: int = Field(default=32, ge=1)
    lid_kernel: int = Field(default=3, ge=1)
    mpd_periods: List[int] = Field(default_factory=lambda: [2, 3])
    msd_scales: List[int] = Field(default_factory=lambda: [1, 2])
    discriminator_channels: int = Field(default=16, ge=1)
    mel: MelConfig = Field(default_factory=MelConfig)

    @model_validator(mode="after")
    def check_upsampling(self):
        product = int(np.prod(self.upsample_strides)) if self.upsample_strides else 1
        if product != self.hop:
            raise ValueError(
                f"upsampling factor {product} (strides {self.upsample_strides}) must equal the feature hop {self.hop}"
            )
        if self.upsample_channels >> len(self.upsample_strides) < 1:
            raise ValueError(f"upsample_channels {self.upsample_channels} halves below 1 over {len(self.upsample_strides)} stages")
        if not self.languages:
            raise ValueError("a vocoder needs at least one language")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError(f"duplicate language in {self.languages}")
        return self

    @property
    def monolingual(self) -> bool:
        return len(self.languages) == 1

    def language_index(self, lang: str) -> int:
        return self.languages.index(lang)

    # ===== PRESETS =====

    @classmethod
    def preset(cls, size: Literal["small", "large", "full_scale"], **values) -> "VocoderConfig":
        """``small``/``large`` differ in unit embedding width; ``full_scale`` restores the large recipe."""
        sizes = {
            "small": dict(unit_dim=32),
            "large": dict(unit_dim=64, upsample_channels=96),
            "full_scale": dict(
                unit_dim=256, upsample_channels=512, upsample_strides=[5, 4, 2, 2, 2],
                residual_blocks=15, hop=160,
            ),
        }
        if size not in sizes:
            raise ValueError(f"unknown vocoder size {size!r}; expected one of {sorted(sizes)}")
        merged = dict(sizes[size])
        merged.update(values)
        return cls(**merged)


class VocoderTrainingConfig(BaseModel):
    steps: int = Field(default=500, ge=0)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=2e-4, ge=0.0)
    max_frames: int = Field(default=48, ge=2)
    lambda_mel: float = Field(default=45.0, ge=0.0)
    lambda_fm: float = Field(default=2.0, ge=0.0)
    lambda_adv: float = Field(default=1.0, ge=0.0)
    lambda_lid: float = Field(default=1.0, ge=0.0)
    # when false, the LID classifier only learns from real audio
    update_lid_in_generator_step: bool = False
    eval_interval: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)

    def weights(self) -> Dict[str, float]:
        return {"mel": self.lambda_mel, "feature_matching": self.lambda_fm, "adversarial": self.lambda_adv, "lid": self.lambda_lid}


class VocoderLosses(BaseModel):
    mel: float = Field(..., ge=0.0)
    feature_matching: float = Field(default=0.0, ge=0.0)
    adversarial: float = Field(default=0.0, ge=0.0)
    duration: float = Field(default=0.0, ge=0.0)
    lid: float = Field(default=0.0, ge=0.0)
    total: float = Field(..., ge=0.0)
    step: Optional[int] = None


class AuxiliaryReport(BaseModel):
    discriminator: float = Field(..., ge=0.0)
    duration: float = Field(..., ge=0.0)
    lid: float = Field(..., ge=0.0)
    lid_accuracy: float = Field(default=0.0, ge=0.0, le=1.0)
    step: Optional[int] = None


class VocoderHistory(BaseModel):
    generator: List[VocoderLosses] = Field(default_factory=list)
    auxiliaries: List[AuxiliaryReport] = Field(default_factory=list)
    valid: List[float] = Field(default_factory=list)
    best_step: Optional[int] = None
    best_valid_loss: Optional[float] = None
