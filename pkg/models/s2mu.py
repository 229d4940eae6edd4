from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.units import RunLengthUnits


class S2MUConfig(BaseModel):
    """Architecture of the speech-to-masked-unit translator."""

    input_dim: int = Field(default=40, ge=1)
    conv_layers: int = Field(default=2, ge=0)
    conv_channels: int = Field(default=64, ge=1)
    conv_strides: List[int] = Field(default_factory=lambda: [2, 2])
    conv_kernel: int = Field(default=3, ge=1)
    model_dim: int = Field(default=64, ge=2)
    ffn_dim: int = Field(default=128, ge=1)
    heads: int = Field(default=4, ge=1)
    encoder_layers: int = Field(default=4, ge=0)
    adaptor_kernel: int = Field(default=3, ge=1)
    adaptor_stride: int = Field(default=2, ge=1)
    decoder_layers: int = Field(default=2, ge=1)
    decoder_ffn_dim: int = Field(default=128, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    label_smoothing: float = Field(default=0.2, ge=0.0, lt=1.0)
    mode: Literal["multilingual", "bilingual"] = "multilingual"
    bilingual_language: Optional[str] = None
    # "restricted": softmax over the target language's units; "full": softmax over
    # the whole vocabulary with the loss summed over the allowed ids only
    normalizer: Literal["restricted", "full"] = "restricted"
    max_positions: int = Field(default=1024, ge=8)

    @model_validator(mode="after")
    def check_shape(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim ({self.model_dim}) must be divisible by heads ({self.heads})")
        if len(self.conv_strides) != self.conv_layers:
            raise ValueError(f"conv_strides lists {len(self.conv_strides)} strides for {self.conv_layers} conv layers")
        if any(s < 1 for s in self.conv_strides):
            raise ValueError("conv strides must be >= 1")
        if self.mode == "bilingual" and not self.bilingual_language:
            raise ValueError("bilingual mode binds exactly one target language")
        if self.mode == "multilingual" and self.bilingual_language:
            raise ValueError("bilingual_language is only valid in bilingual mode")
        return self

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.conv_strides)) if self.conv_strides else 1

    # ===== PRESETS =====

    @classmethod
    def desk(cls, **overrides) -> "S2MUConfig":
        return cls(**overrides)

    @classmethod
    def textless(cls, **overrides) -> "S2MUConfig":
        """Small baseline: half the depth and width of the desk model."""
        values = dict(
            conv_channels=32, model_dim=32, ffn_dim=64, heads=2,
            encoder_layers=2, decoder_layers=1, decoder_ffn_dim=64,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def full_scale(cls, **overrides) -> "S2MUConfig":
        values = dict(
            input_dim=1024, conv_layers=7, conv_channels=512, conv_strides=[5, 2, 2, 2, 2, 2, 2],
            model_dim=1024, ffn_dim=4096, heads=16, encoder_layers=48,
            decoder_layers=12, decoder_ffn_dim=4096,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def preset(cls, name: str, **overrides) -> "S2MUConfig":
        presets = {"desk": cls.desk, "textless": cls.textless, "full_scale": cls.full_scale}
        if name not in presets:
            raise ValueError(f"unknown S2MU preset {name!r}; expected one of {sorted(presets)}")
        return presets[name](**overrides)


class S2MUTrainingConfig(BaseModel):
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    warmup_steps: int = Field(default=200, ge=1)
    eval_interval: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)


class DecodeOptions(BaseModel):
    strategy: Literal["greedy", "beam"] = "greedy"
    beam_width: int = Field(default=5, ge=1)
    max_len: int = Field(default=200, ge=1)
    length_penalty: float = Field(default=0.7, ge=0.0)


class TrainingBatch(BaseModel):
    """Padded features plus ``[tag, units..., eos]`` target rows padded with pad id."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray              # [B x T_max x D]
    feature_lengths: List[int]
    targets: np.ndarray               # [B x L_max] int
    target_lengths: List[int]         # non-pad tokens per row
    languages: List[str]
    ids: List[str]

    @model_validator(mode="after")
    def check_batch(self):
        size = len(self.ids)
        if not (self.features.shape[0] == self.targets.shape[0] == size
                and len(self.feature_lengths) == len(self.target_lengths) == len(self.languages) == size):
            raise ValueError("batch fields disagree on batch size")
        return self

    @property
    def size(self) -> int:
        return len(self.ids)

    def example_features(self, index: int) -> np.ndarray:
        return self.features[index, : self.feature_lengths[index]]

    def example_target(self, index: int) -> np.ndarray:
        return self.targets[index, : self.target_lengths[index]].astype(np.int64)

    def select(self, indices: List[int]) -> "TrainingBatch":
        return TrainingBatch(
            features=self.features[indices],
            feature_lengths=[self.feature_lengths[i] for i in indices],
            targets=self.targets[indices],
            target_lengths=[self.target_lengths[i] for i in indices],
            languages=[self.languages[i] for i in indices],
            ids=[self.ids[i] for i in indices],
        )


class PredictedDistribution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: np.ndarray                # [T x |V|]
    log_probs: np.ndarray             # masked log-probabilities
    allowed: np.ndarray               # bool [|V|]

    def allowed_mass(self) -> np.ndarray:
        return np.exp(self.log_probs[:, self.allowed]).sum(axis=1)


class LossReport(BaseModel):
    loss: float = Field(..., ge=0.0)
    accuracy: float = Field(..., ge=0.0, le=1.0)
    tokens: int = Field(..., ge=0)
    step: Optional[int] = None
    learning_rate: Optional[float] = None


class DecodeResult(BaseModel):
    tokens: List[int]                 # emitted ids after the forced prefix, eos excluded
    units: RunLengthUnits
    language: str
    truncated: bool = False
    score: float = 0.0
    step_mass: List[float] = Field(default_factory=list)


class TrainingHistory(BaseModel):
    train: List[LossReport] = Field(default_factory=list)
    valid: List[LossReport] = Field(default_factory=list)
    best_step: Optional[int] = None
    best_valid_loss: Optional[float] = None
    extra: Dict[str, float] = Field(default_factory=dict)
