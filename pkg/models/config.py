import typing
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    """Config section: unknown keys rejected, comma-separated strings accepted for lists and maps."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    @model_validator(mode="before")
    @classmethod
    def split_lists(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for name, field in cls.model_fields.items():
            value = data.get(name)
            if not isinstance(value, str):
                continue
            origin = typing.get_origin(field.annotation)
            if not value.strip() and origin not in (list, List, dict, Dict):
                # empty scalar means "unset"
                del data[name]
            elif origin in (list, List):
                data[name] = [item.strip() for item in value.split(",") if item.strip()]
            elif origin in (dict, Dict):
                pairs = [item.split(":", 1) for item in value.split(",") if item.strip()]
                data[name] = {key.strip(): val.strip() for key, val in pairs}
        return data


class WorldSection(_Section):
    num_families: int = Field(default=2, ge=1)
    langs_per_family: int = Field(default=2, ge=1)
    symbols_per_lang: int = Field(default=20, ge=1)
    sample_rate: int = Field(default=8000, ge=8000)
    symbol_duration: float = Field(default=0.08, ge=0.04)
    num_speakers: int = Field(default=4, ge=1)
    shared_fraction: float = Field(default=0.5, ge=0.0, le=1.0)


class CorpusSection(_Section):
    pairs_per_direction: int = Field(default=200, ge=0)
    min_length: int = Field(default=3, ge=1, le=64)
    max_length: int = Field(default=12, ge=1, le=64)
    valid_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    test_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    ood_pairs_per_direction: int = Field(default=20, ge=0)
    direction_scale: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_lengths(self):
        if self.min_length > self.max_length:
            raise ValueError(f"min_length {self.min_length} exceeds max_length {self.max_length}")
        if self.valid_fraction + self.test_fraction >= 1.0:
            raise ValueError("valid_fraction + test_fraction must leave room for training data")
        return self


class FeaturesSection(_Section):
    window: int = Field(default=200, ge=1)
    hop: int = Field(default=80, ge=1)
    n_bands: int = Field(default=40, ge=1)
    n_fft: int = Field(default=512, ge=2)


class KMeansSection(_Section):
    k_factor: float = Field(default=1.5, gt=0.0)
    max_iters: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-6, ge=0.0)
    sweep_n_bands: List[int] = Field(default_factory=lambda: [20, 40])
    sweep_k_factors: List[float] = Field(default_factory=lambda: [1.0, 1.5])
    recovery_steps: int = Field(default=60, ge=0)
    # language-specific units instead of one model per family
    per_language: bool = False


class S2MUSection(_Section):
    preset: Literal["desk", "textless", "full_scale"] = "desk"
    mode: Literal["multilingual", "bilingual"] = "multilingual"
    language: Optional[str] = None
    normalizer: Literal["restricted", "full"] = "restricted"
    model_dim: Optional[int] = None
    encoder_layers: Optional[int] = None
    decoder_layers: Optional[int] = None
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    label_smoothing: float = Field(default=0.2, ge=0.0, lt=1.0)
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, ge=0.0)
    warmup_steps: int = Field(default=200, ge=1)
    eval_interval: int = Field(default=100, ge=1)
    decode: Literal["greedy", "beam"] = "greedy"
    beam_width: int = Field(default=5, ge=1)
    max_len: int = Field(default=200, ge=1)
    masked: bool = True


class VocoderSection(_Section):
    size: Literal["small", "large", "full_scale"] = "small"
    # "multi": one vocoder per family; "mono": one per language
    scope: Literal["multi", "mono"] = "multi"
    language_mode: Literal["prepend", "concat", "none"] = "prepend"
    upsample_strides: List[int] = Field(default_factory=lambda: [8, 10])
    residual_blocks: int = Field(default=4, ge=0)
    unit_dim: Optional[int] = None
    steps: int = Field(default=500, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=2e-4, ge=0.0)
    max_frames: int = Field(default=48, ge=2)
    lambda_mel: float = Field(default=45.0, ge=0.0)
    lambda_fm: float = Field(default=2.0, ge=0.0)
    lambda_adv: float = Field(default=1.0, ge=0.0)
    lambda_lid: float = Field(default=1.0, ge=0.0)
    update_lid_in_generator_step: bool = False
    eval_interval: int = Field(default=100, ge=1)
    speaker: int = Field(default=0, ge=0)


class EvalSection(_Section):
    split: Literal["test", "test_ood", "valid"] = "test"
    max_examples: Optional[int] = Field(default=None, ge=1)
    gold_units: bool = False


class ExperimentSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    starved_direction: Optional[str] = None
    starved_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    leakage_decodes: int = Field(default=1000, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(default=0, ge=0)
    out: str = "runs"
    world: WorldSection = Field(default_factory=WorldSection)
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    features: FeaturesSection = Field(default_factory=FeaturesSection)
    kmeans: KMeansSection = Field(default_factory=KMeansSection)
    s2mu: S2MUSection = Field(default_factory=S2MUSection)
    vocoder: VocoderSection = Field(default_factory=VocoderSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    def flatten(self) -> Dict[str, str]:
        """``section.key -> value`` strings, the on-disk form of the config."""
        flat: Dict[str, str] = {"seed": str(self.seed), "out": self.out}
        for section_name in self.sections():
            section = getattr(self, section_name)
            for key, value in section.model_dump().items():
                flat[f"{section_name}.{key}"] = _format_value(value)
        return flat

    @classmethod
    def sections(cls) -> List[str]:
        return [name for name in cls.model_fields if name not in ("seed", "out")]


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
    return str(value)
