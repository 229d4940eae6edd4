from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class SymbolEntry(BaseModel):
    symbol: int = Field(..., ge=0)
    frequency: float = Field(..., gt=0)  # Hz


class FamilySpec(BaseModel):
    family: str
    languages: List[str]
    band: Tuple[float, float]  # Hz, inclusive of every member frequency
    inventories: Dict[str, List[SymbolEntry]]

    @model_validator(mode="after")
    def check_inventories(self):
        missing = [lang for lang in self.languages if lang not in self.inventories]
        if missing:
            raise ValueError(f"family {self.family} has no inventory for {missing}")
        low, high = self.band
        for lang, entries in self.inventories.items():
            for entry in entries:
                if not low <= entry.frequency <= high:
                    raise ValueError(f"{lang} symbol {entry.symbol} at {entry.frequency} Hz lies outside band {self.band}")
        return self

    def frequencies(self) -> List[float]:
        """Distinct tone frequencies used by any member language, ascending."""
        return sorted({entry.frequency for entries in self.inventories.values() for entry in entries})


class WorldSpec(BaseModel):
    seed: int = Field(..., ge=0)
    families: List[FamilySpec]
    source_language: str = "en"
    source_inventory: List[SymbolEntry]
    sample_rate: int = Field(..., ge=8000)
    symbol_duration: float = Field(..., ge=0.04)
    num_speakers: int = Field(default=4, ge=1)
    min_separation: float = Field(..., gt=0)  # Hz
    # per target language: lexicon[lang][source_symbol] = target_symbol
    lexicon: Dict[str, List[int]]

    @model_validator(mode="after")
    def check_languages(self):
        seen = {self.source_language}
        for family in self.families:
            for lang in family.languages:
                if lang in seen:
                    raise ValueError(f"language id {lang} is not globally unique")
                seen.add(lang)
        for family in self.families:
            freqs = family.frequencies()
            gaps = np.diff(freqs) if len(freqs) > 1 else np.array([])
            if gaps.size and gaps.min() < self.min_separation - 1e-6:
                raise ValueError(f"family {family.family} tones closer than {self.min_separation} Hz")
        return self

    @property
    def target_languages(self) -> List[str]:
        return [lang for family in self.families for lang in family.languages]

    @property
    def samples_per_symbol(self) -> int:
        return int(round(self.symbol_duration * self.sample_rate))

    def family_of(self, lang: str) -> FamilySpec:
        for family in self.families:
            if lang in family.languages:
                return family
        raise KeyError(lang)

    def inventory(self, lang: str) -> List[SymbolEntry]:
        if lang == self.source_language:
            return self.source_inventory
        return self.family_of(lang).inventories[lang]

    def frequency_table(self, lang: str) -> Dict[int, float]:
        return {entry.symbol: entry.frequency for entry in self.inventory(lang)}


class Waveform(BaseModel):
    """Mono PCM16 audio."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray
    sample_rate: int = Field(..., gt=0)

    @field_validator("samples")
    @classmethod
    def validate_samples(cls, v):
        v = np.asarray(v)
        if v.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if v.dtype != np.int16:
            raise ValueError(f"waveform samples must be int16, got {v.dtype}")
        if v.size and np.abs(v.astype(np.int32)).max() > 32767:
            raise ValueError("waveform sample magnitude exceeds 32767")
        return v

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def to_float(self) -> np.ndarray:
        return self.samples.astype(np.float64) / 32767.0

    @classmethod
    def from_float(cls, signal: np.ndarray, sample_rate: int) -> "Waveform":
        clipped = np.clip(np.asarray(signal, dtype=np.float64), -1.0, 1.0)
        return cls(samples=np.round(clipped * 32767.0).astype(np.int16), sample_rate=sample_rate)


class ParallelPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source: Waveform
    target: Waveform
    source_symbols: List[int]
    target_symbols: List[int]
    target_language: str
    speaker: int


class ManifestRow(BaseModel):
    """One line of a corpus manifest; audio paths are relative to the manifest."""

    src_audio: str
    tgt_audio: str
    src_text: str
    tgt_text: str
    tgt_lang: str
    speaker: int
    id: Optional[str] = None

    @property
    def source_symbols(self) -> List[int]:
        return [int(s) for s in self.src_text.split()]

    @property
    def target_symbols(self) -> List[int]:
        return [int(s) for s in self.tgt_text.split()]
