from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator


class WerReport(BaseModel):
    substitutions: int = Field(default=0, ge=0)
    insertions: int = Field(default=0, ge=0)
    deletions: int = Field(default=0, ge=0)
    reference_length: int = Field(default=0, ge=0)
    rate: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def check_rate(self):
        expected = self.errors / max(1, self.reference_length)
        if abs(self.rate - expected) > 1e-12:
            raise ValueError(f"rate {self.rate} != (S+I+D)/max(1, N) = {expected}")
        return self

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "WerReport") -> "WerReport":
        """Pool error counts (corpus WER)."""
        s = self.substitutions + other.substitutions
        i = self.insertions + other.insertions
        d = self.deletions + other.deletions
        n = self.reference_length + other.reference_length
        return WerReport(substitutions=s, insertions=i, deletions=d, reference_length=n, rate=(s + i + d) / max(1, n))


class BleuReport(BaseModel):
    precisions: List[float]               # modified precisions p1..p4, in [0, 1]
    matches: List[int]
    totals: List[int]
    brevity_penalty: float = Field(..., ge=0.0, le=1.0)
    hypothesis_length: int = Field(..., ge=0)
    reference_length: int = Field(..., ge=0)
    score: float = Field(..., ge=0.0, le=100.0)
    smoothing: str = "add-one-on-zero-match-orders"
    n_examples: int = Field(default=0, ge=0)


class TranscriptResult(BaseModel):
    symbols: List[int] = Field(default_factory=list)
    confidences: List[float] = Field(default_factory=list)
    skipped_windows: int = Field(default=0, ge=0)

    @property
    def mean_confidence(self) -> float:
        return sum(self.confidences) / len(self.confidences) if self.confidences else 0.0


class DirectionReport(BaseModel):
    direction: str                        # "<src>-<tgt>"
    variant: str
    bleu: Optional[BleuReport] = None
    wer: Optional[WerReport] = None
    n_examples: int = Field(default=0, ge=0)
    leakage: Optional[float] = None
    truncated: int = Field(default=0, ge=0)


class AsrBleuReport(BaseModel):
    variant: str
    split: str = "test"
    directions: List[DirectionReport] = Field(default_factory=list)
    omitted: List[str] = Field(default_factory=list)
    metadata: Dict[str, str] = Field(default_factory=dict)

    @property
    def macro_average(self) -> float:
        scores = [row.bleu.score for row in self.directions if row.bleu is not None]
        return sum(scores) / len(scores) if scores else 0.0

    def rows(self) -> List[Dict[str, object]]:
        """Long-format rows: ``direction, metric, value, n_examples``."""
        rows: List[Dict[str, object]] = []
        for row in self.directions:
            if row.bleu is not None:
                rows.append({"direction": row.direction, "metric": "asr_bleu", "value": row.bleu.score, "n_examples": row.n_examples})
            if row.wer is not None:
                rows.append({"direction": row.direction, "metric": "wer", "value": row.wer.rate, "n_examples": row.n_examples})
            if row.leakage is not None:
                rows.append({"direction": row.direction, "metric": "leakage", "value": row.leakage, "n_examples": row.n_examples})
        if self.directions:
            total = sum(row.n_examples for row in self.directions)
            rows.append({"direction": "avg", "metric": "asr_bleu", "value": self.macro_average, "n_examples": total})
        return rows
