import hashlib
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3


class FamilyBlock(BaseModel):
    family: str
    k: int = Field(..., ge=1)


class ExtendedVocabulary(BaseModel):
    """Specials, then one tag per language, then one contiguous unit block per family."""

    families: List[FamilyBlock]
    languages: List[str]
    language_family: Dict[str, str]

    @model_validator(mode="after")
    def check_layout(self):
        names = [block.family for block in self.families]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate family id in {names}")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError(f"duplicate language id in {self.languages}")
        for lang in self.languages:
            if self.language_family.get(lang) not in names:
                raise ValueError(f"language {lang} is not mapped to a known family")
        return self

    # ===== LAYOUT =====

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.languages) + sum(block.k for block in self.families)

    @property
    def first_unit_id(self) -> int:
        return NUM_SPECIALS + len(self.languages)

    def tag_id(self, lang: str) -> int:
        return NUM_SPECIALS + self.languages.index(lang)

    def tag_name(self, lang: str) -> str:
        return f"[{lang}]"

    def family_k(self, family: str) -> int:
        for block in self.families:
            if block.family == family:
                return block.k
        raise KeyError(family)

    def family_offset(self, family: str) -> int:
        offset = self.first_unit_id
        for block in self.families:
            if block.family == family:
                return offset
            offset += block.k
        raise KeyError(family)

    def family_block(self, family: str) -> Tuple[int, int]:
        """Half-open id range ``[start, stop)`` of a family's units."""
        start = self.family_offset(family)
        return start, start + self.family_k(family)

    def family_of_id(self, token: int) -> str:
        offset = self.first_unit_id
        for block in self.families:
            if offset <= token < offset + block.k:
                return block.family
            offset += block.k
        raise KeyError(token)

    def is_unit(self, token: int) -> bool:
        return self.first_unit_id <= token < self.size

    def name_of(self, token: int) -> str:
        if token == PAD:
            return "<pad>"
        if token == BOS:
            return "<s>"
        if token == EOS:
            return "</s>"
        if token < self.first_unit_id:
            return self.tag_name(self.languages[token - NUM_SPECIALS])
        family = self.family_of_id(token)
        return f"{family}-{token - self.family_offset(family)}"

    def id_of(self, name: str) -> int:
        specials = {"<pad>": PAD, "<s>": BOS, "</s>": EOS}
        if name in specials:
            return specials[name]
        if name.startswith("[") and name.endswith("]"):
            return self.tag_id(name[1:-1])
        family, _, unit = name.rpartition("-")
        unit_id = int(unit)
        if not 0 <= unit_id < self.family_k(family):
            raise KeyError(name)
        return self.family_offset(family) + unit_id

    def layout(self) -> Dict[str, object]:
        return {
            "pad": PAD,
            "bos": BOS,
            "eos": EOS,
            "tags": {lang: self.tag_id(lang) for lang in self.languages},
            "blocks": {block.family: list(self.family_block(block.family)) for block in self.families},
            "size": self.size,
        }

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class LanguageMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    language: str
    allowed: np.ndarray  # bool [|V|]

    @field_validator("allowed")
    @classmethod
    def validate_allowed(cls, v):
        v = np.asarray(v, dtype=bool)
        if v.ndim != 1:
            raise ValueError("mask must be a 1-D boolean array")
        return v

    @property
    def allowed_ids(self) -> List[int]:
        return np.flatnonzero(self.allowed).tolist()
