import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from models.units import RunLengthUnits
from models.vocab import BOS, EOS, NUM_SPECIALS, ExtendedVocabulary, FamilyBlock, LanguageMask
from models.world import WorldSpec
from utils.errors import DataIntegrityError, LeakageError, VocabularyError

logger = logging.getLogger(__name__)


class VocabService:
    """Family-tagged extended dictionary, language tags and per-language masks."""

    def __init__(self, vocab: ExtendedVocabulary):
        self.vocab = vocab
        self._masks: Dict[str, LanguageMask] = {}

    # ===== CONSTRUCTION =====

    @staticmethod
    def build_extended(
        family_dicts: Sequence[Tuple[str, int]],
        languages: Sequence[str],
        language_family: Mapping[str, str],
    ) -> ExtendedVocabulary:
        names = [family for family, _ in family_dicts]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise VocabularyError(f"Duplicate family id(s) {duplicates}")
        for family, k in family_dicts:
            if k < 1:
                raise VocabularyError(f"Family {family} needs k >= 1, got {k}")
        unknown = [lang for lang in languages if language_family.get(lang) not in names]
        if unknown:
            raise VocabularyError(f"Languages {unknown} map to no family in {names}")
        return ExtendedVocabulary(
            families=[FamilyBlock(family=family, k=k) for family, k in family_dicts],
            languages=list(languages),
            language_family={lang: language_family[lang] for lang in languages},
        )

    @classmethod
    def for_world(cls, world: WorldSpec, k_per_family: Mapping[str, int]) -> ExtendedVocabulary:
        return cls.build_extended(
            [(family.family, k_per_family[family.family]) for family in world.families],
            world.target_languages,
            {lang: family.family for family in world.families for lang in family.languages},
        )

    def restricted_to(self, lang: str) -> ExtendedVocabulary:
        """One-family, one-language vocabulary for bilingual models."""
        family = self._family(lang)
        return self.build_extended([(family, self.vocab.family_k(family))], [lang], {lang: family})

    # ===== TAGGING =====

    def _family(self, lang: str) -> str:
        if lang not in self.vocab.languages:
            raise VocabularyError(f"Unknown language {lang!r}; vocabulary covers {self.vocab.languages}")
        return self.vocab.language_family[lang]

    def tag_units(self, raw_units: RunLengthUnits) -> List[int]:
        try:
            k = self.vocab.family_k(raw_units.family)
        except KeyError:
            raise VocabularyError(f"Unknown family {raw_units.family!r}")
        offset = self.vocab.family_offset(raw_units.family)
        out = []
        for unit in raw_units.units:
            if not 0 <= unit < k:
                raise VocabularyError(f"Raw unit {unit} out of range for family {raw_units.family} (k={k})")
            out.append(offset + unit)
        return out

    def detag(self, ids: Sequence[int], language: Optional[str] = None) -> RunLengthUnits:
        if not ids:
            family = self.vocab.language_family.get(language, "") if language else ""
            return RunLengthUnits(units=[], family=family, language=language)
        families = set()
        units = []
        for token in ids:
            if not self.vocab.is_unit(token):
                raise VocabularyError(f"Token {token} ({self.vocab.name_of(token)}) is not a unit")
            family = self.vocab.family_of_id(token)
            families.add(family)
            units.append(token - self.vocab.family_offset(family))
        if len(families) != 1:
            raise VocabularyError(f"Units span several families {sorted(families)}")
        return RunLengthUnits(units=units, family=families.pop(), language=language)

    # ===== MASKS =====

    def mask_for(self, lang: str) -> LanguageMask:
        if lang not in self._masks:
            start, stop = self.vocab.family_block(self._family(lang))
            allowed = np.zeros(self.vocab.size, dtype=bool)
            allowed[start:stop] = True
            allowed[EOS] = True
            self._masks[lang] = LanguageMask(language=lang, allowed=allowed)
        return self._masks[lang]

    def full_unit_mask(self) -> np.ndarray:
        """Every unit id plus eos: the unmasked decoding space."""
        allowed = np.zeros(self.vocab.size, dtype=bool)
        allowed[self.vocab.first_unit_id:] = True
        allowed[EOS] = True
        return allowed

    # ===== TARGET SEQUENCES =====

    def encode_target(self, lang: str, tagged_units: Sequence[int]) -> List[int]:
        """``[tag, units..., eos]``; refuses units outside the language's family block."""
        start, stop = self.vocab.family_block(self._family(lang))
        leaked = [u for u in tagged_units if not start <= u < stop]
        if leaked:
            raise LeakageError(f"Units {leaked[:5]} fall outside the {lang} block [{start}, {stop})")
        return [self.vocab.tag_id(lang)] + list(tagged_units) + [EOS]

    @staticmethod
    def decoder_input(target: Sequence[int]) -> List[int]:
        """Teacher-forcing input: ``[bos]`` followed by the target shifted right."""
        return [BOS] + list(target[:-1])

    def decode_target(self, tokens: Sequence[int]) -> Tuple[str, List[int]]:
        tokens = list(tokens)
        if not tokens or not NUM_SPECIALS <= tokens[0] < self.vocab.first_unit_id:
            raise VocabularyError(f"Sequence does not start with a language tag: {tokens[:3]}")
        lang = self.vocab.languages[tokens[0] - NUM_SPECIALS]
        body = tokens[1:]
        if body and body[-1] == EOS:
            body = body[:-1]
        return lang, body

    def leakage_rate(self, tokens: Sequence[int], lang: str) -> float:
        """Share of emitted unit ids outside the language's mask (eos and specials ignored)."""
        allowed = self.mask_for(lang).allowed
        units = [t for t in tokens if self.vocab.is_unit(t)]
        if not units:
            return 0.0
        return sum(1 for t in units if not allowed[t]) / len(units)

    # ===== PERSISTENCE =====

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {"vocabulary": self.vocab.model_dump(), "layout": self.vocab.layout(), "hash": self.vocab.manifest_hash()}
        path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @staticmethod
    def load(path: Union[str, Path]) -> ExtendedVocabulary:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        vocab = ExtendedVocabulary(**document["vocabulary"])
        if document["layout"]["size"] != vocab.size:
            raise DataIntegrityError(
                f"Vocabulary manifest {path} declares |V|={document['layout']['size']} but its blocks give {vocab.size}"
            )
        return vocab
