import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from models.units import FeatureConfig
from models.world import FamilySpec, SymbolEntry, Waveform, WorldSpec
from utils.errors import CapacityError, LookupFailure, VocabularyError

logger = logging.getLogger(__name__)

FAMILY_NAMES = ["gem", "rom", "slv", "ura"]
BAND_MARGIN_HZ = 100.0
ANALYZER_FFT = 512
BASE_AMPLITUDE = 0.5
FADE_SECONDS = 0.005


def family_name(index: int) -> str:
    return FAMILY_NAMES[index] if index < len(FAMILY_NAMES) else f"fam{index}"


def _family_slots(symbols: int, languages: int, shared_fraction: float) -> Tuple[int, int]:
    shared = int(round(symbols * shared_fraction)) if languages > 1 else symbols
    shared = min(shared, symbols)
    return shared, shared + languages * (symbols - shared)


def _total_slots(num_families: int, symbols: int, languages: int, shared_fraction: float) -> int:
    _, per_family = _family_slots(symbols, languages, shared_fraction)
    # one empty slot between neighbouring families keeps the bands disjoint
    return num_families * per_family + (num_families - 1)


class WorldService:
    """Synthetic tone-language world: layout, translation and synthesis."""

    def __init__(self, world: WorldSpec):
        self.world = world

    # ===== WORLD DEFINITION =====

    @staticmethod
    def define_world(
        seed: int,
        num_families: int,
        langs_per_family: int,
        symbols_per_lang: int,
        sample_rate: int = 8000,
        symbol_duration: float = 0.08,
        num_speakers: int = 4,
        shared_fraction: float = 0.5,
    ) -> WorldSpec:
        """Deterministic world for ``seed``; families occupy disjoint, contiguous frequency bands."""
        if min(num_families, langs_per_family, symbols_per_lang) < 1:
            raise CapacityError("num_families, langs_per_family and symbols_per_lang must all be >= 1")
        low = BAND_MARGIN_HZ
        high = sample_rate / 2.0 - BAND_MARGIN_HZ
        usable = high - low
        min_separation = 2.0 * sample_rate / ANALYZER_FFT

        slots = _total_slots(num_families, symbols_per_lang, langs_per_family, shared_fraction)
        spacing = usable / slots
        if spacing < min_separation:
            maximum = symbols_per_lang
            while maximum > 0 and usable / _total_slots(num_families, maximum, langs_per_family, shared_fraction) < min_separation:
                maximum -= 1
            raise CapacityError(
                f"{num_families} families x {langs_per_family} languages x {symbols_per_lang} symbols do not fit "
                f"below Nyquist at {sample_rate} Hz; maximum symbols_per_lang is {maximum}"
            )
        if usable / symbols_per_lang < min_separation:
            raise CapacityError(f"source inventory of {symbols_per_lang} symbols does not fit at {sample_rate} Hz")

        rng = np.random.default_rng(seed)
        shared, per_family = _family_slots(symbols_per_lang, langs_per_family, shared_fraction)
        own = symbols_per_lang - shared
        families: List[FamilySpec] = []
        cursor = 0
        for f in range(num_families):
            name = family_name(f)
            freqs = [low + (cursor + i + 0.5) * spacing for i in range(per_family)]
            cursor += per_family + 1
            languages = [f"{name}{j}" for j in range(langs_per_family)]
            inventories: Dict[str, List[SymbolEntry]] = {}
            for j, lang in enumerate(languages):
                pool = freqs[:shared] + freqs[shared + j * own: shared + (j + 1) * own]
                order = rng.permutation(len(pool))
                inventories[lang] = [SymbolEntry(symbol=s, frequency=round(pool[o], 6)) for s, o in enumerate(order)]
            band = (round(freqs[0], 6), round(freqs[-1], 6))
            families.append(FamilySpec(family=name, languages=languages, band=band, inventories=inventories))

        source_spacing = usable / symbols_per_lang
        source_freqs = [low + (i + 0.5) * source_spacing for i in range(symbols_per_lang)]
        order = rng.permutation(symbols_per_lang)
        source_inventory = [SymbolEntry(symbol=s, frequency=round(source_freqs[o], 6)) for s, o in enumerate(order)]

        lexicon = {
            lang: rng.permutation(symbols_per_lang).tolist()
            for family in families
            for lang in family.languages
        }
        world = WorldSpec(
            seed=seed,
            families=families,
            source_inventory=source_inventory,
            sample_rate=sample_rate,
            symbol_duration=symbol_duration,
            num_speakers=num_speakers,
            min_separation=min_separation,
            lexicon=lexicon,
        )
        logger.info(
            f"Defined world seed={seed}: {num_families} families x {langs_per_family} languages, "
            f"{symbols_per_lang} symbols, tone spacing {spacing:.1f} Hz"
        )
        return world

    # ===== TRANSLATION =====

    @staticmethod
    def _reorder(symbols: Sequence[int]) -> List[int]:
        """Swap each adjacent pair at even offsets (an involution)."""
        out = list(symbols)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out

    def _lexicon(self, target_lang: str) -> List[int]:
        if target_lang not in self.world.lexicon:
            raise VocabularyError(f"Unknown target language {target_lang!r}")
        return self.world.lexicon[target_lang]

    def translate_symbols(self, source_symbols: Sequence[int], target_lang: str) -> List[int]:
        mapping = self._lexicon(target_lang)
        mapped = []
        for symbol in source_symbols:
            if not 0 <= symbol < len(mapping):
                raise VocabularyError(f"Unknown source symbol {symbol} (inventory size {len(mapping)})")
            mapped.append(mapping[symbol])
        return self._reorder(mapped)

    def inverse_translate(self, target_symbols: Sequence[int], target_lang: str) -> List[int]:
        mapping = self._lexicon(target_lang)
        inverse = {t: s for s, t in enumerate(mapping)}
        restored = []
        for symbol in self._reorder(target_symbols):
            if symbol not in inverse:
                raise VocabularyError(f"Unknown {target_lang} symbol {symbol}")
            restored.append(inverse[symbol])
        return restored

    # ===== SYNTHESIS =====

    def speaker_profile(self, speaker_id: int) -> Dict[str, float]:
        """Amplitude scale within +-20%, vibrato rate <= 3 Hz and depth well under 1% of f0."""
        if speaker_id < 0:
            raise LookupFailure(f"Unknown speaker id {speaker_id}")
        rng = np.random.default_rng([self.world.seed, 7919, speaker_id])
        return {
            "amplitude": BASE_AMPLITUDE * (1.0 + rng.uniform(-0.2, 0.2)),
            "vibrato_rate": rng.uniform(1.0, 3.0),
            "vibrato_depth": rng.uniform(0.001, 0.003),
            "vibrato_phase": rng.uniform(0.0, 2.0 * math.pi),
        }

    def synthesize_utterance(self, lang: str, symbols: Sequence[int], speaker_id: int) -> Waveform:
        """Concatenated tones, one symbol per slot, joined by raised-cosine cross-fades.

        Each tone runs half a fade past its slot on either side; neighbouring ramps sum to 1.
        """
        world = self.world
        table = world.frequency_table(lang) if lang == world.source_language or lang in world.lexicon else None
        if table is None:
            raise VocabularyError(f"Unknown language {lang!r}")
        profile = self.speaker_profile(speaker_id)
        n = world.samples_per_symbol
        fade = min(n, max(1, int(round(FADE_SECONDS * world.sample_rate))))
        lead = fade // 2
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(fade) + 0.5) / fade)

        total = len(symbols) * n
        signal = np.zeros(total)
        rate = profile["vibrato_rate"]
        for index, symbol in enumerate(symbols):
            if symbol not in table:
                raise VocabularyError(f"Symbol {symbol} is not in the {lang} inventory")
            f0 = table[symbol]
            start = max(0, index * n - lead)
            stop = min(total, (index + 1) * n + fade - lead)
            t = np.arange(start, stop) / world.sample_rate
            wobble = 2.0 * math.pi * rate * t + profile["vibrato_phase"]
            phase = 2.0 * math.pi * f0 * t - f0 * profile["vibrato_depth"] / rate * (np.cos(wobble) - math.cos(profile["vibrato_phase"]))
            envelope = np.ones(stop - start)
            envelope[:fade] *= ramp
            envelope[-fade:] *= ramp[::-1]
            signal[start:stop] += profile["amplitude"] * envelope * np.sin(phase)
        return Waveform.from_float(signal, world.sample_rate)

    def frame_labels(self, lang: str, symbols: Sequence[int], cfg: FeatureConfig) -> np.ndarray:
        """Tone-slot label per analysis frame; -1 where a window straddles a symbol boundary."""
        world = self.world
        table = world.frequency_table(lang)
        if lang == world.source_language:
            slots = sorted(entry.frequency for entry in world.source_inventory)
        else:
            slots = world.family_of(lang).frequencies()
        slot_of = {freq: i for i, freq in enumerate(slots)}
        n = world.samples_per_symbol
        total = n * len(symbols)
        if total < cfg.window:
            return np.zeros(0, dtype=np.int64)
        frames = (total - cfg.window) // cfg.hop + 1
        labels = np.full(frames, -1, dtype=np.int64)
        for f in range(frames):
            start = f * cfg.hop
            first, last = start // n, (start + cfg.window - 1) // n
            if first == last:
                labels[f] = slot_of[table[symbols[first]]]
        return labels

    # ===== PERSISTENCE =====

    @staticmethod
    def save(world: WorldSpec, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(world.model_dump_json(indent=2), encoding="utf-8")
        return path

    @staticmethod
    def load(path: Union[str, Path]) -> WorldSpec:
        return WorldSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
