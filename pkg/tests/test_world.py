import numpy as np
import pytest
from scipy.signal import hilbert

from models.units import FeatureConfig
from models.world import Waveform
from services.world_service import WorldService
from utils.errors import CapacityError, LookupFailure, VocabularyError


class TestDefineWorld:
    """World layout"""

    def test_same_seed_same_world(self, world):
        again = WorldService.define_world(
            seed=0, num_families=2, langs_per_family=2, symbols_per_lang=6, num_speakers=2,
        )
        assert again == world

    def test_language_ids(self, world):
        assert world.source_language == "en"
        assert world.target_languages == ["gem0", "gem1", "rom0", "rom1"]

    def test_family_bands_disjoint_and_below_nyquist(self, world):
        bands = [family.band for family in world.families]
        assert bands[0][1] < bands[1][0]
        assert bands[-1][1] < world.sample_rate / 2

    def test_tones_respect_min_separation(self, world):
        for family in world.families:
            assert np.diff(family.frequencies()).min() >= world.min_separation - 1e-6

    def test_languages_in_a_family_share_tones(self, world):
        family = world.families[0]
        first, second = (set(world.frequency_table(lang).values()) for lang in family.languages)
        assert first & second
        assert first != second

    def test_lexicon_is_a_permutation(self, world):
        for mapping in world.lexicon.values():
            assert sorted(mapping) == list(range(6))

    def test_capacity_error_reports_maximum(self):
        with pytest.raises(CapacityError, match="maximum symbols_per_lang"):
            WorldService.define_world(seed=0, num_families=4, langs_per_family=4, symbols_per_lang=200)


class TestTranslation:
    """Lexical mapping plus adjacent-pair reordering"""

    def test_pairs_swap(self, world):
        service = WorldService(world)
        mapping = world.lexicon["rom1"]
        assert service.translate_symbols([0, 1, 2], "rom1") == [mapping[1], mapping[0], mapping[2]]

    def test_inverse_restores_source(self, world):
        service = WorldService(world)
        source = [5, 0, 3, 3, 1]
        assert service.inverse_translate(service.translate_symbols(source, "gem1"), "gem1") == source

    def test_unknown_target_language(self, world):
        with pytest.raises(VocabularyError, match="Unknown target language"):
            WorldService(world).translate_symbols([0], "xx0")

    def test_unknown_source_symbol(self, world):
        with pytest.raises(VocabularyError, match="Unknown source symbol"):
            WorldService(world).translate_symbols([6], "gem0")


class TestSynthesis:
    """Tone rendering"""

    def test_length_and_dtype(self, world):
        wave = WorldService(world).synthesize_utterance("gem0", [0, 1, 2], 0)
        assert isinstance(wave, Waveform)
        assert wave.samples.dtype == np.int16
        assert wave.samples.size == 3 * world.samples_per_symbol

    def test_repeated_symbol_has_no_dip_at_boundary(self, world):
        n = world.samples_per_symbol
        signal = WorldService(world).synthesize_utterance("gem0", [4, 4], 1).to_float()
        assert signal.size == 2 * n
        envelope = np.abs(hilbert(signal))
        inner = envelope[n // 4: 2 * n - n // 4]
        assert inner.min() > 0.9 * inner.max()
        assert envelope[n] > 0.9 * envelope[n // 2]

    def test_empty_sequence_gives_empty_waveform(self, world):
        assert WorldService(world).synthesize_utterance("en", [], 1).samples.size == 0

    def test_dominant_frequency_matches_symbol(self, world):
        service = WorldService(world)
        frequency = world.frequency_table("gem0")[4]
        signal = service.synthesize_utterance("gem0", [4], 1).to_float()
        spectrum = np.abs(np.fft.rfft(signal * np.hanning(signal.size), n=8192))
        peak = np.fft.rfftfreq(8192, d=1.0 / world.sample_rate)[spectrum.argmax()]
        assert abs(peak - frequency) < world.min_separation / 2

    def test_speakers_differ_but_stay_close(self, world):
        service = WorldService(world)
        a, b = service.speaker_profile(0), service.speaker_profile(1)
        assert a != b
        for profile in (a, b):
            assert 0.4 <= profile["amplitude"] <= 0.6
            assert profile["vibrato_depth"] < 0.01

    def test_unknown_speaker_and_symbol(self, world):
        service = WorldService(world)
        with pytest.raises(LookupFailure):
            service.speaker_profile(-1)
        with pytest.raises(VocabularyError, match="not in the gem0 inventory"):
            service.synthesize_utterance("gem0", [9], 0)
        with pytest.raises(VocabularyError, match="Unknown language"):
            service.synthesize_utterance("xx", [0], 0)


class TestFrameLabels:
    """Tone-slot labels for purity scoring"""

    def test_straddling_frames_are_unlabelled(self, world):
        cfg = FeatureConfig(window=200, hop=80)
        labels = WorldService(world).frame_labels("gem0", [0, 1], cfg)
        total = 2 * world.samples_per_symbol
        assert labels.size == (total - cfg.window) // cfg.hop + 1
        assert (labels == -1).any()
        assert labels[0] >= 0

    def test_short_utterance_has_no_frames(self, world):
        assert WorldService(world).frame_labels("gem0", [], FeatureConfig()).size == 0


def test_save_and_load(world, tmp_path):
    path = WorldService.save(world, tmp_path / "world.json")
    assert WorldService.load(path) == world
