import numpy as np
import pytest

from models.units import RunLengthUnits
from models.vocab import BOS, EOS, PAD
from services.vocab_service import VocabService
from utils.errors import DataIntegrityError, LeakageError, VocabularyError


@pytest.fixture
def vocab_service(world):
    """Extended vocabulary with k=4 for gem and k=5 for rom"""
    return VocabService(VocabService.for_world(world, {"gem": 4, "rom": 5}))


class TestLayout:
    """Id layout of the extended dictionary"""

    def test_specials_tags_then_blocks(self, vocab_service):
        vocab = vocab_service.vocab
        assert (PAD, BOS, EOS) == (0, 1, 2)
        assert [vocab.tag_id(lang) for lang in vocab.languages] == [3, 4, 5, 6]
        assert vocab.family_block("gem") == (7, 11)
        assert vocab.family_block("rom") == (11, 16)
        assert vocab.size == 16

    def test_names(self, vocab_service):
        vocab = vocab_service.vocab
        assert vocab.name_of(4) == "[gem1]"
        assert vocab.name_of(12) == "rom-1"
        assert vocab.id_of("rom-1") == 12
        assert vocab.id_of("</s>") == EOS
        with pytest.raises(KeyError):
            vocab.id_of("gem-4")

    def test_duplicate_family_rejected(self):
        with pytest.raises(VocabularyError, match="Duplicate family"):
            VocabService.build_extended([("gem", 2), ("gem", 3)], ["gem0"], {"gem0": "gem"})

    def test_unmapped_language_rejected(self):
        with pytest.raises(VocabularyError, match="map to no family"):
            VocabService.build_extended([("gem", 2)], ["rom0"], {"rom0": "rom"})


class TestTagging:
    """Raw to extended ids and back"""

    def test_offsets_by_family_block(self, vocab_service):
        raw = RunLengthUnits(units=[0, 4, 1], family="rom", language="rom0")
        assert vocab_service.tag_units(raw) == [11, 15, 12]
        assert vocab_service.detag([11, 15, 12], "rom0").units == [0, 4, 1]

    def test_raw_unit_out_of_range(self, vocab_service):
        with pytest.raises(VocabularyError, match="out of range"):
            vocab_service.tag_units(RunLengthUnits(units=[4], family="gem"))

    def test_detag_rejects_mixed_families_and_specials(self, vocab_service):
        with pytest.raises(VocabularyError, match="several families"):
            vocab_service.detag([7, 11])
        with pytest.raises(VocabularyError, match="is not a unit"):
            vocab_service.detag([EOS])

    def test_detag_empty_keeps_language_family(self, vocab_service):
        empty = vocab_service.detag([], "gem1")
        assert empty.units == [] and empty.family == "gem"


class TestMasks:
    """Per-language decoding masks"""

    def test_mask_is_family_block_plus_eos(self, vocab_service):
        allowed = vocab_service.mask_for("gem1").allowed_ids
        assert allowed == [EOS, 7, 8, 9, 10]

    def test_full_unit_mask(self, vocab_service):
        assert np.flatnonzero(vocab_service.full_unit_mask()).tolist() == [EOS] + list(range(7, 16))

    def test_leakage_rate(self, vocab_service):
        assert vocab_service.leakage_rate([7, 12, 8, EOS], "gem0") == pytest.approx(1 / 3)
        assert vocab_service.leakage_rate([EOS], "gem0") == 0.0

    def test_unknown_language(self, vocab_service):
        with pytest.raises(VocabularyError, match="Unknown language"):
            vocab_service.mask_for("xx")


class TestTargets:
    """Tagged target sequences"""

    def test_encode_and_decode(self, vocab_service):
        target = vocab_service.encode_target("rom1", [11, 13])
        assert target == [6, 11, 13, EOS]
        assert VocabService.decoder_input(target) == [BOS, 6, 11, 13]
        assert vocab_service.decode_target(target) == ("rom1", [11, 13])

    def test_foreign_units_refused(self, vocab_service):
        with pytest.raises(LeakageError, match="outside the rom1 block"):
            vocab_service.encode_target("rom1", [7])

    def test_decode_needs_tag(self, vocab_service):
        with pytest.raises(VocabularyError, match="language tag"):
            vocab_service.decode_target([11, EOS])

    def test_restricted_vocabulary(self, vocab_service):
        restricted = vocab_service.restricted_to("rom0")
        assert restricted.languages == ["rom0"]
        assert restricted.family_block("rom") == (4, 9)


class TestPersistence:
    """Vocabulary manifest"""

    def test_save_and_load(self, vocab_service, tmp_path):
        path = vocab_service.save(tmp_path / "vocab.json")
        assert VocabService.load(path) == vocab_service.vocab

    def test_size_mismatch_detected(self, vocab_service, tmp_path):
        path = vocab_service.save(tmp_path / "vocab.json")
        path.write_text(path.read_text().replace('"size": 16', '"size": 17'))
        with pytest.raises(DataIntegrityError, match="declares"):
            VocabService.load(path)
