import pytest

from services.corpus_service import SPLITS, CorpusService, direction_name
from services.world_service import WorldService
from utils.audio import read_wav
from utils.errors import DataIntegrityError, UsageError


class TestPlan:
    """Job planning per direction and split"""

    def test_split_sizes(self, world):
        jobs = CorpusService(world).plan(10, 0, (2, 4), valid_fraction=0.2, test_fraction=0.2, ood_pairs_per_direction=2)
        for lang in world.target_languages:
            splits = [job[0] for job in jobs if job[1] == lang]
            assert splits.count("train") == 6
            assert splits.count("valid") == 2
            assert splits.count("test") == 2
            assert splits.count("test_ood") == 2

    def test_ood_uses_unseen_speakers(self, world):
        jobs = CorpusService(world).plan(4, 0, (2, 8), ood_pairs_per_direction=3)
        for split, _, _, speaker, _ in jobs:
            if split == "test_ood":
                assert speaker >= world.num_speakers
            else:
                assert speaker < world.num_speakers

    def test_direction_scale_starves_one_direction(self, world):
        starved = direction_name(world, "rom1")
        jobs = CorpusService(world).plan(20, 0, (2, 4), direction_scale={starved: 0.1})
        assert sum(1 for job in jobs if job[1] == "rom1") == 2
        assert sum(1 for job in jobs if job[1] == "gem0") == 20

    def test_unknown_direction_rejected(self, world):
        with pytest.raises(UsageError, match="unknown directions"):
            CorpusService(world).plan(10, 0, (2, 4), direction_scale={"en-xx9": 0.5})

    def test_length_range_bounds(self, world):
        with pytest.raises(UsageError, match="length_range"):
            CorpusService(world).plan(10, 0, (0, 4))
        with pytest.raises(UsageError, match="length_range"):
            CorpusService(world).plan(10, 0, (5, 65))


class TestGenCorpus:
    """Written corpus"""

    def test_every_split_has_a_manifest(self, corpus_dir):
        for split in SPLITS:
            assert (corpus_dir / f"{split}.jsonl").exists()

    def test_rows_match_audio_and_translation(self, world, corpus_dir):
        service = WorldService(world)
        rows = CorpusService.load_manifest(corpus_dir / "train.jsonl")
        assert len(rows) == 6 * len(world.target_languages)
        for row in rows[:5]:
            assert row.target_symbols == service.translate_symbols(row.source_symbols, row.tgt_lang)
            source = read_wav(corpus_dir / row.src_audio)
            target = read_wav(corpus_dir / row.tgt_audio)
            assert source.samples.size == len(row.source_symbols) * world.samples_per_symbol
            assert target.samples.size == len(row.target_symbols) * world.samples_per_symbol
            assert 2 <= len(row.source_symbols) <= 4

    def test_generation_is_deterministic(self, world, corpus_dir, tmp_path):
        CorpusService(world).gen_corpus(
            tmp_path, pairs_per_direction=10, seed=0, length_range=(2, 4),
            valid_fraction=0.2, test_fraction=0.2, ood_pairs_per_direction=2,
        )
        assert (tmp_path / "test.jsonl").read_text() == (corpus_dir / "test.jsonl").read_text()
        assert (tmp_path / "audio/test/gem0-00000.tgt.wav").read_bytes() == (
            corpus_dir / "audio/test/gem0-00000.tgt.wav"
        ).read_bytes()

    def test_by_direction_groups_rows(self, world, corpus_dir):
        grouped = CorpusService.by_direction(CorpusService.load_manifest(corpus_dir / "test.jsonl"))
        assert sorted(grouped) == sorted(world.target_languages)
        assert all(len(rows) == 2 for rows in grouped.values())


class TestManifest:
    """Manifest loading errors"""

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(UsageError, match="run corpus-gen first"):
            CorpusService.load_manifest(tmp_path / "train.jsonl")

    def test_bad_row(self, tmp_path):
        path = tmp_path / "train.jsonl"
        path.write_text('{"src_audio": "a.wav"}\n')
        with pytest.raises(DataIntegrityError, match="train.jsonl:1"):
            CorpusService.load_manifest(path)
