import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from models.world import ManifestRow, ParallelPair, WorldSpec
from services.world_service import WorldService
from utils.audio import read_wav, write_wav
from utils.errors import DataIntegrityError, UsageError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test", "test_ood")
OOD_SPEAKERS = 2


def direction_name(world: WorldSpec, target_lang: str) -> str:
    return f"{world.source_language}-{target_lang}"


class CorpusService:
    def __init__(self, world: WorldSpec):
        self.world = world
        self.world_service = WorldService(world)

    # ===== PAIR GENERATION =====

    def make_pair(self, target_lang: str, length: int, speaker: int, rng: np.random.Generator) -> ParallelPair:
        n_symbols = len(self.world.source_inventory)
        source_symbols = rng.integers(0, n_symbols, size=length).tolist()
        target_symbols = self.world_service.translate_symbols(source_symbols, target_lang)
        return ParallelPair(
            source=self.world_service.synthesize_utterance(self.world.source_language, source_symbols, speaker),
            target=self.world_service.synthesize_utterance(target_lang, target_symbols, speaker),
            source_symbols=source_symbols,
            target_symbols=target_symbols,
            target_language=target_lang,
            speaker=speaker,
        )

    def _pair_rng(self, seed: int, direction: int, split: int, index: int) -> np.random.Generator:
        return np.random.default_rng([seed, direction, split, index])

    def plan(
        self,
        pairs_per_direction: int,
        seed: int,
        length_range: Tuple[int, int],
        direction_scale: Optional[Mapping[str, float]] = None,
        valid_fraction: float = 0.1,
        test_fraction: float = 0.1,
        ood_pairs_per_direction: int = 0,
    ) -> List[Tuple[str, str, int, int, int]]:
        """Ordered ``(split, target_lang, length, speaker, pair_seed_index)`` jobs."""
        low, high = length_range
        if not 1 <= low <= high <= 64:
            raise UsageError(f"length_range must lie within [1, 64], got {length_range}")
        direction_scale = dict(direction_scale or {})
        unknown = set(direction_scale) - {direction_name(self.world, lang) for lang in self.world.target_languages}
        if unknown:
            raise UsageError(f"direction_scale names unknown directions {sorted(unknown)}")

        jobs: List[Tuple[str, str, int, int, int]] = []
        ood_low = max(low, high - (high - low) // 4)
        for d, lang in enumerate(self.world.target_languages):
            scale = direction_scale.get(direction_name(self.world, lang), 1.0)
            count = int(round(pairs_per_direction * scale))
            n_test = int(round(count * test_fraction))
            n_valid = int(round(count * valid_fraction))
            rng = np.random.default_rng([seed, d])
            lengths = rng.integers(low, high + 1, size=count)
            speakers = rng.integers(0, self.world.num_speakers, size=count)
            for i in range(count):
                split = "test" if i < n_test else "valid" if i < n_test + n_valid else "train"
                jobs.append((split, lang, int(lengths[i]), int(speakers[i]), i))
            ood_lengths = rng.integers(ood_low, high + 1, size=ood_pairs_per_direction)
            for i in range(ood_pairs_per_direction):
                speaker = self.world.num_speakers + (i % OOD_SPEAKERS)
                jobs.append(("test_ood", lang, int(ood_lengths[i]), speaker, count + i))
        return jobs

    def gen_corpus(
        self,
        out_dir: Union[str, Path],
        pairs_per_direction: int,
        seed: int,
        length_range: Tuple[int, int],
        direction_scale: Optional[Mapping[str, float]] = None,
        valid_fraction: float = 0.1,
        test_fraction: float = 0.1,
        ood_pairs_per_direction: int = 0,
    ) -> Dict[str, List[ManifestRow]]:
        """Write WAV pairs and one JSON-lines manifest per split; returns the rows per split."""
        out_dir = Path(out_dir)
        jobs = self.plan(
            pairs_per_direction, seed, length_range, direction_scale,
            valid_fraction, test_fraction, ood_pairs_per_direction,
        )
        rows: Dict[str, List[ManifestRow]] = {split: [] for split in SPLITS}
        directions = {lang: d for d, lang in enumerate(self.world.target_languages)}
        for split, lang, length, speaker, index in jobs:
            rng = self._pair_rng(seed, directions[lang], SPLITS.index(split), index)
            pair = self.make_pair(lang, length, speaker, rng)
            pair_id = f"{lang}-{index:05d}"
            src_rel = f"audio/{split}/{pair_id}.src.wav"
            tgt_rel = f"audio/{split}/{pair_id}.tgt.wav"
            write_wav(out_dir / src_rel, pair.source)
            write_wav(out_dir / tgt_rel, pair.target)
            rows[split].append(ManifestRow(
                src_audio=src_rel,
                tgt_audio=tgt_rel,
                src_text=" ".join(str(s) for s in pair.source_symbols),
                tgt_text=" ".join(str(s) for s in pair.target_symbols),
                tgt_lang=lang,
                speaker=speaker,
                id=pair_id,
            ))

        for split, split_rows in rows.items():
            self.write_manifest(out_dir / f"{split}.jsonl", split_rows)
            logger.info(f"Wrote {len(split_rows)} {split} pairs to {out_dir / f'{split}.jsonl'}")
        return rows

    # ===== MANIFESTS =====

    @staticmethod
    def write_manifest(path: Union[str, Path], rows: List[ManifestRow]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row.model_dump(exclude_none=True), sort_keys=True) + "\n")
        return path

    @staticmethod
    def load_manifest(path: Union[str, Path]) -> List[ManifestRow]:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"Manifest not found: {path} (run corpus-gen first)")
        rows = []
        with path.open(encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(ManifestRow(**json.loads(line)))
                except (ValueError, TypeError) as e:
                    raise DataIntegrityError(f"Bad manifest row {path}:{line_no}: {e}")
        return rows

    @staticmethod
    def load_audio(manifest_path: Union[str, Path], relative: str):
        return read_wav(Path(manifest_path).parent / relative)

    @staticmethod
    def by_direction(rows: List[ManifestRow]) -> Dict[str, List[ManifestRow]]:
        grouped: Dict[str, List[ManifestRow]] = {}
        for row in rows:
            grouped.setdefault(row.tgt_lang, []).append(row)
        return grouped
