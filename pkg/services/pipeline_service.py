"""Stage-wise on-disk pipeline.

Every stage writes into ``<out>/<stage>/`` together with ``config.resolved`` and a
``manifest.json`` recording the sha256 of each output and of the upstream
manifests it consumed. Downstream stages re-hash those files before use.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.config import RunConfig
from models.evaluation import AsrBleuReport
from models.pipeline import ArtifactManifest
from models.s2mu import DecodeOptions, S2MUConfig, S2MUTrainingConfig
from models.units import FeatureConfig, KMeansModel, RunLengthUnits
from models.vocab import ExtendedVocabulary
from models.vocoder import MelConfig, VocoderConfig, VocoderTrainingConfig
from models.world import ManifestRow, WorldSpec
from services.corpus_service import SPLITS, CorpusService
from services.discretize_service import DiscretizeService
from services.eval_service import EvalService
from services.s2mu_service import S2MUService, TranslationExample
from services.vocab_service import VocabService
from services.vocoder_service import VocoderExample, VocoderService
from services.world_service import WorldService
from utils.audio import write_wav
from utils.config import config_hash, write_resolved
from utils.errors import ConfigError, IntegrityError, UsageError
from utils.events import emit

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STAGES = [
    "world-gen", "corpus-gen", "features", "kmeans-train", "units-extract", "s2mu-train",
    "translate", "vocoder-train", "resynth", "evaluate", "experiment",
]


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class PipelineService:
    """Runs pipeline stages for one resolved configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out)
        self._world: Optional[WorldSpec] = None
        self._features: Dict[Tuple[str, str], Dict[str, np.ndarray]] = {}

    # ===== MANIFESTS =====

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def finish(self, stage: str, upstream: Sequence[str] = (), metadata: Optional[Dict[str, str]] = None) -> ArtifactManifest:
        directory = self.stage_dir(stage)
        write_resolved(self.config, directory)
        outputs = {
            path.relative_to(directory).as_posix(): file_sha256(path)
            for path in sorted(directory.rglob("*"))
            if path.is_file() and path.name != MANIFEST_NAME
        }
        inputs = {
            f"{name}/{MANIFEST_NAME}": file_sha256(self.stage_dir(name) / MANIFEST_NAME) for name in upstream
        }
        manifest = ArtifactManifest(
            stage=stage, config_hash=config_hash(self.config), inputs=inputs, outputs=outputs,
            metadata=metadata or {}, upstream=",".join(upstream) or None,
        )
        (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Stage {stage} wrote {len(outputs)} files to {directory}")
        emit("stage_done", stage=stage, detail=str(directory), files=len(outputs))
        return manifest

    def require(self, stage: str) -> ArtifactManifest:
        """Load a finished stage's manifest and verify its outputs and recorded inputs."""
        directory = self.stage_dir(stage)
        path = directory / MANIFEST_NAME
        if not path.exists():
            raise UsageError(f"Missing {directory}: run the `{stage}` subcommand first")
        manifest = ArtifactManifest.model_validate_json(path.read_text(encoding="utf-8"))
        for relative, expected in manifest.outputs.items():
            target = directory / relative
            if not target.exists():
                raise IntegrityError(str(target), expected, "<missing>")
            actual = file_sha256(target)
            if actual != expected:
                raise IntegrityError(str(target), expected, actual)
        for relative, expected in manifest.inputs.items():
            target = self.root / relative
            actual = file_sha256(target) if target.exists() else "<missing>"
            if actual != expected:
                raise IntegrityError(str(target), expected, actual)
        return manifest

    # ===== LOADERS =====

    @property
    def feature_config(self) -> FeatureConfig:
        f = self.config.features
        return FeatureConfig(window=f.window, hop=f.hop, n_bands=f.n_bands, n_fft=f.n_fft)

    def world(self) -> WorldSpec:
        if self._world is None:
            self._world = WorldService.load(self.stage_dir("world-gen") / "world.json")
        return self._world

    def manifest_path(self, split: str) -> Path:
        return self.stage_dir("corpus-gen") / f"{split}.jsonl"

    def rows(self, split: str) -> List[ManifestRow]:
        return CorpusService.load_manifest(self.manifest_path(split))

    def features(self, split: str, side: str) -> Dict[str, np.ndarray]:
        key = (split, side)
        if key not in self._features:
            self._features[key] = DiscretizeService.load_features(self.stage_dir("features") / f"{side}_{split}.npz")
        return self._features[key]

    def unit_groups(self) -> Dict[str, List[str]]:
        """Unit inventories: one per family, or one per language with ``kmeans.per_language``."""
        world = self.world()
        if self.config.kmeans.per_language:
            return {lang: [lang] for lang in world.target_languages}
        return {family.family: list(family.languages) for family in world.families}

    def group_of(self, lang: str) -> str:
        for group, languages in self.unit_groups().items():
            if lang in languages:
                return group
        raise ConfigError(f"Language {lang!r} is not part of the world")

    def kmeans_model(self, group: str) -> KMeansModel:
        return DiscretizeService.load_model(self.stage_dir("kmeans-train") / f"{group}.pgs1")

    def gold_units(self, split: str) -> Dict[str, RunLengthUnits]:
        return self._read_units(self.stage_dir("units-extract") / split, split)

    def vocab(self) -> ExtendedVocabulary:
        return VocabService.load(self.stage_dir("units-extract") / "vocab.json")

    def translations(self, split: str) -> Dict[str, RunLengthUnits]:
        directory = self.stage_dir("translate") / split
        if not directory.exists():
            raise UsageError(f"No {split} translations under {directory}: run `translate` with eval.split={split}")
        return self._read_units(directory, split)

    def _read_units(self, directory: Path, split: str) -> Dict[str, RunLengthUnits]:
        grouped = CorpusService.by_direction(self.rows(split))
        out: Dict[str, RunLengthUnits] = {}
        for lang, lang_rows in grouped.items():
            path = directory / f"{lang}.units"
            if not path.exists():
                continue
            _, records = DiscretizeService.read_unit_files(path)
            for row, record in zip(lang_rows, records):
                out[row.id] = record
        return out

    def eval_rows(self, split: Optional[str] = None) -> List[ManifestRow]:
        split = split or self.config.eval.split
        rows = self.rows(split)
        limit = self.config.eval.max_examples
        if limit is None:
            return rows
        return [row for lang_rows in CorpusService.by_direction(rows).values() for row in lang_rows[:limit]]

    # ===== BUILDERS =====

    def s2mu_config(self, mode: Optional[str] = None, language: Optional[str] = None, preset: Optional[str] = None) -> S2MUConfig:
        s = self.config.s2mu
        mode = mode or s.mode
        overrides = {
            name: getattr(s, name) for name in ("model_dim", "encoder_layers", "decoder_layers")
            if getattr(s, name) is not None
        }
        try:
            return S2MUConfig.preset(
                preset or s.preset, input_dim=self.config.features.n_bands, dropout=s.dropout,
                label_smoothing=s.label_smoothing, mode=mode, normalizer=s.normalizer,
                bilingual_language=(language or s.language) if mode == "bilingual" else None, **overrides,
            )
        except ValueError as e:
            raise ConfigError(f"Invalid S2MU configuration: {e}")

    def s2mu_training(self, seed: Optional[int] = None) -> S2MUTrainingConfig:
        s = self.config.s2mu
        return S2MUTrainingConfig(
            steps=s.steps, batch_size=s.batch_size, learning_rate=s.lr, warmup_steps=s.warmup_steps,
            eval_interval=s.eval_interval, seed=self.config.seed if seed is None else seed,
        )

    def decode_options(self) -> DecodeOptions:
        s = self.config.s2mu
        return DecodeOptions(strategy=s.decode, beam_width=s.beam_width, max_len=s.max_len)

    def translation_examples(self, split: str, languages: Optional[Sequence[str]] = None) -> List[TranslationExample]:
        features = self.features(split, "src")
        units = self.gold_units(split)
        return [
            TranslationExample(id=row.id, features=features[row.src_audio], units=units[row.id], language=row.tgt_lang)
            for row in self.rows(split)
            if (languages is None or row.tgt_lang in languages) and row.id in units
        ]

    def vocoder_keys(self, scope: Optional[str] = None) -> Dict[str, List[str]]:
        """Vocoders to train: one per unit group (``multi``) or one per language (``mono``)."""
        scope = scope or self.config.vocoder.scope
        if scope == "mono":
            return {lang: [lang] for lang in self.world().target_languages}
        return self.unit_groups()

    def vocoder_config(self, languages: Sequence[str], size: Optional[str] = None) -> VocoderConfig:
        v = self.config.vocoder
        world = self.world()
        group = self.group_of(languages[0])
        values = dict(
            family=group, languages=list(languages),
            num_units=DiscretizeService.family_k(world, group, self.config.kmeans.k_factor),
            num_speakers=world.num_speakers, language_mode=v.language_mode, hop=self.config.features.hop,
            upsample_strides=v.upsample_strides, residual_blocks=v.residual_blocks,
            mel=MelConfig(sample_rate=world.sample_rate, hop=self.config.features.hop),
        )
        if v.unit_dim is not None:
            values["unit_dim"] = v.unit_dim
        try:
            return VocoderConfig.preset(size or v.size, **values)
        except ValueError as e:
            raise ConfigError(f"Invalid vocoder configuration: {e}")

    def vocoder_training(self, seed: Optional[int] = None, **overrides) -> VocoderTrainingConfig:
        v = self.config.vocoder
        values = dict(
            steps=v.steps, batch_size=v.batch_size, learning_rate=v.lr, max_frames=v.max_frames,
            lambda_mel=v.lambda_mel, lambda_fm=v.lambda_fm, lambda_adv=v.lambda_adv, lambda_lid=v.lambda_lid,
            update_lid_in_generator_step=v.update_lid_in_generator_step, eval_interval=v.eval_interval,
            seed=self.config.seed if seed is None else seed,
        )
        values.update(overrides)
        return VocoderTrainingConfig(**values)

    def vocoder_examples(self, service: VocoderService, split: str) -> List[VocoderExample]:
        units = self.gold_units(split)
        rows = [
            row for row in self.rows(split)
            if row.tgt_lang in service.config.languages and row.id in units and row.speaker < service.config.num_speakers
        ]
        return service.examples_from(self.manifest_path(split), rows, [units[row.id] for row in rows])

    def load_vocoders(self) -> Dict[str, VocoderService]:
        self.require("vocoder-train")
        return {
            key: VocoderService.load(self.stage_dir("vocoder-train") / f"{key}.pgs1")
            for key in self.vocoder_keys()
        }

    def s2mu_translator(self, service: S2MUService, split: str, masked: bool = True) -> Callable[[ManifestRow], RunLengthUnits]:
        features = self.features(split, "src")
        opts = self.decode_options()

        def translate(row: ManifestRow) -> RunLengthUnits:
            return service.to_raw(service.decode(features[row.src_audio], row.tgt_lang, opts, masked=masked))

        return translate

    # ===== STAGES =====

    def world_gen(self) -> WorldSpec:
        w = self.config.world
        world = WorldService.define_world(
            self.config.seed, w.num_families, w.langs_per_family, w.symbols_per_lang,
            sample_rate=w.sample_rate, symbol_duration=w.symbol_duration,
            num_speakers=w.num_speakers, shared_fraction=w.shared_fraction,
        )
        WorldService.save(world, self.stage_dir("world-gen") / "world.json")
        self._world = world
        self.finish("world-gen", metadata={"languages": ",".join(world.target_languages)})
        return world

    def corpus_gen(self) -> Dict[str, int]:
        self.require("world-gen")
        c = self.config.corpus
        rows = CorpusService(self.world()).gen_corpus(
            self.stage_dir("corpus-gen"), c.pairs_per_direction, self.config.seed, (c.min_length, c.max_length),
            direction_scale=c.direction_scale, valid_fraction=c.valid_fraction, test_fraction=c.test_fraction,
            ood_pairs_per_direction=c.ood_pairs_per_direction,
        )
        counts = {split: len(split_rows) for split, split_rows in rows.items()}
        self.finish("corpus-gen", ["world-gen"], {split: str(n) for split, n in counts.items()})
        return counts

    def extract_features(self) -> Dict[str, int]:
        self.require("corpus-gen")
        service = DiscretizeService(self.feature_config)
        counts = {}
        for split in SPLITS:
            rows = self.rows(split)
            for side in ("src", "tgt"):
                features = service.features_for_rows(self.manifest_path(split), rows, side=side)
                DiscretizeService.save_features(self.stage_dir("features") / f"{side}_{split}.npz", features)
                self._features[(split, side)] = features
            counts[split] = len(rows)
        self.finish("features", ["corpus-gen"], {"n_bands": str(self.config.features.n_bands)})
        return counts

    def kmeans_train(self) -> Dict[str, float]:
        self.require("features")
        k = self.config.kmeans
        world = self.world()
        world_service = WorldService(world)
        service = DiscretizeService(self.feature_config)
        features = self.features("train", "tgt")
        purities = {}
        for group, languages in self.unit_groups().items():
            rows = [row for row in self.rows("train") if row.tgt_lang in languages]
            if not rows:
                raise UsageError(f"No training rows for unit group {group}")
            stacked = np.concatenate([features[row.tgt_audio] for row in rows])
            model = service.kmeans_train(
                stacked, DiscretizeService.family_k(world, group, k.k_factor), self.config.seed,
                max_iters=k.max_iters, tol=k.tol, family=group,
            )
            labels = np.concatenate([
                world_service.frame_labels(row.tgt_lang, row.target_symbols, self.feature_config) for row in rows
            ])
            purities[group] = service.cluster_purity(service.quantize(stacked, model), labels)
            DiscretizeService.save_model(self.stage_dir("kmeans-train") / f"{group}.pgs1", model)
            emit("kmeans", stage="kmeans-train", detail=group, k=model.k, inertia=model.inertia, purity=purities[group])
        self.finish("kmeans-train", ["features"], {group: f"{p:.6f}" for group, p in purities.items()})
        return purities

    def units_extract(self) -> ExtendedVocabulary:
        self.require("kmeans-train")
        self.require("features")
        service = DiscretizeService(self.feature_config)
        groups = self.unit_groups()
        models = {group: self.kmeans_model(group) for group in groups}
        for split in SPLITS:
            features = self.features(split, "tgt")
            for lang, lang_rows in CorpusService.by_direction(self.rows(split)).items():
                model = models[self.group_of(lang)]
                records = service.extract_units(features, lang_rows, model)
                DiscretizeService.write_unit_files(
                    self.stage_dir("units-extract") / split / f"{lang}.units", records, model.k, model.family,
                    extra_header=f"lang={lang}",
                )
        world = self.world()
        vocab = VocabService.build_extended(
            [(group, models[group].k) for group in groups],
            world.target_languages,
            {lang: group for group, languages in groups.items() for lang in languages},
        )
        VocabService(vocab).save(self.stage_dir("units-extract") / "vocab.json")
        self.finish("units-extract", ["kmeans-train", "features"], {"vocab_hash": vocab.manifest_hash()})
        return vocab

    def s2mu_train(self) -> S2MUService:
        self.require("units-extract")
        config = self.s2mu_config()
        languages = [config.bilingual_language] if config.mode == "bilingual" else None
        service = S2MUService(config, self.vocab(), seed=self.config.seed)
        history = service.train(
            self.translation_examples("train", languages), self.s2mu_training(),
            self.translation_examples("valid", languages),
        )
        directory = self.stage_dir("s2mu-train")
        service.save(directory / "model.pgs1")
        (directory / "history.json").write_text(history.model_dump_json(indent=2), encoding="utf-8")
        self.finish("s2mu-train", ["units-extract"], {"mode": config.mode, "best_step": str(history.best_step)})
        return service

    def load_s2mu(self) -> S2MUService:
        self.require("s2mu-train")
        return S2MUService.load(self.stage_dir("s2mu-train") / "model.pgs1", self.vocab().manifest_hash())

    def translate(self) -> Dict[str, float]:
        service = self.load_s2mu()
        split = self.config.eval.split
        masked = self.config.s2mu.masked
        features = self.features(split, "src")
        opts = self.decode_options()
        leakage: Dict[str, float] = {}
        for lang, lang_rows in CorpusService.by_direction(self.eval_rows(split)).items():
            if lang not in service.languages:
                continue
            records, rates = [], []
            for row in lang_rows:
                result = service.decode(features[row.src_audio], lang, opts, masked=masked)
                rates.append(service.leakage_rate(result.tokens, lang))
                records.append(service.to_raw(result))
            k = service.vocab.family_k(service.vocab.language_family[lang])
            DiscretizeService.write_unit_files(
                self.stage_dir("translate") / split / f"{lang}.units", records, k,
                service.vocab.language_family[lang], extra_header=f"lang={lang}",
            )
            leakage[lang] = float(np.mean(rates)) if rates else 0.0
            emit("translate", stage="translate", detail=lang, leakage=leakage[lang], n=len(records))
        (self.stage_dir("translate") / split / "leakage.json").write_text(
            json.dumps(leakage, indent=2, sort_keys=True), encoding="utf-8"
        )
        self.finish("translate", ["s2mu-train"], {"split": split, "masked": str(masked).lower()})
        return leakage

    def vocoder_train(self) -> Dict[str, VocoderService]:
        self.require("units-extract")
        trained = {}
        for key, languages in self.vocoder_keys().items():
            service = VocoderService(self.vocoder_config(languages), seed=self.config.seed)
            service.train(
                self.vocoder_examples(service, "train"), self.vocoder_training(),
                self.vocoder_examples(service, "valid"),
            )
            service.save(self.stage_dir("vocoder-train") / f"{key}.pgs1")
            trained[key] = service
        self.finish("vocoder-train", ["units-extract"], {"scope": self.config.vocoder.scope})
        return trained

    def _units_for_eval(self, split: str) -> Tuple[Dict[str, RunLengthUnits], str, str]:
        if self.config.eval.gold_units:
            self.require("units-extract")
            return self.gold_units(split), "gold-units", "units-extract"
        self.require("translate")
        return self.translations(split), "s2mu", "translate"

    def resynth(self) -> int:
        vocoders = self.load_vocoders()
        split = self.config.eval.split
        units, _, upstream = self._units_for_eval(split)
        count = 0
        for row in self.eval_rows(split):
            if row.id not in units:
                continue
            vocoder = vocoders.get(row.tgt_lang) or vocoders[self.group_of(row.tgt_lang)]
            wave = vocoder.resynthesize(units[row.id], self.config.vocoder.speaker, row.tgt_lang)
            write_wav(self.stage_dir("resynth") / split / f"{row.id}.wav", wave)
            count += 1
        self.finish("resynth", ["vocoder-train", upstream], {"split": split, "utterances": str(count)})
        return count

    def evaluate(self) -> AsrBleuReport:
        vocoders = self.load_vocoders()
        split = self.config.eval.split
        units, variant, upstream = self._units_for_eval(split)
        rows = [row for row in self.eval_rows(split) if row.id in units]
        report = EvalService(self.world()).asr_bleu(
            rows, lambda row: units[row.id], vocoders, variant, split=split, speaker=self.config.vocoder.speaker,
        )
        EvalService.write_reports([report], self.stage_dir("evaluate"), f"asr_bleu_{split}")
        for row in report.directions:
            emit("asr_bleu", stage="evaluate", detail=row.direction, bleu=row.bleu.score, wer=row.wer.rate)
        emit("asr_bleu", stage="evaluate", detail="avg", bleu=report.macro_average)
        self.finish("evaluate", ["vocoder-train", upstream], {"split": split, "variant": variant})
        return report

    def prepare_data(self) -> None:
        """world-gen through units-extract in one go (used by experiments)."""
        self.world_gen()
        self.corpus_gen()
        self.extract_features()
        self.kmeans_train()
        self.units_extract()
