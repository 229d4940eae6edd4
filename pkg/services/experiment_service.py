import json
import logging
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from models.config import RunConfig
from models.evaluation import AsrBleuReport, WerReport
from models.units import FeatureConfig, RunLengthUnits
from models.world import ManifestRow
from services.corpus_service import CorpusService, direction_name
from services.discretize_service import DiscretizeService
from services.eval_service import EvalService
from services.pipeline_service import PipelineService
from services.s2mu_service import S2MUService
from services.vocoder_service import VocoderService
from utils.errors import ConfigError, UsageError
from utils.events import emit

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["variant", "seed", "direction", "metric", "value", "n_examples"]

# (label, scope, size, with LID loss)
VOCODER_VARIANTS = [
    ("Mono-S", "mono", "small", False),
    ("Multi-S", "multi", "small", False),
    ("Multi-L", "multi", "large", False),
    ("Multi-L (+LID)", "multi", "large", True),
]


class ExperimentService:
    """Comparison presets: vocoder axes, S2ST model axes, unit granularity, mask ablation, unit sweep."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.pipeline = PipelineService(config)
        self.presets: Dict[str, Callable[[], pd.DataFrame]] = {
            "vocoder-compare": self.vocoder_compare,
            "s2st-compare": self.s2st_compare,
            "unit-granularity": self.unit_granularity,
            "mask-ablation": self.mask_ablation,
            "unit-sweep": self.unit_sweep,
        }

    def run(self, preset: str) -> pd.DataFrame:
        if preset not in self.presets:
            raise UsageError(f"Unknown experiment preset {preset!r}; expected one of {sorted(self.presets)}")
        logger.info(f"Running experiment {preset} with seeds {self.config.experiment.seeds}")
        table = self.presets[preset]()
        self.write_table(table, preset)
        return table

    def stage(self, preset: str) -> str:
        return f"experiment/{preset}"

    def write_table(self, table: pd.DataFrame, preset: str) -> Path:
        directory = self.pipeline.stage_dir(self.stage(preset))
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / "results.csv"
        table.to_csv(csv_path, index=False, float_format="%.6f")
        if {"variant", "direction", "metric", "value"} <= set(table.columns):
            keys = ["variant", "metric"] + (["split"] if "split" in table.columns else [])
            summary = table.groupby(keys + ["direction"], sort=True)["value"].mean().unstack("direction").round(6)
            summary_doc = {
                " | ".join(str(part) for part in label): {direction: float(value) for direction, value in row.dropna().items()}
                for label, row in summary.iterrows()
            }
            (directory / "results.json").write_text(json.dumps(summary_doc, indent=2, sort_keys=True), encoding="utf-8")
        self.pipeline.finish(self.stage(preset), metadata={"rows": str(len(table))})
        return csv_path

    def seed_pipeline(self, preset: str, seed: int, tag: str = "", **section_updates) -> PipelineService:
        """Private data pipeline for one seed under the preset's directory."""
        out = self.pipeline.stage_dir(self.stage(preset)) / (f"seed{seed}" + (f"-{tag}" if tag else ""))
        updates = {"seed": seed, "out": str(out)}
        for section, values in section_updates.items():
            updates[section] = getattr(self.config, section).model_copy(update=values)
        return PipelineService(self.config.model_copy(update=updates))

    # ===== SHARED HELPERS =====

    @staticmethod
    def train_vocoders(
        pipeline: PipelineService, scope: str, size: str, with_lid: bool, seed: int,
    ) -> Dict[str, VocoderService]:
        lambda_lid = pipeline.config.vocoder.lambda_lid if with_lid else 0.0
        vocoders = {}
        for key, languages in pipeline.vocoder_keys(scope).items():
            service = VocoderService(pipeline.vocoder_config(languages, size=size), seed=seed)
            service.train(
                pipeline.vocoder_examples(service, "train"),
                pipeline.vocoder_training(seed=seed, lambda_lid=lambda_lid),
                pipeline.vocoder_examples(service, "valid"),
            )
            vocoders[key] = service
        return vocoders

    @staticmethod
    def vocoder_scores(
        pipeline: PipelineService, vocoders: Dict[str, VocoderService], variant: str, seed: int, split: str = "test",
    ) -> List[Dict[str, object]]:
        """Symbol recovery and WER of gold-unit resynthesis, plus generated-audio LID accuracy."""
        world = pipeline.world()
        evaluator = EvalService(world)
        units = pipeline.gold_units(split)
        records: List[Dict[str, object]] = []
        for lang, rows in CorpusService.by_direction(pipeline.eval_rows(split)).items():
            vocoder = vocoders.get(lang) or vocoders.get(pipeline.group_of(lang))
            if vocoder is None:
                continue
            recovery, wer = [], WerReport()
            for row in rows:
                speaker = row.speaker if row.speaker < vocoder.config.num_speakers else pipeline.config.vocoder.speaker
                wave = vocoder.resynthesize(units[row.id], speaker, lang)
                transcript = evaluator.oracle_transcribe(wave, lang).symbols
                recovery.append(EvalService.symbol_recovery(transcript, row.target_symbols))
                wer = wer + EvalService.wer(transcript, row.target_symbols)
            direction = direction_name(world, lang)
            mean_recovery = float(np.mean(recovery)) if recovery else 0.0
            base = {"variant": variant, "seed": seed, "direction": direction, "n_examples": len(rows)}
            records.append({**base, "metric": "symbol_recovery", "value": mean_recovery})
            records.append({**base, "metric": "wer", "value": wer.rate})
            if not vocoder.config.monolingual:
                examples = [e for e in pipeline.vocoder_examples(vocoder, split) if e.language == lang]
                records.append({**base, "metric": "lid_accuracy", "value": vocoder.lid_accuracy(examples, generated=True)})
            emit("vocoder_eval", stage="experiment", detail=f"{variant} {direction}", recovery=mean_recovery, wer=wer.rate)
        return records

    @staticmethod
    def report_records(report: AsrBleuReport, seed: int) -> List[Dict[str, object]]:
        return [{"variant": report.variant, "seed": seed, **row} for row in report.rows()]

    # ===== PRESETS =====

    def vocoder_compare(self) -> pd.DataFrame:
        """Mono vs multilingual vocoders, small vs large unit embeddings, with and without the LID loss."""
        records: List[Dict[str, object]] = []
        for seed in self.config.experiment.seeds:
            pipeline = self.seed_pipeline("vocoder-compare", seed)
            pipeline.prepare_data()
            for label, scope, size, with_lid in VOCODER_VARIANTS:
                vocoders = self.train_vocoders(pipeline, scope, size, with_lid, seed)
                records.extend(self.vocoder_scores(pipeline, vocoders, label, seed))
        return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)

    def s2st_compare(self) -> pd.DataFrame:
        """Translation model x vocoder grid on in-domain and out-of-domain test sets, plus a gold-units bound."""
        e = self.config.experiment
        corpus_updates = {}
        if e.starved_direction:
            scale = dict(self.config.corpus.direction_scale)
            scale[e.starved_direction] = e.starved_fraction
            corpus_updates = {"direction_scale": scale}
        records: List[Dict[str, object]] = []
        for seed in e.seeds:
            pipeline = self.seed_pipeline("s2st-compare", seed, corpus=corpus_updates)
            pipeline.prepare_data()
            translators = self.train_translators(pipeline, seed)
            vocoder_sets = {
                "Mono-S": self.train_vocoders(pipeline, "mono", "small", False, seed),
                "Multi-L (+LID)": self.train_vocoders(pipeline, "multi", "large", True, seed),
            }
            evaluator = EvalService(pipeline.world())
            for split in ("test", "test_ood"):
                rows = pipeline.eval_rows(split)
                gold = pipeline.gold_units(split)
                for vocoder_label, vocoders in vocoder_sets.items():
                    report = evaluator.asr_bleu(
                        rows, lambda row: gold[row.id], vocoders, f"gold-units + {vocoder_label}", split=split,
                        speaker=self.config.vocoder.speaker,
                    )
                    records.extend(self._with_split(self.report_records(report, seed), split))
                    for model_label, make_translator in translators.items():
                        report = evaluator.asr_bleu(
                            rows, make_translator(split), vocoders, f"{model_label} + {vocoder_label}", split=split,
                            speaker=self.config.vocoder.speaker,
                        )
                        records.extend(self._with_split(self.report_records(report, seed), split))
        return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS + ["split"])

    @staticmethod
    def _with_split(records: List[Dict[str, object]], split: str) -> List[Dict[str, object]]:
        return [{**record, "split": split} for record in records]

    def train_translators(self, pipeline: PipelineService, seed: int) -> Dict[str, Callable[[str], Callable[[ManifestRow], RunLengthUnits]]]:
        """Multilingual S2MU, per-direction bilingual S2U and per-direction small bilingual models."""
        vocab = pipeline.vocab()
        training = pipeline.s2mu_training(seed=seed)
        multilingual = S2MUService(pipeline.s2mu_config(mode="multilingual"), vocab, seed=seed)
        multilingual.train(pipeline.translation_examples("train"), training, pipeline.translation_examples("valid"))

        bilingual: Dict[str, Dict[str, S2MUService]] = {"S2U (bilingual)": {}, "Textless (bilingual)": {}}
        for label, preset in (("S2U (bilingual)", "desk"), ("Textless (bilingual)", "textless")):
            for lang in pipeline.world().target_languages:
                service = S2MUService(pipeline.s2mu_config(mode="bilingual", language=lang, preset=preset), vocab, seed=seed)
                service.train(
                    pipeline.translation_examples("train", [lang]), training,
                    pipeline.translation_examples("valid", [lang]),
                )
                bilingual[label][lang] = service

        def multilingual_translator(split: str):
            return pipeline.s2mu_translator(multilingual, split)

        def bilingual_translator(services: Dict[str, S2MUService]):
            def for_split(split: str):
                per_lang = {lang: pipeline.s2mu_translator(service, split) for lang, service in services.items()}
                return lambda row: per_lang[row.tgt_lang](row)
            return for_split

        translators = {"S2MU (multilingual)": multilingual_translator}
        for label, services in bilingual.items():
            translators[label] = bilingual_translator(services)
        return translators

    def unit_granularity(self) -> pd.DataFrame:
        """Monolingual vocoders on language-specific vs family-specific units."""
        records: List[Dict[str, object]] = []
        for seed in self.config.experiment.seeds:
            scores = {}
            for tag, per_language in (("family", False), ("language", True)):
                pipeline = self.seed_pipeline("unit-granularity", seed, tag, kmeans={"per_language": per_language})
                pipeline.prepare_data()
                vocoders = self.train_vocoders(pipeline, "mono", "small", False, seed)
                rows = self.vocoder_scores(pipeline, vocoders, f"{tag}-units", seed)
                records.extend(rows)
                scores[tag] = {r["direction"]: r["value"] for r in rows if r["metric"] == "symbol_recovery"}
            for direction, family_score in scores["family"].items():
                gap = abs(family_score - scores["language"].get(direction, 0.0)) * 100.0
                records.append({
                    "variant": "gap", "seed": seed, "direction": direction, "metric": "recovery_gap_pp",
                    "value": gap, "n_examples": 0,
                })
        return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)

    def mask_ablation(self) -> pd.DataFrame:
        """Leakage of masked vs unmasked decoding from one small multilingual model."""
        seed = self.config.seed
        pipeline = self.seed_pipeline("mask-ablation", seed)
        pipeline.prepare_data()
        service = S2MUService(pipeline.s2mu_config(mode="multilingual", preset="textless"), pipeline.vocab(), seed=seed)
        service.train(
            pipeline.translation_examples("train"), pipeline.s2mu_training(seed=seed),
            pipeline.translation_examples("valid"),
        )
        pool = [(split, row) for split in ("test", "valid", "test_ood", "train") for row in pipeline.rows(split)]
        pool = pool[: self.config.experiment.leakage_decodes]
        opts = pipeline.decode_options()
        counts: Dict[str, Dict[str, List[int]]] = {}
        mass_error = 0.0
        for split, row in pool:
            features = pipeline.features(split, "src")[row.src_audio]
            for label, masked in (("masked", True), ("unmasked", False)):
                result = service.decode(features, row.tgt_lang, opts, masked=masked)
                units = [t for t in result.tokens if service.vocab.is_unit(t)]
                allowed = service.vocab_service.mask_for(row.tgt_lang).allowed
                leaked = sum(1 for t in units if not allowed[t])
                tally = counts.setdefault(label, {}).setdefault(row.tgt_lang, [0, 0, 0])
                tally[0] += leaked
                tally[1] += len(units)
                tally[2] += 1
                if masked and result.step_mass:
                    mass_error = max(mass_error, float(np.max(np.abs(np.asarray(result.step_mass) - 1.0))))
        world = pipeline.world()
        records: List[Dict[str, object]] = []
        for label, per_lang in counts.items():
            for lang, (leaked, total, n) in sorted(per_lang.items()):
                records.append({
                    "variant": label, "seed": seed, "direction": direction_name(world, lang), "metric": "leakage",
                    "value": leaked / total if total else 0.0, "n_examples": n,
                })
        records.append({
            "variant": "masked", "seed": seed, "direction": "all", "metric": "max_step_mass_error",
            "value": mass_error, "n_examples": len(pool),
        })
        return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)

    def unit_sweep(self, rows_per_family: int = 24) -> pd.DataFrame:
        """Grid over analyzer bands and cluster counts per family; writes the selection alongside."""
        k = self.config.kmeans
        f = self.config.features
        seed = self.config.seed
        pipeline = self.seed_pipeline("unit-sweep", seed)
        pipeline.world_gen()
        pipeline.corpus_gen()
        world = pipeline.world()
        service = DiscretizeService(pipeline.feature_config)
        feature_cfgs = [FeatureConfig(window=f.window, hop=f.hop, n_bands=n, n_fft=f.n_fft) for n in k.sweep_n_bands]
        tables, selected = [], {}
        for family in world.families:
            rows = [row for row in pipeline.rows("train") if row.tgt_lang in family.languages][:rows_per_family]
            if not rows:
                raise ConfigError(f"No training rows for family {family.family}")
            k_values = sorted({DiscretizeService.family_k(world, family.family, factor) for factor in k.sweep_k_factors})
            table, best = service.sweep_units(
                world, pipeline.manifest_path("train"), rows, feature_cfgs, k_values,
                seed=seed, recovery_steps=k.recovery_steps, max_iters=k.max_iters,
            )
            table.insert(0, "family", family.family)
            tables.append(table)
            selected[family.family] = json.loads(pd.Series(best).to_json())
        directory = self.pipeline.stage_dir(self.stage("unit-sweep"))
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "selected.json").write_text(json.dumps(selected, indent=2, sort_keys=True), encoding="utf-8")
        return pd.concat(tables, ignore_index=True)
