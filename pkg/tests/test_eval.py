import itertools
import json
import math
from collections import Counter
from unittest.mock import MagicMock

import numpy as np
import pytest

from models.evaluation import AsrBleuReport, DirectionReport
from models.units import RunLengthUnits
from models.world import Waveform
from services.corpus_service import CorpusService
from services.eval_service import EvalService
from services.world_service import WorldService
from utils.errors import ConfigError, UsageError, VocabularyError


def edit_distance(a, b):
    """Plain recursive Levenshtein distance"""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        edit_distance(a[1:], b[1:]) + (a[0] != b[0]),
        edit_distance(a[1:], b) + 1,
        edit_distance(a, b[1:]) + 1,
    )


def reference_bleu(corpus):
    """Corpus BLEU counted from scratch, same smoothing rule"""
    log_total = 0.0
    for order in range(1, 5):
        matched = total = 0
        for hyp, ref in corpus:
            hyp_grams = Counter(tuple(hyp[i:i + order]) for i in range(len(hyp) - order + 1))
            ref_grams = Counter(tuple(ref[i:i + order]) for i in range(len(ref) - order + 1))
            matched += sum((hyp_grams & ref_grams).values())
            total += sum(hyp_grams.values())
        log_total += math.log((matched + 1) / (total + 1) if matched == 0 else matched / total)
    hyp_len = sum(len(h) for h, _ in corpus)
    ref_len = sum(len(r) for _, r in corpus)
    if hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_total / 4)


@pytest.fixture
def evaluator(world):
    """Evaluator over the shared test world"""
    return EvalService(world)


class TestOracleTranscribe:
    """Spectral oracle ASR"""

    @pytest.mark.parametrize("lang", ["en", "gem0", "gem1", "rom0", "rom1"])
    def test_recovers_clean_synthesis(self, world, evaluator, lang):
        symbols = [0, 5, 5, 2, 3, 1]
        for speaker in range(world.num_speakers + 2):
            wave = WorldService(world).synthesize_utterance(lang, symbols, speaker)
            result = evaluator.oracle_transcribe(wave, lang)
            assert result.symbols == symbols
            assert min(result.confidences) > 0.0

    def test_short_trailing_window_still_counts(self, world, evaluator):
        wave = WorldService(world).synthesize_utterance("rom1", [4, 1], 0)
        trimmed = wave.samples[: -2 * 80]
        assert evaluator.oracle_transcribe(trimmed.astype(np.float64) / 32767.0, "rom1").symbols == [4, 1]

    def test_silence_is_skipped(self, world, evaluator):
        tone = WorldService(world).synthesize_utterance("gem0", [3], 0).to_float()
        signal = np.concatenate([np.zeros(world.samples_per_symbol), tone])
        result = evaluator.oracle_transcribe(Waveform.from_float(signal, world.sample_rate), "gem0")
        assert result.symbols == [3]
        assert result.skipped_windows == 1

    def test_unknown_language(self, evaluator):
        with pytest.raises(VocabularyError, match="Unknown language"):
            evaluator.oracle_transcribe(np.zeros(640), "xx")


class TestWer:
    """Word error rate"""

    def test_error_kinds(self):
        report = EvalService.wer([1, 9, 3, 4], [1, 2, 3])
        assert (report.substitutions, report.insertions, report.deletions) == (1, 1, 0)
        assert report.rate == pytest.approx(2 / 3)
        deleted = EvalService.wer([1], [1, 2, 3])
        assert deleted.deletions == 2 and deleted.rate == pytest.approx(2 / 3)

    def test_empty_reference(self):
        assert EvalService.wer([1, 2], []).rate == 2.0
        assert EvalService.wer([], []).rate == 0.0

    def test_matches_exhaustive_edit_distance(self, rng):
        for _ in range(60):
            hyp = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
            ref = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
            assert EvalService.wer(hyp, ref).errors == edit_distance(hyp, ref)

    def test_pooling_adds_counts(self):
        pooled = EvalService.wer([1], [1, 2]) + EvalService.wer([5, 6], [5, 6, 7, 8])
        assert pooled.deletions == 3 and pooled.reference_length == 6
        assert pooled.rate == pytest.approx(0.5)

    def test_symbol_recovery_floors_at_zero(self):
        assert EvalService.symbol_recovery([1, 2, 3, 4], [9]) == 0.0
        assert EvalService.symbol_recovery([1, 2], [1, 2]) == 1.0


class TestBleu:
    """Corpus BLEU"""

    def test_perfect_corpus(self):
        report = EvalService.bleu([([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]), ([6, 7], [6, 7])])
        assert report.score == pytest.approx(100.0)

    def test_empty_corpus_rejected(self):
        with pytest.raises(UsageError, match="non-empty corpus"):
            EvalService.bleu([])

    def test_empty_hypotheses_score_zero(self):
        report = EvalService.bleu([([], [1, 2, 3])])
        assert report.score == 0.0 and report.brevity_penalty == 0.0

    def test_clipped_counts(self):
        report = EvalService.bleu([([1, 1, 1, 1], [1, 2])])
        assert report.matches[0] == 1 and report.totals[0] == 4

    def test_matches_independent_counter(self, rng):
        for _ in range(25):
            corpus = [
                (rng.integers(0, 4, size=rng.integers(1, 9)).tolist(), rng.integers(0, 4, size=rng.integers(1, 9)).tolist())
                for _ in range(rng.integers(1, 4))
            ]
            assert EvalService.bleu(corpus).score == pytest.approx(min(100.0, reference_bleu(corpus)))

    def test_agrees_with_sacrebleu_without_zero_orders(self):
        sacrebleu = pytest.importorskip("sacrebleu")
        corpus = [
            ([1, 2, 3, 4, 5, 6, 7], [1, 2, 3, 4, 5, 9, 7]),
            ([3, 3, 4, 5, 6], [3, 3, 4, 5, 6, 8]),
            ([9, 8, 7, 6, 5, 4], [9, 8, 7, 6, 5, 4]),
        ]
        ours = EvalService.bleu(corpus)
        assert all(m > 0 for m in ours.matches)
        hyps = [" ".join(map(str, h)) for h, _ in corpus]
        refs = [[" ".join(map(str, r)) for _, r in corpus]]
        theirs = sacrebleu.corpus_bleu(hyps, refs, tokenize="none", smooth_method="none")
        assert ours.score == pytest.approx(theirs.score, abs=1e-6)


class TestAsrBleu:
    """End-to-end scoring with an oracle-quality vocoder"""

    @pytest.fixture
    def test_rows(self, corpus_dir):
        """Test split rows"""
        return CorpusService.load_manifest(corpus_dir / "test.jsonl")

    @pytest.fixture
    def perfect(self, world, test_rows):
        """Translator returning an index unit and a vocoder rendering the gold target for it"""
        gold = {index: row for index, row in enumerate(test_rows)}
        rows_index = {row.id: index for index, row in gold.items()}
        service = WorldService(world)

        def translate(row):
            return RunLengthUnits(units=[rows_index[row.id]], durations=[1], family=row.tgt_lang[:3], language=row.tgt_lang)

        def resynthesize(units, speaker, lang):
            return service.synthesize_utterance(lang, gold[units.units[0]].target_symbols, speaker)

        vocoder = MagicMock()
        vocoder.resynthesize.side_effect = resynthesize
        return translate, vocoder

    def test_perfect_translation_scores_100(self, world, evaluator, test_rows, perfect):
        translate, vocoder = perfect
        report = evaluator.asr_bleu(test_rows, translate, {"gem": vocoder, "rom": vocoder}, variant="oracle")
        assert [row.direction for row in report.directions] == ["en-gem0", "en-gem1", "en-rom0", "en-rom1"]
        assert all(row.bleu.score == pytest.approx(100.0) for row in report.directions)
        assert all(row.wer.rate == 0.0 for row in report.directions)
        assert report.macro_average == pytest.approx(100.0)
        assert vocoder.resynthesize.call_count == len(test_rows)

    def test_language_keyed_vocoder_wins(self, evaluator, test_rows, perfect):
        translate, vocoder = perfect
        family_vocoder = MagicMock()
        evaluator.asr_bleu(test_rows, translate, {"gem0": vocoder, "gem1": vocoder, "gem": family_vocoder, "rom": vocoder}, "mono")
        family_vocoder.resynthesize.assert_not_called()

    def test_missing_vocoder(self, evaluator, test_rows, perfect):
        translate, vocoder = perfect
        with pytest.raises(ConfigError, match="No vocoder for family rom"):
            evaluator.asr_bleu(test_rows, translate, {"gem": vocoder}, "broken")

    def test_empty_directions_are_omitted(self, evaluator, test_rows, perfect):
        translate, vocoder = perfect
        rows = [row for row in test_rows if row.tgt_lang == "gem1"]
        report = evaluator.asr_bleu(rows, translate, {"gem": vocoder, "rom": vocoder}, "partial", max_examples=1)
        assert report.omitted == ["en-gem0", "en-rom0", "en-rom1"]
        assert report.directions[0].n_examples == 1


class TestReports:
    """CSV and JSON tables"""

    @pytest.fixture
    def reports(self):
        """Two variants over one direction"""
        def report(variant, score):
            bleu = EvalService.bleu([([1, 2, 3, 4], [1, 2, 3, 4])]).model_copy(update={"score": score})
            return AsrBleuReport(
                variant=variant,
                directions=[DirectionReport(direction="en-gem0", variant=variant, bleu=bleu, n_examples=1)],
            )

        return [report("Multi-L", 80.0), report("Mono-S", 60.0)]

    def test_frame_has_variant_column_for_several_reports(self, reports):
        frame = EvalService.report_frame(reports)
        assert list(frame.columns) == ["variant", "direction", "metric", "value", "n_examples"]
        assert list(EvalService.report_frame(reports[:1]).columns) == ["direction", "metric", "value", "n_examples"]
        averages = frame[frame["direction"] == "avg"]["value"].tolist()
        assert averages == [80.0, 60.0]

    def test_write_reports(self, reports, tmp_path):
        csv_path, json_path = EvalService.write_reports(reports, tmp_path, "asr_bleu_test")
        assert csv_path.read_text().splitlines()[0] == "variant,direction,metric,value,n_examples"
        summary = json.loads(json_path.read_text())
        assert summary["Mono-S"]["directions"] == {"en-gem0": 60.0}
        assert summary["Multi-L"]["avg"] == 80.0
