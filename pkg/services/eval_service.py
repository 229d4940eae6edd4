import json
import logging
import math
from collections import Counter
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import get_window

from models.evaluation import AsrBleuReport, BleuReport, DirectionReport, TranscriptResult, WerReport
from models.units import RunLengthUnits
from models.world import ManifestRow, Waveform, WorldSpec
from services.corpus_service import direction_name
from utils.errors import ConfigError, UsageError, VocabularyError

if TYPE_CHECKING:
    from services.vocoder_service import VocoderService

logger = logging.getLogger(__name__)

MAX_ORDER = 4
SILENCE_RMS = 0.01
SMOOTHING = "add-one-on-zero-match-orders"
REPORT_COLUMNS = ["direction", "metric", "value", "n_examples"]

Translator = Callable[[ManifestRow], RunLengthUnits]


def _ngrams(tokens: Sequence, order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


class EvalService:
    """Oracle transcription of synthetic speech plus WER, BLEU and ASR-BLEU scoring."""

    def __init__(self, world: WorldSpec):
        self.world = world

    # ===== ORACLE ASR =====

    def oracle_transcribe(self, waveform: Union[Waveform, np.ndarray], lang: str) -> TranscriptResult:
        """One symbol per ``symbol_duration`` window: the inventory tone nearest the window's spectral peak.

        Windows below the energy gate are skipped; a trailing partial window counts when it
        covers at least half a symbol.
        """
        if lang != self.world.source_language and lang not in self.world.lexicon:
            raise VocabularyError(f"Unknown language {lang!r}")
        signal = waveform.to_float() if isinstance(waveform, Waveform) else np.asarray(waveform, dtype=np.float64)
        table = self.world.frequency_table(lang)
        symbols = np.array(sorted(table))
        tones = np.array([table[s] for s in symbols])
        n = self.world.samples_per_symbol
        n_fft = 1 << max(12, int(math.ceil(math.log2(4 * n))))
        freqs = np.fft.rfftfreq(n_fft, d=1.0 / self.world.sample_rate)

        result = TranscriptResult()
        for start in range(0, signal.size, n):
            window = signal[start:start + n]
            if window.size < n / 2:
                break
            if np.sqrt(np.mean(window ** 2)) < SILENCE_RMS:
                result.skipped_windows += 1
                continue
            spectrum = np.abs(np.fft.rfft(window * get_window("hann", window.size), n=n_fft))
            peak = float(freqs[int(spectrum.argmax())])
            nearest = int(np.abs(tones - peak).argmin())
            result.symbols.append(int(symbols[nearest]))
            result.confidences.append(
                float(max(0.0, 1.0 - abs(peak - tones[nearest]) / (self.world.min_separation / 2.0)))
            )
        return result

    # ===== METRICS =====

    @staticmethod
    def wer(hypothesis: Sequence, reference: Sequence) -> WerReport:
        """Unit-cost Levenshtein alignment; among equal-cost paths the backtrace prefers substitutions."""
        hyp, ref = list(hypothesis), list(reference)
        rows, cols = len(ref) + 1, len(hyp) + 1
        cost = np.zeros((rows, cols), dtype=np.int64)
        cost[:, 0] = np.arange(rows)
        cost[0, :] = np.arange(cols)
        for i in range(1, rows):
            for j in range(1, cols):
                diagonal = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
                cost[i, j] = min(diagonal, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

        s = ins = d = 0
        i, j = len(ref), len(hyp)
        while i > 0 or j > 0:
            if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
                s += int(ref[i - 1] != hyp[j - 1])
                i, j = i - 1, j - 1
            elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
                d += 1
                i -= 1
            else:
                ins += 1
                j -= 1
        return WerReport(
            substitutions=s, insertions=ins, deletions=d, reference_length=len(ref),
            rate=(s + ins + d) / max(1, len(ref)),
        )

    @staticmethod
    def symbol_recovery(hypothesis: Sequence, reference: Sequence) -> float:
        return max(0.0, 1.0 - EvalService.wer(hypothesis, reference).rate)

    @staticmethod
    def bleu(corpus: Sequence[Tuple[Sequence, Sequence]]) -> BleuReport:
        """Corpus BLEU over orders 1-4 with clipped counts; zero-match orders get add-one smoothing."""
        if not corpus:
            raise UsageError("BLEU needs a non-empty corpus of (hypothesis, reference) pairs")
        matches = [0] * MAX_ORDER
        totals = [0] * MAX_ORDER
        hyp_len = ref_len = 0
        for hypothesis, reference in corpus:
            hyp, ref = list(hypothesis), list(reference)
            hyp_len += len(hyp)
            ref_len += len(ref)
            for order in range(1, MAX_ORDER + 1):
                hyp_counts = _ngrams(hyp, order)
                ref_counts = _ngrams(ref, order)
                matches[order - 1] += sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
                totals[order - 1] += max(0, len(hyp) - order + 1)

        precisions = [
            (m + 1) / (t + 1) if m == 0 else m / t
            for m, t in zip(matches, totals)
        ]
        if hyp_len == 0:
            brevity = 0.0
        elif hyp_len < ref_len:
            brevity = math.exp(1.0 - ref_len / hyp_len)
        else:
            brevity = 1.0
        score = 100.0 * brevity * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER) if brevity > 0 else 0.0
        return BleuReport(
            precisions=precisions, matches=matches, totals=totals, brevity_penalty=brevity,
            hypothesis_length=hyp_len, reference_length=ref_len, score=min(100.0, score),
            smoothing=SMOOTHING, n_examples=len(corpus),
        )

    # ===== ASR-BLEU =====

    def asr_bleu(
        self,
        rows: Sequence[ManifestRow],
        translate: Translator,
        vocoders: Mapping[str, "VocoderService"],
        variant: str,
        split: str = "test",
        speaker: int = 0,
        max_examples: Optional[int] = None,
    ) -> AsrBleuReport:
        """translate -> resynthesize with the target family's vocoder -> oracle ASR -> corpus BLEU per direction."""
        grouped: Dict[str, List[ManifestRow]] = {}
        for row in rows:
            grouped.setdefault(row.tgt_lang, []).append(row)

        report = AsrBleuReport(
            variant=variant, split=split,
            metadata={"bleu_smoothing": SMOOTHING, "asr": "spectral-oracle", "speaker": str(speaker)},
        )
        for family in self.world.families:
            for lang in family.languages:
                direction = direction_name(self.world, lang)
                lang_rows = grouped.get(lang, [])[:max_examples] if max_examples else grouped.get(lang, [])
                if not lang_rows:
                    logger.warning(f"No {split} examples for {direction}; omitted from {variant}")
                    report.omitted.append(direction)
                    continue
                # monolingual vocoders are keyed by language, multilingual ones by family
                vocoder = vocoders.get(lang) or vocoders.get(family.family)
                if vocoder is None:
                    raise ConfigError(f"No vocoder for family {family.family} (needed by {direction})")
                corpus = []
                wer = WerReport()
                for row in lang_rows:
                    units = translate(row)
                    audio = vocoder.resynthesize(units, speaker, lang)
                    transcript = self.oracle_transcribe(audio, lang).symbols
                    corpus.append((transcript, row.target_symbols))
                    wer = wer + self.wer(transcript, row.target_symbols)
                bleu = self.bleu(corpus)
                report.directions.append(DirectionReport(
                    direction=direction, variant=variant, bleu=bleu, wer=wer, n_examples=len(corpus),
                ))
                logger.info(f"{variant} {direction}: ASR-BLEU {bleu.score:.2f}, WER {wer.rate:.3f} over {len(corpus)} examples")
        return report

    # ===== REPORTS =====

    @staticmethod
    def report_frame(reports: Sequence[AsrBleuReport]) -> pd.DataFrame:
        """Long-format table; a ``variant`` column is added when several reports are combined."""
        frames = []
        for report in reports:
            frame = pd.DataFrame.from_records(report.rows(), columns=REPORT_COLUMNS)
            if len(reports) > 1:
                frame.insert(0, "variant", report.variant)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=REPORT_COLUMNS)

    @classmethod
    def write_reports(cls, reports: Sequence[AsrBleuReport], out_dir: Union[str, Path], name: str) -> Tuple[Path, Path]:
        """``<name>.csv`` plus a ``<name>.json`` summary laid out variant x direction."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{name}.csv"
        cls.report_frame(reports).to_csv(csv_path, index=False, float_format="%.6f")
        summary = {
            report.variant: {
                "split": report.split,
                "directions": {row.direction: row.bleu.score for row in report.directions if row.bleu is not None},
                "avg": report.macro_average,
                "omitted": report.omitted,
                "metadata": report.metadata,
            }
            for report in reports
        }
        json_path = out_dir / f"{name}.json"
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        return csv_path, json_path
