import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from models.s2mu import (
    DecodeOptions,
    DecodeResult,
    LossReport,
    PredictedDistribution,
    S2MUConfig,
    S2MUTrainingConfig,
    TrainingBatch,
    TrainingHistory,
)
from models.units import RunLengthUnits
from models.vocab import EOS, PAD, BOS, ExtendedVocabulary
from networks.s2mu import S2MUModel
from numerics import functional as F
from numerics.checkpoint import load_checkpoint, save_checkpoint
from numerics.optim import Adam, inverse_sqrt_schedule
from numerics.tensor import Tensor, no_grad
from services.vocab_service import VocabService
from utils.errors import DataIntegrityError, TrainingError, VocabularyError
from utils.events import emit

logger = logging.getLogger(__name__)


class TranslationExample(BaseModel):
    """Source features paired with raw (family-local) target units."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    features: np.ndarray          # [T x D]
    units: RunLengthUnits
    language: str


class S2MUService:
    """Training, masked loss and masked decoding for one S2MU model."""

    def __init__(self, config: S2MUConfig, vocab: ExtendedVocabulary, seed: int = 0):
        self.config = config
        self.full_vocab = vocab
        if config.mode == "bilingual":
            vocab = VocabService(vocab).restricted_to(config.bilingual_language)
        self.vocab = vocab
        self.vocab_service = VocabService(vocab)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.model = S2MUModel(config, vocab.size, self.rng)
        logger.info(
            f"S2MU model ({config.mode}) with {self.model.num_parameters()} parameters over |V|={vocab.size}"
        )

    @property
    def languages(self) -> List[str]:
        return list(self.vocab.languages)

    # ===== FORWARD =====

    def encode(self, features) -> Tensor:
        return self.model.encoder(features)

    def adapt_length(self, encoder_states: Tensor) -> Tensor:
        return self.model.adaptor(encoder_states)

    # ===== BATCHES =====

    def make_batch(self, examples: Sequence[TranslationExample]) -> TrainingBatch:
        targets = []
        for example in examples:
            if example.language not in self.vocab.languages:
                raise VocabularyError(f"Example {example.id} targets {example.language}, outside this model's vocabulary")
            targets.append(self.vocab_service.encode_target(example.language, self.vocab_service.tag_units(example.units)))
        feature_lengths = [int(e.features.shape[0]) for e in examples]
        dim = examples[0].features.shape[1]
        features = np.zeros((len(examples), max(feature_lengths), dim))
        for i, example in enumerate(examples):
            features[i, : feature_lengths[i]] = example.features
        padded = np.full((len(examples), max(len(t) for t in targets)), PAD, dtype=np.int64)
        for i, target in enumerate(targets):
            padded[i, : len(target)] = target
        return TrainingBatch(
            features=features,
            feature_lengths=feature_lengths,
            targets=padded,
            target_lengths=[len(t) for t in targets],
            languages=[e.language for e in examples],
            ids=[e.id for e in examples],
        )

    def batch_logits(self, batch: TrainingBatch) -> List[Tensor]:
        logits = []
        for i in range(batch.size):
            target = batch.example_target(i).tolist()
            logits.append(self.model(batch.example_features(i), VocabService.decoder_input(target)))
        return logits

    # ===== LOSS =====

    def _allowed(self, lang: str, masks: Optional[Mapping[str, np.ndarray]]) -> np.ndarray:
        if masks is not None and lang in masks:
            return np.asarray(masks[lang], dtype=bool)
        return self.vocab_service.mask_for(lang).allowed

    def loss_from_logits(
        self,
        logits: Sequence[Tensor],
        batch: TrainingBatch,
        masks: Optional[Mapping[str, np.ndarray]] = None,
        label_smoothing: Optional[float] = None,
    ) -> Tuple[Tensor, LossReport]:
        """Masked cross-entropy, token-weighted over the batch.

        Row 0 of each example predicts the forced language tag and is not scored;
        the remaining ``T = len(units) + 1`` rows score the units and eos.
        """
        smoothing = self.config.label_smoothing if label_smoothing is None else label_smoothing
        total: Optional[Tensor] = None
        tokens = 0
        correct = 0
        for i, example_logits in enumerate(logits):
            target = batch.example_target(i)
            gold = target[1:]
            allowed = self._allowed(batch.languages[i], masks)
            allowed_ids = np.flatnonzero(allowed)
            outside = [int(t) for t in gold if not allowed[t]]
            if outside:
                raise DataIntegrityError(
                    f"Example {batch.ids[i]}: gold tokens {outside[:5]} lie outside the {batch.languages[i]} mask"
                )
            rows = example_logits[1: len(target)]
            if self.config.normalizer == "restricted":
                log_probs = F.masked_log_softmax(rows, allowed)
            else:
                log_probs = F.log_softmax(rows)
            column = {int(token): c for c, token in enumerate(allowed_ids)}
            smoothed = np.full((len(gold), len(allowed_ids)), smoothing / len(allowed_ids))
            smoothed[np.arange(len(gold)), [column[int(t)] for t in gold]] += 1.0 - smoothing
            example_loss = -(log_probs[:, allowed_ids] * smoothed).sum()
            total = example_loss if total is None else total + example_loss
            tokens += len(gold)
            predicted = allowed_ids[rows.data[:, allowed_ids].argmax(axis=1)]
            correct += int((predicted == gold).sum())

        loss = total * (1.0 / max(tokens, 1))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"Non-finite S2MU loss on batch {batch.ids}")
        report = LossReport(loss=max(value, 0.0), accuracy=correct / max(tokens, 1), tokens=tokens)
        return loss, report

    def masked_loss(
        self,
        logits: Sequence[Tensor],
        batch: TrainingBatch,
        masks: Optional[Mapping[str, np.ndarray]] = None,
    ) -> LossReport:
        return self.loss_from_logits(logits, batch, masks)[1]

    def predicted_distribution(self, logits: Tensor, lang: str) -> PredictedDistribution:
        allowed = self.vocab_service.mask_for(lang).allowed
        return PredictedDistribution(
            logits=logits.data, log_probs=F.masked_log_softmax(logits.detach(), allowed).data, allowed=allowed,
        )

    # ===== TRAINING =====

    def make_optimizer(self, training: S2MUTrainingConfig) -> Adam:
        return Adam(
            self.model.named_parameters(),
            lr=training.learning_rate,
            schedule=inverse_sqrt_schedule(training.learning_rate, training.warmup_steps),
        )

    def train_step(self, batch: TrainingBatch, optimizer: Adam) -> LossReport:
        self.model.train()
        optimizer.zero_grad()
        loss, report = self.loss_from_logits(self.batch_logits(batch), batch)
        loss.backward()
        try:
            state = optimizer.step()
        except TrainingError as e:
            raise TrainingError(f"{e.detail} (batch {batch.ids})")
        report.step = state.step_count
        report.learning_rate = state.learning_rate
        return report

    def evaluate_loss(self, examples: Sequence[TranslationExample], batch_size: int = 16) -> LossReport:
        self.model.eval()
        total, tokens, correct = 0.0, 0, 0.0
        with no_grad():
            for start in range(0, len(examples), batch_size):
                batch = self.make_batch(examples[start:start + batch_size])
                _, report = self.loss_from_logits(self.batch_logits(batch), batch)
                total += report.loss * report.tokens
                correct += report.accuracy * report.tokens
                tokens += report.tokens
        return LossReport(loss=total / max(tokens, 1), accuracy=correct / max(tokens, 1), tokens=tokens)

    def train(
        self,
        train_examples: Sequence[TranslationExample],
        training: S2MUTrainingConfig,
        valid_examples: Sequence[TranslationExample] = (),
    ) -> TrainingHistory:
        """Shuffled mini-batch training; keeps the parameters with the lowest validation loss."""
        history = TrainingHistory()
        if not train_examples or training.steps == 0:
            return history
        optimizer = self.make_optimizer(training)
        order_rng = np.random.default_rng([training.seed, 1])
        best_state: Optional[Dict[str, np.ndarray]] = None
        order: List[int] = []
        for step in range(1, training.steps + 1):
            if len(order) < training.batch_size:
                order.extend(order_rng.permutation(len(train_examples)).tolist())
            picked, order = order[: training.batch_size], order[training.batch_size:]
            report = self.train_step(self.make_batch([train_examples[i] for i in picked]), optimizer)
            history.train.append(report)
            emit("train_step", stage="s2mu", step=step, loss=report.loss, accuracy=report.accuracy, lr=report.learning_rate)

            if valid_examples and (step % training.eval_interval == 0 or step == training.steps):
                valid = self.evaluate_loss(valid_examples, training.batch_size)
                valid.step = step
                history.valid.append(valid)
                emit("validation", stage="s2mu", step=step, loss=valid.loss, accuracy=valid.accuracy)
                if history.best_valid_loss is None or valid.loss < history.best_valid_loss:
                    history.best_valid_loss = valid.loss
                    history.best_step = step
                    best_state = self.model.state_dict()

        if best_state is not None:
            self.model.load_state_dict(best_state)
            logger.info(f"Restored best S2MU parameters from step {history.best_step} (valid loss {history.best_valid_loss:.4f})")
        return history

    # ===== DECODING =====

    def _decode_mask(self, lang: str, masked: bool) -> np.ndarray:
        if lang not in self.vocab.languages:
            raise VocabularyError(f"Unknown target language {lang!r}")
        return self.vocab_service.mask_for(lang).allowed if masked else self.vocab_service.full_unit_mask()

    def _step_log_probs(self, prefix: List[int], memory: Tensor, allowed: np.ndarray) -> np.ndarray:
        row = self.model.decoder(prefix, memory)[-1]
        return F.masked_log_softmax(row, allowed).data

    def decode(self, features, target_lang: str, opts: Optional[DecodeOptions] = None, masked: bool = True) -> DecodeResult:
        opts = opts or DecodeOptions()
        allowed = self._decode_mask(target_lang, masked)
        self.model.eval()
        with no_grad():
            memory = self.model.memory(features)
            prefix = [BOS, self.vocab.tag_id(target_lang)]
            if opts.strategy == "greedy" or opts.beam_width == 1:
                tokens, score, truncated, mass = self._greedy(prefix, memory, allowed, opts.max_len)
            else:
                tokens, score, truncated, mass = self._beam(prefix, memory, allowed, opts)
        family = self.vocab.language_family[target_lang]
        collapsed = [t for i, t in enumerate(tokens) if i == 0 or t != tokens[i - 1]]
        return DecodeResult(
            tokens=tokens,
            units=RunLengthUnits(units=collapsed, family=family, language=target_lang, id_space="extended"),
            language=target_lang,
            truncated=truncated,
            score=score,
            step_mass=mass,
        )

    def masked_decode(self, features, target_lang: str, opts: Optional[DecodeOptions] = None) -> DecodeResult:
        return self.decode(features, target_lang, opts, masked=True)

    def unmasked_decode(self, features, target_lang: str, opts: Optional[DecodeOptions] = None) -> DecodeResult:
        """Ablation: every unit id is decodable regardless of the target language."""
        return self.decode(features, target_lang, opts, masked=False)

    def _greedy(self, prefix, memory, allowed, max_len) -> Tuple[List[int], float, bool, List[float]]:
        tokens: List[int] = []
        score = 0.0
        mass: List[float] = []
        for _ in range(max_len):
            log_probs = self._step_log_probs(prefix + tokens, memory, allowed)
            mass.append(float(np.exp(log_probs[allowed]).sum()))
            # argmax picks the lowest id among ties
            token = int(np.argmax(np.where(allowed, log_probs, -np.inf)))
            score += float(log_probs[token])
            if token == EOS:
                return tokens, score, False, mass
            tokens.append(token)
        return tokens, score, True, mass

    def _beam(self, prefix, memory, allowed, opts: DecodeOptions) -> Tuple[List[int], float, bool, List[float]]:
        allowed_ids = np.flatnonzero(allowed)
        beams: List[Tuple[float, List[int]]] = [(0.0, [])]
        finished: List[Tuple[float, float, List[int]]] = []
        mass: List[float] = []
        for _ in range(opts.max_len):
            candidates: List[Tuple[float, int, int, List[int]]] = []
            for rank, (score, tokens) in enumerate(beams):
                log_probs = self._step_log_probs(prefix + tokens, memory, allowed)
                mass.append(float(np.exp(log_probs[allowed]).sum()))
                for token in allowed_ids:
                    candidates.append((score + float(log_probs[token]), rank, int(token), tokens))
            # higher score first; ties go to the lower token id, then the earlier beam
            candidates.sort(key=lambda c: (-c[0], c[2], c[1]))
            beams = []
            for score, _, token, tokens in candidates[: opts.beam_width - len(finished)]:
                if token == EOS:
                    length = len(tokens) + 1
                    finished.append((score / length ** opts.length_penalty, score, tokens))
                else:
                    beams.append((score, tokens + [token]))
            if len(finished) >= opts.beam_width or not beams:
                break
        if finished:
            finished.sort(key=lambda f: (-f[0], f[2]))
            _, score, tokens = finished[0]
            return tokens, score, False, mass
        score, tokens = beams[0] if beams else (0.0, [])
        return tokens, score, True, mass

    def leakage_rate(self, tokens: Sequence[int], lang: str) -> float:
        return self.vocab_service.leakage_rate(tokens, lang)

    def to_raw(self, result: DecodeResult) -> RunLengthUnits:
        """Decoded extended ids back to family-local unit ids of the target family."""
        start, stop = self.vocab.family_block(self.vocab.language_family[result.language])
        kept = [t - start for t in result.units.units if start <= t < stop]
        collapsed = [u for i, u in enumerate(kept) if i == 0 or u != kept[i - 1]]
        return RunLengthUnits(units=collapsed, family=result.units.family, language=result.language)

    # ===== PERSISTENCE =====

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "kind": "s2mu",
            "config": self.config.model_dump(),
            "vocabulary": self.full_vocab.model_dump(),
            "vocab_hash": self.full_vocab.manifest_hash(),
            "seed": self.seed,
        }
        return save_checkpoint(path, self.model.state_dict(), metadata)

    @classmethod
    def load(cls, path: Union[str, Path], expected_vocab_hash: Optional[str] = None) -> "S2MUService":
        arrays, metadata = load_checkpoint(path)
        if metadata.get("kind") != "s2mu":
            raise DataIntegrityError(f"{path} is not an S2MU checkpoint")
        if expected_vocab_hash is not None and metadata["vocab_hash"] != expected_vocab_hash:
            raise DataIntegrityError(
                f"{path} was trained against vocabulary {metadata['vocab_hash']}, expected {expected_vocab_hash}"
            )
        service = cls(S2MUConfig(**metadata["config"]), ExtendedVocabulary(**metadata["vocabulary"]), metadata["seed"])
        service.model.load_state_dict(arrays)
        return service
