import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from models.units import RunLengthUnits
from models.vocoder import AuxiliaryReport, VocoderConfig, VocoderHistory, VocoderLosses, VocoderTrainingConfig
from models.world import ManifestRow, Waveform
from networks.vocoder import (
    DiscriminatorSet,
    DurationPredictor,
    Generator,
    LidClassifier,
    MelSpectrogram,
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
)
from numerics import functional as F
from numerics.checkpoint import load_checkpoint, save_checkpoint
from numerics.layers import Module, frozen
from numerics.optim import Adam
from numerics.tensor import Tensor, no_grad
from services.corpus_service import CorpusService
from services.discretize_service import DiscretizeService
from utils.errors import DataIntegrityError, LookupFailure, TrainingError, VocabularyError
from utils.events import emit

logger = logging.getLogger(__name__)


class VocoderExample(BaseModel):
    """Gold units with durations, conditioning ids and the matching real audio (float, ``hop * frames`` samples)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    units: RunLengthUnits
    speaker: int
    language: str
    audio: np.ndarray


class VocoderBundle(Module):
    """Everything one family's vocoder trains; the unit of checkpointing."""

    def __init__(self, config: VocoderConfig, rng: np.random.Generator, zero_init_lid: bool = False):
        self.generator = Generator(config, rng)
        self.duration = DurationPredictor(config.unit_dim, config.duration_channels, config.duration_kernel, rng)
        self.lid = LidClassifier(
            config.mel.n_mels, config.lid_channels, config.lid_kernel, len(config.languages), rng, zero_init=zero_init_lid,
        )
        self.discriminators = DiscriminatorSet(
            config.mpd_periods, config.msd_scales, config.discriminator_channels, rng,
        )


class VocoderService:
    """Unit-to-waveform vocoder for one family: generation, auxiliary and generator training, resynthesis."""

    def __init__(self, config: VocoderConfig, seed: int = 0, zero_init_lid: bool = False):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.bundle = VocoderBundle(config, self.rng, zero_init_lid=zero_init_lid)
        self.mel = MelSpectrogram(config.mel.model_copy(update={"hop": config.hop}))
        self.training = VocoderTrainingConfig(seed=seed)
        self._optimizers: Dict[str, Adam] = {}
        logger.info(
            f"Vocoder for {config.family} over {config.languages} "
            f"({self.bundle.generator.num_parameters()} generator parameters, language mode {config.language_mode})"
        )

    @property
    def generator(self) -> Generator:
        return self.bundle.generator

    # ===== FORWARD =====

    def mel_spectrogram(self, waveform) -> Tensor:
        if isinstance(waveform, Waveform):
            waveform = waveform.to_float()
        return self.mel(waveform)

    def _language_index(self, lang: str) -> int:
        if lang not in self.config.languages:
            raise LookupFailure(f"Language {lang!r} is not served by the {self.config.family} vocoder {self.config.languages}")
        return self.config.language_index(lang)

    def predict_durations(self, units: Sequence[int]) -> List[int]:
        with no_grad():
            embeddings = self.generator.unit_embed(np.asarray(units, dtype=np.int64))
            return DurationPredictor.to_frames(self.bundle.duration(embeddings).data)

    def generate(self, units: RunLengthUnits, speaker: int, lang: str, use_predicted_durations: bool = False) -> Tensor:
        """Waveform tensor of ``hop * sum(durations)`` samples."""
        if units.id_space != "raw":
            raise VocabularyError("The vocoder consumes family-local (raw) unit ids")
        lang_index = self._language_index(lang)
        if not units.units:
            return Tensor(np.zeros(0))
        if use_predicted_durations or units.durations is None:
            durations = self.predict_durations(units.units)
        else:
            durations = units.durations
        return self.generator(units.units, durations, speaker, lang_index)

    def resynthesize(
        self, units: RunLengthUnits, speaker: int, lang: str, use_predicted_durations: bool = True,
    ) -> Waveform:
        self.bundle.eval()
        with no_grad():
            wave = self.generate(units, speaker, lang, use_predicted_durations=use_predicted_durations)
        return Waveform.from_float(wave.data, self.config.mel.sample_rate)

    def lid_forward(self, waveform) -> np.ndarray:
        """Language distribution for real or generated audio (ordered as ``config.languages``)."""
        with no_grad():
            return self.bundle.lid(self.mel_spectrogram(waveform)).data

    # ===== DATA =====

    def examples_from(
        self, manifest_path: Union[str, Path], rows: Sequence[ManifestRow], units: Sequence[RunLengthUnits],
    ) -> List[VocoderExample]:
        """Pairs each row's target audio with its gold units; audio is trimmed or zero-padded to ``hop * frames``."""
        if len(rows) != len(units):
            raise DataIntegrityError(f"{len(rows)} manifest rows but {len(units)} unit records")
        examples = []
        for index, (row, record) in enumerate(zip(rows, units)):
            if record.durations is None:
                raise DataIntegrityError(f"Units for {row.id or row.tgt_audio} carry no durations")
            if row.speaker >= self.config.num_speakers:
                raise LookupFailure(f"Row {row.id or row.tgt_audio} uses speaker {row.speaker}, vocoder has {self.config.num_speakers}")
            self._language_index(row.tgt_lang)
            audio = CorpusService.load_audio(manifest_path, row.tgt_audio).to_float()
            length = self.config.hop * record.total_frames
            audio = audio[:length] if audio.size >= length else np.pad(audio, (0, length - audio.size))
            examples.append(VocoderExample(
                id=row.id or f"{row.tgt_lang}-{index}", units=record, speaker=row.speaker,
                language=row.tgt_lang, audio=audio,
            ))
        return examples

    def crop(self, example: VocoderExample, max_frames: int, rng: np.random.Generator) -> VocoderExample:
        """Random window of at most ``max_frames`` frames, re-run-length encoded."""
        frames = example.units.expand()
        if len(frames) <= max_frames:
            return example
        start = int(rng.integers(0, len(frames) - max_frames + 1))
        window = DiscretizeService.dedup(
            frames[start:start + max_frames], family=example.units.family, language=example.units.language,
        )
        hop = self.config.hop
        return example.model_copy(update={
            "units": window, "audio": example.audio[start * hop:(start + max_frames) * hop],
        })

    # ===== TRAINING =====

    def make_optimizers(self, training: VocoderTrainingConfig) -> Dict[str, Adam]:
        self.training = training
        self._optimizers = {
            name: Adam(getattr(self.bundle, name).named_parameters(), lr=training.learning_rate)
            for name in ("generator", "duration", "lid", "discriminators")
        }
        return self._optimizers

    def _step(self, component: str, loss: Tensor, ids: Sequence[str]) -> None:
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite {component} loss (batch {list(ids)})")
        loss.backward()
        try:
            self._optimizers[component].step()
        except TrainingError as e:
            raise TrainingError(f"{component}: {e.detail} (batch {list(ids)})")

    def train_auxiliaries(
        self, segments: Sequence[VocoderExample], full: Optional[Sequence[VocoderExample]] = None,
    ) -> AuxiliaryReport:
        """One step each for the discriminators, the duration predictor and the LID classifier."""
        if not self._optimizers:
            self.make_optimizers(self.training)
        full = list(full) if full is not None else list(segments)
        ids = [s.id for s in segments]
        self.bundle.train()
        for optimizer in self._optimizers.values():
            optimizer.zero_grad()

        with no_grad():
            fakes = [self._generate_segment(s) for s in segments]
        d_loss = None
        for segment, fake in zip(segments, fakes):
            real_scores, _ = self.bundle.discriminators(Tensor(segment.audio))
            fake_scores, _ = self.bundle.discriminators(Tensor(fake.data))
            term = discriminator_loss(real_scores, fake_scores)
            d_loss = term if d_loss is None else d_loss + term
        d_loss = d_loss / len(segments)
        self._step("discriminators", d_loss, ids)

        dur_loss = None
        for example in full:
            with no_grad():
                embeddings = self.generator.unit_embed(np.asarray(example.units.units, dtype=np.int64))
            target = np.log(np.asarray(example.units.durations, dtype=np.float64))
            term = F.mse_loss(self.bundle.duration(embeddings), target)
            dur_loss = term if dur_loss is None else dur_loss + term
        dur_loss = dur_loss / len(full)
        self._step("duration", dur_loss, [e.id for e in full])

        lid_logits = F.concat([self.bundle.lid.logits(self.mel(s.audio)) for s in segments], axis=0)
        labels = [self.config.language_index(s.language) for s in segments]
        lid_loss = F.cross_entropy(lid_logits, labels)
        accuracy = float(np.mean(lid_logits.data.argmax(axis=1) == np.asarray(labels)))
        self._step("lid", lid_loss, ids)

        return AuxiliaryReport(
            discriminator=d_loss.item(), duration=dur_loss.item(), lid=lid_loss.item(), lid_accuracy=accuracy,
            step=self._optimizers["generator"].state.step_count,
        )

    def _generate_segment(self, segment: VocoderExample) -> Tensor:
        return self.generator(
            segment.units.units, segment.units.durations, segment.speaker, self.config.language_index(segment.language),
        )

    def generator_losses(
        self, segment: VocoderExample, training: Optional[VocoderTrainingConfig] = None,
    ) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Weighted generator objective for one segment and its unweighted components."""
        training = training or self.training
        weights = training.weights()
        fake = self._generate_segment(segment)
        components: Dict[str, Tensor] = {"mel": F.l1_loss(self.mel(fake), self.mel(segment.audio).detach())}
        if weights["adversarial"] > 0 or weights["feature_matching"] > 0:
            with no_grad():
                _, real_features = self.bundle.discriminators(Tensor(segment.audio))
            fake_scores, fake_features = self.bundle.discriminators(fake)
            components["adversarial"] = generator_adversarial_loss(fake_scores)
            components["feature_matching"] = feature_matching_loss(real_features, fake_features)
        if weights["lid"] > 0:
            logits = self.bundle.lid.logits(self.mel(fake))
            components["lid"] = F.cross_entropy(logits, [self.config.language_index(segment.language)])
        total = None
        for name, value in components.items():
            term = value * weights[name]
            total = term if total is None else total + term
        return total, components

    def train_generator(self, segments: Sequence[VocoderExample]) -> VocoderLosses:
        """Generator step; discriminators are frozen, and so is the LID classifier unless configured otherwise."""
        if not self._optimizers:
            self.make_optimizers(self.training)
        ids = [s.id for s in segments]
        self.bundle.train()
        for optimizer in self._optimizers.values():
            optimizer.zero_grad()
        frozen_modules = [self.bundle.discriminators]
        if not self.training.update_lid_in_generator_step:
            frozen_modules.append(self.bundle.lid)

        sums: Dict[str, float] = {}
        with frozen(*frozen_modules):
            total = None
            for segment in segments:
                loss, components = self.generator_losses(segment)
                total = loss if total is None else total + loss
                for name, value in components.items():
                    sums[name] = sums.get(name, 0.0) + value.item()
            total = total / len(segments)
            self._step("generator", total, ids)
            if self.training.update_lid_in_generator_step and "lid" in sums:
                self._optimizers["lid"].step()

        means = {name: value / len(segments) for name, value in sums.items()}
        return VocoderLosses(
            mel=means["mel"],
            feature_matching=means.get("feature_matching", 0.0),
            adversarial=means.get("adversarial", 0.0),
            lid=means.get("lid", 0.0),
            total=max(0.0, total.item()),
            step=self._optimizers["generator"].state.step_count,
        )

    def validation_loss(self, examples: Sequence[VocoderExample]) -> float:
        """Mean mel L1 of gold-duration resynthesis over full utterances."""
        self.bundle.eval()
        losses = []
        with no_grad():
            for example in examples:
                if not example.units.units:
                    continue
                fake = self._generate_segment(example)
                losses.append(F.l1_loss(self.mel(fake), self.mel(example.audio)).item())
        return float(np.mean(losses)) if losses else 0.0

    def train(
        self,
        examples: Sequence[VocoderExample],
        training: VocoderTrainingConfig,
        valid_examples: Sequence[VocoderExample] = (),
    ) -> VocoderHistory:
        """Alternating auxiliary and generator steps over random crops; keeps the best validation state."""
        history = VocoderHistory()
        examples = [e for e in examples if e.units.units]
        if not examples or training.steps == 0:
            return history
        self.make_optimizers(training)
        rng = np.random.default_rng([training.seed, 2])
        best_state: Optional[Dict[str, np.ndarray]] = None
        order: List[int] = []
        for step in range(1, training.steps + 1):
            if len(order) < training.batch_size:
                order.extend(rng.permutation(len(examples)).tolist())
            picked, order = order[: training.batch_size], order[training.batch_size:]
            full = [examples[i] for i in picked]
            segments = [self.crop(e, training.max_frames, rng) for e in full]

            aux = self.train_auxiliaries(segments, full)
            aux.step = step
            losses = self.train_generator(segments)
            losses.step = step
            history.auxiliaries.append(aux)
            history.generator.append(losses)
            emit(
                "train_step", stage="vocoder", step=step, mel=losses.mel, total=losses.total,
                discriminator=aux.discriminator, duration=aux.duration, lid=aux.lid, lid_accuracy=aux.lid_accuracy,
            )

            if valid_examples and (step % training.eval_interval == 0 or step == training.steps):
                valid = self.validation_loss(valid_examples)
                history.valid.append(valid)
                emit("validation", stage="vocoder", step=step, mel=valid)
                if history.best_valid_loss is None or valid < history.best_valid_loss:
                    history.best_valid_loss = valid
                    history.best_step = step
                    best_state = self.bundle.state_dict()

        if best_state is not None:
            self.bundle.load_state_dict(best_state)
            logger.info(f"Restored best vocoder parameters from step {history.best_step} (valid mel L1 {history.best_valid_loss:.4f})")
        return history

    # ===== DIAGNOSTICS =====

    def lid_accuracy(self, examples: Sequence[VocoderExample], generated: bool = True) -> float:
        """Share of utterances whose LID argmax is their language; scores resynthesis or real audio."""
        self.bundle.eval()
        hits = []
        for example in examples:
            if generated:
                audio = self.resynthesize(example.units, example.speaker, example.language, use_predicted_durations=False)
            else:
                audio = example.audio
            hits.append(int(np.argmax(self.lid_forward(audio))) == self.config.language_index(example.language))
        return float(np.mean(hits)) if hits else 0.0

    # ===== PERSISTENCE =====

    def save(self, path: Union[str, Path]) -> Path:
        metadata = {
            "kind": "vocoder",
            "family": self.config.family,
            "languages": self.config.languages,
            "num_speakers": self.config.num_speakers,
            "upsample_strides": self.config.upsample_strides,
            "config": self.config.model_dump(),
            "seed": self.seed,
        }
        return save_checkpoint(path, self.bundle.state_dict(), metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VocoderService":
        arrays, metadata = load_checkpoint(path)
        if metadata.get("kind") != "vocoder":
            raise DataIntegrityError(f"{path} is not a vocoder checkpoint")
        service = cls(VocoderConfig(**metadata["config"]), metadata["seed"])
        service.bundle.load_state_dict(arrays)
        return service
