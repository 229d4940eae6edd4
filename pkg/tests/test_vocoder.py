import numpy as np
import pytest

from models.units import RunLengthUnits
from models.vocoder import MelConfig, VocoderConfig, VocoderTrainingConfig
from networks.vocoder import DurationPredictor, discriminator_loss
from numerics import functional as F
from numerics.gradcheck import finite_difference_check
from numerics.optim import Adam
from numerics.tensor import Tensor
from services.corpus_service import CorpusService
from services.discretize_service import DiscretizeService
from services.vocoder_service import VocoderExample, VocoderService
from utils.errors import DataIntegrityError, LookupFailure, VocabularyError


def tiny_vocoder_config(**overrides) -> VocoderConfig:
    values = dict(
        family="gem", languages=["gem0", "gem1"], num_units=4, num_speakers=2,
        unit_dim=8, speaker_dim=4, language_dim=4, hop=8, upsample_strides=[4, 2], upsample_channels=8,
        residual_blocks=1, duration_channels=8, lid_channels=8, discriminator_channels=4,
        mel=MelConfig(sample_rate=8000, n_fft=64, hop=8, n_mels=8),
    )
    values.update(overrides)
    return VocoderConfig(**values)


def make_example(name, units, durations, language="gem0", speaker=0, hop=8):
    frames = sum(durations)
    t = np.arange(hop * frames)
    return VocoderExample(
        id=name, units=RunLengthUnits(units=units, durations=durations, family="gem", language=language),
        speaker=speaker, language=language, audio=0.3 * np.sin(2 * np.pi * (0.05 + 0.05 * units[0]) * t),
    )


@pytest.fixture
def vocoder():
    """Tiny two-language vocoder"""
    return VocoderService(tiny_vocoder_config(), seed=0)


@pytest.fixture
def segments():
    """Two short training segments, one per language"""
    return [
        make_example("a", [0, 2, 1], [3, 4, 3], language="gem0"),
        make_example("b", [3, 1], [5, 5], language="gem1", speaker=1),
    ]


def _snapshot(module):
    return {name: value.copy() for name, value in module.state_dict().items()}


def _changed(before, module):
    after = module.state_dict()
    return any(not np.array_equal(before[name], after[name]) for name in before)


class TestConfig:
    """Vocoder configuration checks"""

    def test_upsampling_must_match_hop(self):
        with pytest.raises(ValueError, match="must equal the feature hop"):
            tiny_vocoder_config(upsample_strides=[4, 4])

    def test_presets(self):
        small = VocoderConfig.preset("small", family="gem", languages=["gem0"], num_units=4)
        large = VocoderConfig.preset("large", family="gem", languages=["gem0"], num_units=4)
        assert small.unit_dim < large.unit_dim
        assert small.monolingual
        with pytest.raises(ValueError, match="unknown vocoder size"):
            VocoderConfig.preset("tiny", family="gem", languages=["gem0"], num_units=4)


class TestGenerator:
    """Waveform generation"""

    @pytest.mark.parametrize("mode", ["prepend", "concat", "none"])
    def test_output_length_and_range(self, mode):
        service = VocoderService(tiny_vocoder_config(language_mode=mode))
        units = RunLengthUnits(units=[0, 3, 1], durations=[2, 1, 4], family="gem")
        wave = service.generate(units, speaker=1, lang="gem1")
        assert wave.shape == (8 * 7,)
        assert np.all(np.abs(wave.data) <= 1.0)

    def test_language_changes_output(self, vocoder):
        units = RunLengthUnits(units=[0, 3], durations=[2, 2], family="gem")
        first = vocoder.generate(units, 0, "gem0").data
        second = vocoder.generate(units, 0, "gem1").data
        assert not np.allclose(first, second)

    def test_predicted_durations_used_when_missing(self, vocoder):
        units = RunLengthUnits(units=[0, 3, 2], family="gem")
        predicted = vocoder.predict_durations(units.units)
        assert len(predicted) == 3 and min(predicted) >= 1
        assert vocoder.generate(units, 0, "gem0").shape == (8 * sum(predicted),)

    def test_empty_units(self, vocoder):
        assert vocoder.generate(RunLengthUnits(units=[], durations=[], family="gem"), 0, "gem0").shape == (0,)

    def test_bad_inputs(self, vocoder):
        units = RunLengthUnits(units=[0], durations=[1], family="gem")
        with pytest.raises(LookupFailure, match="not served by the gem vocoder"):
            vocoder.generate(units, 0, "rom0")
        with pytest.raises(LookupFailure, match="Unknown speaker id 2"):
            vocoder.generate(units, 2, "gem0")
        extended = RunLengthUnits(units=[7], durations=[1], family="gem", id_space="extended")
        with pytest.raises(VocabularyError, match="raw"):
            vocoder.generate(extended, 0, "gem0")

    def test_resynthesize_returns_pcm16(self, vocoder):
        units = RunLengthUnits(units=[1, 2], durations=[2, 3], family="gem")
        wave = vocoder.resynthesize(units, 0, "gem0", use_predicted_durations=False)
        assert wave.samples.dtype == np.int16
        assert wave.samples.size == 40
        assert wave.sample_rate == 8000


class TestDurationPredictor:
    """Log-duration rounding"""

    def test_to_frames_floors_at_one(self):
        assert DurationPredictor.to_frames(np.log([0.2, 1.0, 2.6, 7.0])) == [1, 1, 3, 7]

    def test_regresses_constant_duration(self, rng):
        predictor = DurationPredictor(8, 8, 3, rng)
        embeddings = Tensor(rng.normal(size=(5, 8)))
        target = np.full(5, np.log(3.0))
        optimizer = Adam(predictor.named_parameters(), lr=1e-2)
        for _ in range(400):
            optimizer.zero_grad()
            F.mse_loss(predictor(embeddings), target).backward()
            optimizer.step()
        prediction = predictor(embeddings).data
        assert np.mean((prediction - target) ** 2) < 1e-2
        assert DurationPredictor.to_frames(prediction) == [3] * 5


class TestAuxiliaries:
    """Mel front end, LID classifier and discriminators"""

    def test_mel_shape_and_gradient(self, vocoder, rng):
        wave = Tensor(rng.normal(scale=0.1, size=80), requires_grad=True)
        mel = vocoder.mel_spectrogram(wave)
        assert mel.shape == (80 // 8 + 1, 8)
        mel.sum().backward()
        assert wave.grad is not None and np.any(wave.grad != 0.0)

    def test_lid_distribution(self, rng):
        service = VocoderService(tiny_vocoder_config(), zero_init_lid=True)
        distribution = service.lid_forward(rng.normal(scale=0.1, size=160))
        assert distribution.shape == (2,)
        assert np.allclose(distribution, [0.5, 0.5])

    def test_discriminator_scores(self, vocoder, rng):
        scores, features = vocoder.bundle.discriminators(Tensor(rng.normal(scale=0.1, size=128)))
        assert len(scores) == len(features) == 4
        assert discriminator_loss(scores, scores).item() >= 0.0


class TestTrainingSteps:
    """Which modules each step updates"""

    def test_auxiliary_step_leaves_generator_alone(self, vocoder, segments):
        generator, discriminators = _snapshot(vocoder.generator), _snapshot(vocoder.bundle.discriminators)
        lid, duration = _snapshot(vocoder.bundle.lid), _snapshot(vocoder.bundle.duration)
        report = vocoder.train_auxiliaries(segments)
        assert not _changed(generator, vocoder.generator)
        assert _changed(discriminators, vocoder.bundle.discriminators)
        assert _changed(lid, vocoder.bundle.lid)
        assert _changed(duration, vocoder.bundle.duration)
        assert 0.0 <= report.lid_accuracy <= 1.0

    def test_generator_step_freezes_critics(self, vocoder, segments):
        discriminators, lid = _snapshot(vocoder.bundle.discriminators), _snapshot(vocoder.bundle.lid)
        generator = _snapshot(vocoder.generator)
        losses = vocoder.train_generator(segments)
        assert _changed(generator, vocoder.generator)
        assert not _changed(discriminators, vocoder.bundle.discriminators)
        assert not _changed(lid, vocoder.bundle.lid)
        assert losses.lid > 0.0 and losses.adversarial > 0.0

    def test_lid_can_learn_from_generated_audio(self, segments):
        service = VocoderService(tiny_vocoder_config(), seed=0)
        service.make_optimizers(VocoderTrainingConfig(update_lid_in_generator_step=True))
        lid = _snapshot(service.bundle.lid)
        service.train_generator(segments)
        assert _changed(lid, service.bundle.lid)

    def test_zero_weights_skip_terms(self, vocoder, segments):
        training = VocoderTrainingConfig(lambda_adv=0.0, lambda_fm=0.0, lambda_lid=0.0)
        total, components = vocoder.generator_losses(segments[0], training)
        assert set(components) == {"mel"}
        assert total.item() == pytest.approx(45.0 * components["mel"].item())

    @pytest.mark.parametrize("lambda_lid", [1.0, 0.0])
    def test_lid_loss_reaches_language_embedding(self, segments, lambda_lid):
        service = VocoderService(tiny_vocoder_config(), seed=0)
        training = VocoderTrainingConfig(lambda_mel=0.0, lambda_adv=0.0, lambda_fm=0.0, lambda_lid=lambda_lid)
        total, components = service.generator_losses(segments[1], training)
        total.backward()
        grad = service.generator.language_embed.weight.grad
        if lambda_lid > 0:
            assert "lid" in components
            assert np.any(grad[service.config.language_index("gem1")] != 0.0)
        else:
            assert "lid" not in components
            assert grad is None or np.all(grad == 0.0)

    @pytest.mark.slow
    def test_generator_gradients_match_finite_differences(self, segments):
        service = VocoderService(tiny_vocoder_config(), seed=2)
        generator = service.generator
        params = [generator.conv_post.bias, generator.speaker_embed.weight, generator.language_embed.weight]
        error = finite_difference_check(lambda: service.generator_losses(segments[0])[1]["mel"], params)
        assert error < 1e-4


class TestData:
    """Examples and crops"""

    def test_crop_keeps_audio_aligned(self, vocoder, segments, rng):
        cropped = vocoder.crop(segments[1], 4, rng)
        assert cropped.units.total_frames == 4
        assert cropped.audio.size == 8 * 4
        assert vocoder.crop(segments[0], 48, rng) is segments[0]

    def test_examples_from_manifest(self, world, corpus_dir):
        service = VocoderService(tiny_vocoder_config())
        manifest = corpus_dir / "valid.jsonl"
        rows = [row for row in CorpusService.load_manifest(manifest) if row.tgt_lang == "gem0"]
        units = [DiscretizeService.dedup([i % 2 for i in range(5)]) for _ in rows]
        examples = service.examples_from(manifest, rows, units)
        assert [e.audio.size for e in examples] == [8 * 5] * len(rows)
        with pytest.raises(DataIntegrityError, match="no durations"):
            service.examples_from(manifest, rows[:1], [RunLengthUnits(units=[1], family="gem")])

    def test_unknown_speaker_rows(self, corpus_dir):
        service = VocoderService(tiny_vocoder_config(num_speakers=1))
        manifest = corpus_dir / "test_ood.jsonl"
        rows = [row for row in CorpusService.load_manifest(manifest) if row.tgt_lang == "gem0"][:1]
        with pytest.raises(LookupFailure, match="uses speaker"):
            service.examples_from(manifest, rows, [DiscretizeService.dedup([0, 1])])


class TestTrain:
    """Full training loop"""

    @pytest.mark.slow
    def test_history_and_events(self, segments, quiet_events):
        service = VocoderService(tiny_vocoder_config(), seed=1)
        training = VocoderTrainingConfig(steps=4, batch_size=2, max_frames=6, eval_interval=2, learning_rate=1e-3)
        history = service.train(segments, training, valid_examples=segments)
        assert len(history.generator) == len(history.auxiliaries) == 4
        assert len(history.valid) == 2
        assert history.best_valid_loss == min(history.valid)
        assert service.validation_loss(segments) == pytest.approx(history.best_valid_loss)
        assert '"event":"train_step"' in quiet_events.getvalue()

    def test_checkpoint_restores_generation(self, vocoder, tmp_path):
        units = RunLengthUnits(units=[0, 1], durations=[2, 2], family="gem")
        restored = VocoderService.load(vocoder.save(tmp_path / "gem.pgs1"))
        assert restored.config == vocoder.config
        assert np.allclose(restored.generate(units, 1, "gem1").data, vocoder.generate(units, 1, "gem1").data)

    def test_lid_accuracy_bounds(self, vocoder, segments):
        accuracy = vocoder.lid_accuracy(segments, generated=False)
        assert accuracy in (0.0, 0.5, 1.0)
