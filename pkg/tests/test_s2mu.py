from unittest.mock import patch

import numpy as np
import pytest

from models.s2mu import DecodeOptions, S2MUConfig, S2MUTrainingConfig
from models.units import RunLengthUnits
from models.vocab import BOS, EOS
from numerics import functional as F
from numerics.gradcheck import finite_difference_check
from numerics.tensor import Tensor, no_grad
from services.s2mu_service import S2MUService, TranslationExample
from services.vocab_service import VocabService
from utils.errors import DataIntegrityError, LengthError, VocabularyError


def tiny_config(**overrides) -> S2MUConfig:
    values = dict(
        input_dim=8, conv_layers=1, conv_channels=8, conv_strides=[2], model_dim=8, ffn_dim=16, heads=2,
        encoder_layers=1, decoder_layers=1, decoder_ffn_dim=16, dropout=0.0, label_smoothing=0.0,
    )
    values.update(overrides)
    return S2MUConfig(**values)


@pytest.fixture
def vocab(world):
    """gem block of 4 units, rom block of 5"""
    return VocabService.for_world(world, {"gem": 4, "rom": 5})


@pytest.fixture
def examples(rng):
    """Three short examples over two families"""
    def example(name, lang, family, units, frames):
        return TranslationExample(
            id=name, features=rng.normal(size=(frames, 8)),
            units=RunLengthUnits(units=units, family=family, language=lang), language=lang,
        )

    return [
        example("a", "gem0", "gem", [0, 2, 1], 12),
        example("b", "rom1", "rom", [4, 3], 9),
        example("c", "gem1", "gem", [3], 6),
    ]


class TestConfig:
    """Architecture validation"""

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="divisible by heads"):
            tiny_config(model_dim=9)

    def test_bilingual_needs_language(self):
        with pytest.raises(ValueError, match="exactly one target language"):
            tiny_config(mode="bilingual")

    def test_presets(self):
        assert S2MUConfig.preset("textless").model_dim < S2MUConfig.preset("desk").model_dim
        with pytest.raises(ValueError, match="unknown S2MU preset"):
            S2MUConfig.preset("huge")


class TestForward:
    """Encoder and length adaptor shapes"""

    def test_downsampling(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab)
        states = service.encode(rng.normal(size=(13, 8)))
        assert states.shape == (7, 8)
        assert service.adapt_length(states).shape == (4, 8)

    def test_too_few_frames(self, vocab):
        with pytest.raises(LengthError, match="at least 2 frames"):
            S2MUService(tiny_config(), vocab).encode(np.zeros((1, 8)))

    def test_batch_layout(self, vocab, examples):
        batch = S2MUService(tiny_config(), vocab).make_batch(examples)
        assert batch.features.shape == (3, 12, 8)
        assert batch.targets[0].tolist() == [3, 7, 9, 8, EOS]
        assert batch.target_lengths == [5, 4, 3]
        assert batch.targets[2, 3:].tolist() == [0, 0]


class TestMaskedLoss:
    """Cross-entropy over the target language's units"""

    def test_disallowed_logits_get_no_gradient(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab)
        batch = service.make_batch(examples[:1])
        logits = [Tensor(np.random.default_rng(1).normal(size=(5, vocab.size)), requires_grad=True)]
        loss, report = service.loss_from_logits(logits, batch)
        loss.backward()
        allowed = service.vocab_service.mask_for("gem0").allowed
        assert np.all(logits[0].grad[:, ~allowed] == 0.0)
        assert np.any(logits[0].grad[1:, allowed] != 0.0)
        assert report.tokens == 4

    def test_full_normalizer_still_scores_allowed_ids(self, vocab, examples):
        service = S2MUService(tiny_config(normalizer="full"), vocab)
        batch = service.make_batch(examples[:1])
        logits = [Tensor(np.zeros((5, vocab.size)))]
        report = service.masked_loss(logits, batch)
        assert report.loss == pytest.approx(np.log(vocab.size))

    def test_uniform_restricted_loss(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab)
        batch = service.make_batch(examples[:1])
        report = service.masked_loss([Tensor(np.zeros((5, vocab.size)))], batch)
        # four gem units plus eos
        assert report.loss == pytest.approx(np.log(5))

    def test_gold_outside_custom_mask(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab)
        batch = service.make_batch(examples[:1])
        narrow = np.zeros(vocab.size, dtype=bool)
        narrow[EOS] = True
        with pytest.raises(DataIntegrityError, match="outside the gem0 mask"):
            service.masked_loss([Tensor(np.zeros((5, vocab.size)))], batch, masks={"gem0": narrow})

    def test_predicted_distribution_mass(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab)
        distribution = service.predicted_distribution(Tensor(rng.normal(size=(3, vocab.size))), "rom0")
        assert np.allclose(distribution.allowed_mass(), 1.0)

    def test_full_mask_without_smoothing_is_cross_entropy(self, vocab, examples, rng):
        service = S2MUService(tiny_config(), vocab)
        batch = service.make_batch(examples[:1])
        raw = rng.normal(size=(5, vocab.size))
        report = service.masked_loss([Tensor(raw)], batch, masks={"gem0": np.ones(vocab.size, dtype=bool)})
        expected = F.cross_entropy(Tensor(raw[1:]), batch.example_target(0)[1:]).item()
        assert report.loss == pytest.approx(expected, abs=1e-12)

    def test_smoothed_loss_by_hand(self, vocab, rng):
        service = S2MUService(tiny_config(label_smoothing=0.1), vocab)
        example = TranslationExample(
            id="d", features=rng.normal(size=(6, 8)),
            units=RunLengthUnits(units=[0, 2], family="gem", language="gem0"), language="gem0",
        )
        batch = service.make_batch([example])
        assert batch.example_target(0).tolist() == [3, 7, 9, EOS]
        raw = rng.normal(size=(4, vocab.size))
        raw[:, [EOS, 7, 8, 9, 10]] = 0.0
        raw[[1, 2, 3], [7, 9, EOS]] = np.log(4.0)
        # gold gets p = 1/2, the other four allowed ids 1/8 each;
        # targets are 0.92 on gold and 0.02 elsewhere
        report = service.masked_loss([Tensor(raw)], batch)
        assert report.loss == pytest.approx(1.16 * np.log(2.0), abs=1e-12)
        assert report.tokens == 3

    def test_bilingual_model_scores_like_masked_multilingual(self, vocab, examples, rng):
        multilingual = S2MUService(tiny_config(), vocab)
        bilingual = S2MUService(tiny_config(mode="bilingual", bilingual_language="gem0"), vocab)
        raw = rng.normal(size=(5, vocab.size))
        full = multilingual.masked_loss([Tensor(raw)], multilingual.make_batch(examples[:1]))
        kept = [0, 1, 2, vocab.tag_id("gem0")] + list(range(*vocab.family_block("gem")))
        reduced = bilingual.masked_loss([Tensor(raw[:, kept])], bilingual.make_batch(examples[:1]))
        assert reduced.loss == pytest.approx(full.loss, abs=1e-12)
        assert reduced.tokens == full.tokens

    @pytest.mark.slow
    def test_model_gradients_match_finite_differences(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab, seed=2)
        batch = service.make_batch(examples[:1])
        decoder = service.model.decoder
        params = [decoder.output.weight, decoder.output.bias, decoder.embed.weight, service.model.encoder.norm.gain]
        error = finite_difference_check(lambda: service.loss_from_logits(service.batch_logits(batch), batch)[0], params)
        assert error < 1e-4


class TestDecode:
    """Masked and unmasked decoding"""

    @pytest.mark.parametrize("strategy", ["greedy", "beam"])
    def test_masked_decode_stays_in_block(self, vocab, rng, strategy):
        service = S2MUService(tiny_config(), vocab, seed=3)
        opts = DecodeOptions(strategy=strategy, beam_width=3, max_len=6)
        result = service.masked_decode(rng.normal(size=(10, 8)), "rom0", opts)
        start, stop = vocab.family_block("rom")
        assert all(start <= t < stop for t in result.tokens)
        assert len(result.tokens) <= 6
        if result.truncated:
            assert len(result.tokens) == 6
        assert np.allclose(result.step_mass, 1.0)
        raw = service.to_raw(result)
        assert all(0 <= u < 5 for u in raw.units)

    def test_unmasked_decode_spans_all_units(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab, seed=3)
        result = service.unmasked_decode(rng.normal(size=(10, 8)), "gem0", DecodeOptions(max_len=5))
        assert all(vocab.is_unit(t) for t in result.tokens)

    def test_unknown_language(self, vocab, rng):
        with pytest.raises(VocabularyError, match="Unknown target language"):
            S2MUService(tiny_config(), vocab).masked_decode(rng.normal(size=(10, 8)), "xx")

    def test_beam_width_one_is_greedy(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab, seed=4)
        allowed = service.vocab_service.mask_for("rom1").allowed
        prefix = [BOS, vocab.tag_id("rom1")]
        with no_grad():
            for _ in range(5):
                memory = service.model.memory(rng.normal(size=(10, 8)))
                greedy = service._greedy(prefix, memory, allowed, 6)
                beam = service._beam(prefix, memory, allowed, DecodeOptions(strategy="beam", beam_width=1, max_len=6))
                assert beam[0] == greedy[0]
                assert beam[1] == pytest.approx(greedy[1])
                assert beam[2] == greedy[2]

    def test_beam_ties_prefer_lower_token(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab)

        def step_log_probs(prefix, memory, allowed):
            # [7] continues with 9 and [8] continues with 7 at the same total score
            out = np.full(vocab.size, -50.0)
            out[{7: [9], 8: [7]}.get(prefix[-1], [7, 8])] = -1.0
            return out

        opts = DecodeOptions(strategy="beam", beam_width=2, max_len=2)
        with patch.object(service, "_step_log_probs", side_effect=step_log_probs):
            result = service.masked_decode(rng.normal(size=(10, 8)), "gem0", opts)
        assert result.tokens == [8, 7]
        assert result.truncated

    @pytest.mark.slow
    def test_masked_decoding_never_leaks(self, vocab, rng):
        service = S2MUService(tiny_config(), vocab, seed=6)
        # push the model towards rom units and away from eos
        service.model.decoder.output.bias.data[list(range(*vocab.family_block("rom")))] += 10.0
        service.model.decoder.output.bias.data[EOS] -= 10.0
        opts = DecodeOptions(max_len=4)
        languages = ["gem0", "gem1", "rom0", "rom1"]
        masked = [
            service.leakage_rate(service.masked_decode(rng.normal(size=(8, 8)), lang, opts).tokens, lang)
            for lang in languages * 250
        ]
        assert len(masked) == 1000 and max(masked) == 0.0
        unmasked = [
            service.leakage_rate(service.unmasked_decode(rng.normal(size=(8, 8)), lang, opts).tokens, lang)
            for lang in ["gem0", "gem1"] * 10
        ]
        assert np.mean(unmasked) > 0.0


class TestBilingual:
    """Single-language models"""

    def test_restricted_vocabulary(self, vocab, examples):
        service = S2MUService(tiny_config(mode="bilingual", bilingual_language="gem0"), vocab)
        assert service.languages == ["gem0"]
        assert service.vocab.size == 3 + 1 + 4
        with pytest.raises(VocabularyError, match="outside this model's vocabulary"):
            service.make_batch(examples[1:2])


class TestTraining:
    """Optimization and persistence"""

    @pytest.mark.slow
    def test_loss_decreases_and_best_state_kept(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab)
        training = S2MUTrainingConfig(steps=40, batch_size=3, learning_rate=1e-2, warmup_steps=5, eval_interval=10)
        history = service.train(examples, training, valid_examples=examples)
        first = np.mean([r.loss for r in history.train[:3]])
        last = np.mean([r.loss for r in history.train[-3:]])
        assert last < first
        assert history.best_step in {10, 20, 30, 40}
        assert service.evaluate_loss(examples).loss == pytest.approx(history.best_valid_loss)

    def test_no_steps_is_a_no_op(self, vocab, examples):
        history = S2MUService(tiny_config(), vocab).train(examples, S2MUTrainingConfig(steps=0))
        assert history.train == [] and history.best_step is None

    @pytest.mark.slow
    def test_memorizes_single_pair(self, vocab, examples):
        service = S2MUService(tiny_config(), vocab, seed=1)
        training = S2MUTrainingConfig(steps=300, batch_size=1, learning_rate=1e-2, warmup_steps=5)
        service.train(examples[:1], training)
        result = service.masked_decode(examples[0].features, "gem0", DecodeOptions(max_len=8))
        assert result.tokens == [7, 9, 8]
        assert service.to_raw(result).units == [0, 2, 1]

    def test_same_seed_trains_identically(self, vocab, examples):
        training = S2MUTrainingConfig(steps=4, batch_size=2, learning_rate=1e-2, warmup_steps=2, seed=3)
        states = []
        for _ in range(2):
            service = S2MUService(tiny_config(), vocab, seed=9)
            history = service.train(examples, training)
            states.append((service.model.state_dict(), [r.loss for r in history.train]))
        (first, first_losses), (second, second_losses) = states
        assert first_losses == second_losses
        assert first.keys() == second.keys()
        assert all(np.array_equal(first[name], second[name]) for name in first)

    def test_checkpoint_restores_decoding(self, vocab, rng, tmp_path):
        service = S2MUService(tiny_config(), vocab, seed=5)
        features = rng.normal(size=(10, 8))
        path = service.save(tmp_path / "model.pgs1")
        restored = S2MUService.load(path, expected_vocab_hash=vocab.manifest_hash())
        opts = DecodeOptions(max_len=5)
        assert restored.masked_decode(features, "gem1", opts).tokens == service.masked_decode(features, "gem1", opts).tokens

    def test_vocabulary_hash_checked(self, vocab, tmp_path):
        path = S2MUService(tiny_config(), vocab).save(tmp_path / "model.pgs1")
        with pytest.raises(DataIntegrityError, match="trained against vocabulary"):
            S2MUService.load(path, expected_vocab_hash="0" * 64)
