"""Multilingual unit vocoder: generator, duration predictor, LID classifier, discriminators and mel front end.

Signals are channels-first ``[C x T]``; waveforms are 1-D tensors of samples.
"""
from typing import List, Optional, Sequence, Tuple

import librosa
import numpy as np
from scipy.signal import get_window

from models.vocoder import MelConfig, VocoderConfig
from numerics import functional as F
from numerics.layers import Conv1d, ConvTranspose1d, Embedding, LayerNorm, Linear, Module
from numerics.tensor import Tensor, concat
from utils.errors import LookupFailure

LEAKY_SLOPE = 0.1
STFT_EPS = 1e-9


# ===== MEL FRONT END =====

class MelSpectrogram:
    """Log-mel spectrogram as a fixed (non-trainable) convolution; differentiable w.r.t. the waveform."""

    def __init__(self, config: MelConfig):
        self.config = config
        n_fft = config.n_fft
        window = get_window("hann", n_fft, fftbins=True)
        freqs = np.arange(n_fft // 2 + 1)[:, None]
        taps = np.arange(n_fft)[None, :]
        angle = 2.0 * np.pi * freqs * taps / n_fft
        self.real_kernel = (np.cos(angle) * window)[:, None, :]
        self.imag_kernel = (-np.sin(angle) * window)[:, None, :]
        self.mel_basis = librosa.filters.mel(
            sr=config.sample_rate, n_fft=n_fft, n_mels=config.n_mels, fmin=config.fmin, fmax=config.fmax,
        ).astype(np.float64)

    def __call__(self, waveform) -> Tensor:
        """``waveform[S]`` -> ``[S // hop + 1 x n_mels]``."""
        x = waveform if isinstance(waveform, Tensor) else Tensor(waveform)
        x = x.reshape(1, -1)
        pad = self.config.n_fft // 2
        real = F.conv1d(x, self.real_kernel, stride=self.config.hop, padding=pad)
        imag = F.conv1d(x, self.imag_kernel, stride=self.config.hop, padding=pad)
        magnitude = (real * real + imag * imag + STFT_EPS).sqrt()
        mel = F.matmul(self.mel_basis, magnitude).clamp_min(self.config.floor)
        return mel.log().T


# ===== GENERATOR =====

class ResidualBlock(Module):
    def __init__(self, channels: int, kernel: int, dilations: Sequence[int], rng: np.random.Generator):
        self.convs = [Conv1d(channels, channels, kernel, rng, dilation=d) for d in dilations]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = x + conv(x.leaky_relu(LEAKY_SLOPE))
        return x


class Generator(Module):
    def __init__(self, config: VocoderConfig, rng: np.random.Generator):
        self.config = config
        self.unit_embed = Embedding(config.num_units, config.unit_dim, rng)
        self.speaker_embed = Embedding(config.num_speakers, config.speaker_dim, rng)
        self.language_embed = Embedding(len(config.languages), config.language_dim, rng)
        self.language_project = Linear(config.language_dim, config.unit_dim, rng) if config.language_mode == "prepend" else None
        width = config.unit_dim + config.speaker_dim
        if config.language_mode == "concat":
            width += config.language_dim

        channels = config.upsample_channels
        self.conv_pre = Conv1d(width, channels, 5, rng)
        self.upsamplers: List[ConvTranspose1d] = []
        self.blocks: List[ResidualBlock] = []
        stages = len(config.upsample_strides)
        per_stage = [config.residual_blocks // stages] * stages
        if stages:
            per_stage[-1] += config.residual_blocks % stages
        self.blocks_per_stage = per_stage
        for stride, count in zip(config.upsample_strides, per_stage):
            self.upsamplers.append(ConvTranspose1d(channels, channels // 2, stride, rng))
            channels //= 2
            self.blocks.extend(
                ResidualBlock(channels, config.residual_kernel, config.residual_dilations, rng) for _ in range(count)
            )
        self.conv_post = Conv1d(channels, 1, 5, rng)

    def frame_inputs(self, units: Sequence[int], durations: Sequence[int], speaker: int, lang_index: int) -> Tensor:
        """Per-frame conditioning ``[frames(+1) x width]``: repeated unit embeddings, language, speaker."""
        config = self.config
        if not 0 <= speaker < config.num_speakers:
            raise LookupFailure(f"Unknown speaker id {speaker} (vocoder has {config.num_speakers})")
        if not 0 <= lang_index < len(config.languages):
            raise LookupFailure(f"Unknown language index {lang_index} (vocoder covers {config.languages})")
        frame_units = np.repeat(np.asarray(units, dtype=np.int64), np.asarray(durations, dtype=np.int64))
        frames = self.unit_embed(frame_units)
        language = self.language_embed([lang_index])
        if config.language_mode == "prepend":
            frames = concat([self.language_project(language), frames], axis=0)
        elif config.language_mode == "concat":
            frames = concat([frames, self.language_embed([lang_index] * frames.shape[0])], axis=1)
        speaker_rows = self.speaker_embed([speaker] * frames.shape[0])
        return concat([frames, speaker_rows], axis=1)

    def __call__(self, units: Sequence[int], durations: Sequence[int], speaker: int, lang_index: int) -> Tensor:
        """Waveform of exactly ``hop * sum(durations)`` samples in [-1, 1]."""
        x = self.conv_pre(self.frame_inputs(units, durations, speaker, lang_index).T)
        block = 0
        for upsampler, count in zip(self.upsamplers, self.blocks_per_stage):
            x = upsampler(x.leaky_relu(LEAKY_SLOPE))
            for _ in range(count):
                x = self.blocks[block](x)
                block += 1
        wave = self.conv_post(x.leaky_relu(LEAKY_SLOPE)).tanh().reshape(-1)
        if self.config.language_mode == "prepend":
            wave = wave[self.config.hop:]
        return wave


# ===== DURATION PREDICTOR =====

class DurationPredictor(Module):
    """Two conv -> ReLU -> LayerNorm stages and a projection to log-durations, one per unit."""

    def __init__(self, in_dim: int, channels: int, kernel: int, rng: np.random.Generator):
        self.conv1 = Conv1d(in_dim, channels, kernel, rng)
        self.norm1 = LayerNorm(channels)
        self.conv2 = Conv1d(channels, channels, kernel, rng)
        self.norm2 = LayerNorm(channels)
        self.project = Linear(channels, 1, rng)

    def __call__(self, unit_embeddings: Tensor) -> Tensor:
        h = self.norm1(self.conv1(unit_embeddings.T).relu().T)
        h = self.norm2(self.conv2(h.T).relu().T)
        return self.project(h).reshape(-1)

    @staticmethod
    def to_frames(log_durations: np.ndarray) -> List[int]:
        return [max(1, int(round(float(np.exp(d))))) for d in np.asarray(log_durations).reshape(-1)]


# ===== LANGUAGE IDENTIFICATION =====

class ConvLayer(Module):
    """conv -> ReLU -> LayerNorm over channels."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator):
        self.conv = Conv1d(in_channels, out_channels, kernel, rng)
        self.norm = LayerNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x).relu().T).T


class LidClassifier(Module):
    def __init__(self, n_mels: int, channels: int, kernel: int, num_languages: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.layer1 = ConvLayer(n_mels, channels, kernel, rng)
        self.layer2 = ConvLayer(channels, channels, kernel, rng)
        self.project = Linear(channels, num_languages, rng, zero_init=zero_init)

    def logits(self, mel: Tensor) -> Tensor:
        """``mel[frames x n_mels]`` -> ``[1 x L]`` language logits."""
        pooled = self.layer2(self.layer1(mel.T)).mean(axis=1).reshape(1, -1)
        return self.project(pooled)

    def __call__(self, mel: Tensor) -> Tensor:
        return F.softmax(self.logits(mel), axis=-1).reshape(-1)


# ===== DISCRIMINATORS =====

FeatureMaps = List[Tensor]


class PeriodDiscriminator(Module):
    """Folds the waveform into ``period`` interleaved columns and scores each with shared 1-D convs."""

    def __init__(self, period: int, channels: int, rng: np.random.Generator):
        self.period = period
        self.convs = [
            Conv1d(1, channels, 5, rng, stride=3, padding=2),
            Conv1d(channels, 2 * channels, 5, rng, stride=3, padding=2),
        ]
        self.conv_post = Conv1d(2 * channels, 1, 3, rng, padding=1)

    def __call__(self, wave: Tensor) -> Tuple[Tensor, FeatureMaps]:
        length = wave.shape[0]
        remainder = (-length) % self.period
        if remainder:
            wave = concat([wave, Tensor(np.zeros(remainder))], axis=0)
        columns = wave.reshape(-1, self.period).T
        per_layer: List[List[Tensor]] = [[] for _ in range(len(self.convs))]
        scores = []
        for column in range(self.period):
            x = columns[column: column + 1]
            for index, conv in enumerate(self.convs):
                x = conv(x).leaky_relu(LEAKY_SLOPE)
                per_layer[index].append(x)
            scores.append(self.conv_post(x))
        features = [concat(maps, axis=1) for maps in per_layer]
        return concat(scores, axis=1), features


class ScaleDiscriminator(Module):
    def __init__(self, scale: int, channels: int, rng: np.random.Generator):
        self.scale = scale
        self.convs = [
            Conv1d(1, channels, 15, rng, padding=7),
            Conv1d(channels, 2 * channels, 5, rng, stride=4, padding=2),
            Conv1d(2 * channels, 2 * channels, 5, rng, stride=4, padding=2),
        ]
        self.conv_post = Conv1d(2 * channels, 1, 3, rng, padding=1)

    def __call__(self, wave: Tensor) -> Tuple[Tensor, FeatureMaps]:
        x = F.avg_pool1d(wave.reshape(1, -1), self.scale)
        features = []
        for conv in self.convs:
            x = conv(x).leaky_relu(LEAKY_SLOPE)
            features.append(x)
        return self.conv_post(x), features


class DiscriminatorSet(Module):
    def __init__(self, periods: Sequence[int], scales: Sequence[int], channels: int, rng: np.random.Generator):
        self.period_discriminators = [PeriodDiscriminator(p, channels, rng) for p in periods]
        self.scale_discriminators = [ScaleDiscriminator(s, channels, rng) for s in scales]

    def __call__(self, wave: Tensor) -> Tuple[List[Tensor], List[FeatureMaps]]:
        scores, features = [], []
        for discriminator in self.period_discriminators + self.scale_discriminators:
            score, maps = discriminator(wave)
            scores.append(score)
            features.append(maps)
        return scores, features


# ===== GAN OBJECTIVES =====

def discriminator_loss(real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]) -> Tensor:
    """Least-squares: real -> 1, generated -> 0, summed over discriminators."""
    loss: Optional[Tensor] = None
    for real, fake in zip(real_scores, fake_scores):
        term = ((1.0 - real) ** 2).mean() + (fake ** 2).mean()
        loss = term if loss is None else loss + term
    return loss


def generator_adversarial_loss(fake_scores: Sequence[Tensor]) -> Tensor:
    loss: Optional[Tensor] = None
    for fake in fake_scores:
        term = ((1.0 - fake) ** 2).mean()
        loss = term if loss is None else loss + term
    return loss


def feature_matching_loss(real_features: Sequence[FeatureMaps], fake_features: Sequence[FeatureMaps]) -> Tensor:
    loss: Optional[Tensor] = None
    for real_maps, fake_maps in zip(real_features, fake_features):
        for real, fake in zip(real_maps, fake_maps):
            term = F.l1_loss(fake, real.detach())
            loss = term if loss is None else loss + term
    return loss
