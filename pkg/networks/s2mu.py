"""Speech-to-masked-unit network: conv subsampler, transformer encoder, length adaptor, unit decoder.

Examples are processed one at a time on their true lengths, so attention never
sees padded positions.
"""
from typing import List, Sequence

import numpy as np

from models.s2mu import S2MUConfig
from numerics.layers import (
    Conv1d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    sinusoidal_positions,
)
from numerics.tensor import Tensor
from utils.errors import LengthError


class SpeechEncoder(Module):
    def __init__(self, config: S2MUConfig, rng: np.random.Generator):
        self.convs: List[Conv1d] = []
        channels = config.input_dim
        for stride in config.conv_strides:
            self.convs.append(Conv1d(channels, config.conv_channels, config.conv_kernel, rng,
                                     stride=stride, padding=config.conv_kernel // 2))
            channels = config.conv_channels
        self.project = Linear(channels, config.model_dim, rng)
        self.layers = [
            TransformerEncoderLayer(config.model_dim, config.ffn_dim, config.heads, rng, config.dropout)
            for _ in range(config.encoder_layers)
        ]
        self.norm = LayerNorm(config.model_dim)
        self.total_stride = config.total_stride
        self.dim = config.model_dim

    def __call__(self, features) -> Tensor:
        """``features[T x D]`` -> states ``[ceil(T / total_stride) x model_dim]``."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim != 2 or x.shape[0] < max(1, self.total_stride):
            raise LengthError(
                f"Speech encoder needs at least {max(1, self.total_stride)} frames, got features of shape {x.shape}"
            )
        h = x.T
        for conv in self.convs:
            h = conv(h).relu()
        h = self.project(h.T)
        h = h + sinusoidal_positions(h.shape[0], self.dim)
        for layer in self.layers:
            h = layer(h)
        return self.norm(h)


class LengthAdaptor(Module):
    """Single strided convolution over time, same width in and out."""

    def __init__(self, dim: int, kernel: int, stride: int, rng: np.random.Generator):
        self.conv = Conv1d(dim, dim, kernel, rng, stride=stride, padding=kernel // 2)

    def __call__(self, states: Tensor) -> Tensor:
        return self.conv(states.T).T


class UnitDecoder(Module):
    def __init__(self, config: S2MUConfig, vocab_size: int, rng: np.random.Generator):
        self.embed = Embedding(vocab_size, config.model_dim, rng)
        self.layers = [
            TransformerDecoderLayer(config.model_dim, config.decoder_ffn_dim, config.heads, rng, config.dropout)
            for _ in range(config.decoder_layers)
        ]
        self.norm = LayerNorm(config.model_dim)
        self.output = Linear(config.model_dim, vocab_size, rng)
        self.dim = config.model_dim

    def __call__(self, tokens: Sequence[int], memory: Tensor) -> Tensor:
        """Logits ``[len(tokens) x |V|]``; row j scores the token following ``tokens[:j+1]``."""
        h = self.embed(np.asarray(tokens, dtype=np.int64))
        h = h + sinusoidal_positions(len(tokens), self.dim)
        for layer in self.layers:
            h = layer(h, memory)
        return self.output(self.norm(h))


class S2MUModel(Module):
    def __init__(self, config: S2MUConfig, vocab_size: int, rng: np.random.Generator):
        self.encoder = SpeechEncoder(config, rng)
        self.adaptor = LengthAdaptor(config.model_dim, config.adaptor_kernel, config.adaptor_stride, rng)
        self.decoder = UnitDecoder(config, vocab_size, rng)
        self.vocab_size = vocab_size

    def memory(self, features) -> Tensor:
        return self.adaptor(self.encoder(features))

    def __call__(self, features, tokens: Sequence[int]) -> Tensor:
        return self.decoder(tokens, self.memory(features))
