import contextlib
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from numerics import functional as F
from numerics.tensor import NEG_INF, Tensor, concat
from utils.errors import DataIntegrityError, DimensionError


class Parameter(Tensor):
    """Trainable leaf tensor; collected by :meth:`Module.named_parameters`."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    training: bool = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        params: List[Tuple[str, Parameter]] = []
        for name, child in self._children():
            if isinstance(child, Parameter):
                params.append((f"{prefix}{name}", child))
            else:
                params.extend(child.named_parameters(f"{prefix}{name}."))
        return params

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for param in self.parameters():
            param.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, param in self.named_parameters():
            if name not in state:
                raise DataIntegrityError(f"checkpoint is missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(f"parameter {name} has shape {param.shape}, checkpoint holds {value.shape}")
            param.data = value.copy()


@contextlib.contextmanager
def frozen(*modules: Module) -> Iterator[None]:
    """Stop gradients into ``modules`` for the duration of the block."""
    params = [p for module in modules for p in module.parameters()]
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


# ===== LAYERS =====

class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(np.zeros((in_dim, out_dim)) if zero_init else _uniform(rng, bound, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
    ):
        bound = 1.0 / math.sqrt(in_channels * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (out_channels, in_channels, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel_size - 1) // 2 if padding is None else padding

    def identity_init(self) -> None:
        """Center tap = identity, all other taps zero (requires in == out channels)."""
        out_channels, in_channels, width = self.weight.shape
        if out_channels != in_channels:
            raise DimensionError(f"identity init needs square channels, got {self.weight.shape}")
        weight = np.zeros(self.weight.shape)
        weight[:, :, width // 2] = np.eye(out_channels)
        self.weight.data = weight
        self.bias.data = np.zeros(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation)


class ConvTranspose1d(Module):
    """Upsamples time by ``stride``: output length is exactly ``T * stride``."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        kernel_size = 2 * stride
        bound = 1.0 / math.sqrt(in_channels * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (in_channels, out_channels, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = (stride + 1) // 2
        self.output_padding = stride % 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.transposed_conv1d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, output_padding=self.output_padding
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, dim ** -0.5, size=(num_embeddings, dim)))

    def __call__(self, ids) -> Tensor:
        return F.embedding_lookup(self.weight, ids)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if dim % heads:
            raise DimensionError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        memory = x if memory is None else memory
        q, k, v = self.query(x), self.key(memory), self.value(memory)
        scale = 1.0 / math.sqrt(self.head_dim)
        future = np.triu(np.ones((x.shape[0], memory.shape[0]), dtype=bool), k=1) if causal else None
        heads = []
        for h in range(self.heads):
            cols = slice(h * self.head_dim, (h + 1) * self.head_dim)
            scores = F.matmul(q[:, cols], k[:, cols].T) * scale
            if future is not None:
                scores = scores.masked_fill(future, NEG_INF)
            weights = F.dropout(F.softmax(scores, axis=-1), self.dropout, self.rng, self.training)
            heads.append(F.matmul(weights, v[:, cols]))
        return self.output(concat(heads, axis=1))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        hidden = F.dropout(self.inner(x).relu(), self.dropout, self.rng, self.training)
        return self.outer(hidden)


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, ffn_dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        self.attn_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, dropout)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng, dropout)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        x = x + F.dropout(self.attn(self.attn_norm(x)), self.dropout, self.rng, self.training)
        return x + F.dropout(self.ffn(self.ffn_norm(x)), self.dropout, self.rng, self.training)


class TransformerDecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, dim: int, ffn_dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        self.self_norm = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dropout)
        self.cross_norm = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dropout)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng, dropout)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + F.dropout(self.self_attn(self.self_norm(x), causal=True), self.dropout, self.rng, self.training)
        x = x + F.dropout(self.cross_attn(self.cross_norm(x), memory), self.dropout, self.rng, self.training)
        return x + F.dropout(self.ffn(self.ffn_norm(x)), self.dropout, self.rng, self.training)
