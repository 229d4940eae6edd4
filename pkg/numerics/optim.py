import math
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from numerics.layers import Parameter
from numerics.tensor import Tensor
from utils.errors import DimensionError, TrainingError


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step_count: int = Field(default=0, ge=0)
    first_moment: List[np.ndarray] = Field(default_factory=list)
    second_moment: List[np.ndarray] = Field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    learning_rate: float = 1e-3


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    names: Optional[Sequence[str]] = None,
) -> AdamState:
    """Apply one bias-corrected Adam update in place and advance ``state``."""
    if len(params) != len(grads):
        raise DimensionError(f"adam_step got {len(params)} parameters but {len(grads)} gradients")
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    grads = [np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]

    for name, param, grad in zip(names, params, grads):
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter {name}")

    if not state.first_moment:
        state.first_moment = [np.zeros(p.shape) for p in params]
        state.second_moment = [np.zeros(p.shape) for p in params]

    step = state.step_count + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    for index, (param, grad) in enumerate(zip(params, grads)):
        m = state.beta1 * state.first_moment[index] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[index] + (1.0 - state.beta2) * grad ** 2
        state.first_moment[index] = m
        state.second_moment[index] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.data = param.data - update
    state.step_count = step
    return state


# ===== SCHEDULES =====

def constant_schedule(base_lr: float) -> Callable[[int], float]:
    return lambda step: base_lr


def inverse_sqrt_schedule(base_lr: float, warmup_steps: int) -> Callable[[int], float]:
    """Linear warmup to ``base_lr`` then decay proportional to ``1 / sqrt(step)``."""
    warmup_steps = max(1, warmup_steps)

    def schedule(step: int) -> float:
        step = max(1, step)
        return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))

    return schedule


class Adam:
    """Optimizer over a fixed, ordered list of named parameters."""

    def __init__(
        self,
        named_params: Sequence[tuple],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.98,
        epsilon: float = 1e-8,
        schedule: Optional[Callable[[int], float]] = None,
    ):
        self.names = [name for name, _ in named_params]
        self.params: List[Parameter] = [param for _, param in named_params]
        self.schedule = schedule or constant_schedule(lr)
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon, learning_rate=lr)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> AdamState:
        self.state.learning_rate = self.schedule(self.state.step_count + 1)
        return adam_step(self.params, [p.grad for p in self.params], self.state, self.names)
