from typing import Callable, Sequence

import numpy as np

from numerics.tensor import Tensor, no_grad


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` takes no arguments and closes over ``params``; it must be deterministic.
    """
    for param in params:
        param.grad = None
    f().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for param, grad in zip(params, analytic):
            for index in range(param.size):
                original = param.data.flat[index]
                param.data.flat[index] = original + epsilon
                plus = f().item()
                param.data.flat[index] = original - epsilon
                minus = f().item()
                param.data.flat[index] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                exact = grad.flat[index]
                error = abs(exact - numeric) / max(1e-12, abs(exact) + abs(numeric))
                worst = max(worst, error)
    return worst
