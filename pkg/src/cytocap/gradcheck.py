"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, no_grad

# Scale floor keeps the relative error meaningful when both gradients vanish.
_SCALE_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    param_name: str
    max_relative_error: float
    passed: bool


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    samples_per_tensor: int = 20,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare analytic gradients against (L(t+e) - L(t-e)) / 2e per sampled scalar.

    ``loss_fn`` must close over ``params`` and rebuild the loss from their
    current values. Parameters must be float64; central differences at the
    default epsilon are meaningless in float32.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.data.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 parameters; {p.name} is {p.data.dtype}")

    for p in trainable:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in trainable}

    rng = np.random.default_rng(seed)
    results = []
    for p in trainable:
        flat = p.data.reshape(-1)
        n = flat.size
        count = min(samples_per_tensor, n)
        idx = rng.choice(n, size=count, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                hi = loss_fn().item()
                flat[i] = orig - epsilon
                lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = analytic[p.name].reshape(-1)[i]
            scale = max(abs(a), abs(numeric), _SCALE_FLOOR)
            worst = max(worst, abs(a - numeric) / scale)
        results.append(GradCheckResult(p.name, worst, worst <= tolerance))
    return results
