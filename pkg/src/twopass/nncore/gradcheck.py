"""Central-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over sampled
    coordinates (at most ``max_coords`` per tensor; ``None`` checks all).
    ``loss_fn`` must be deterministic; non-determinism is not detected.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, g in zip(params, analytic):
            n = p.data.size
            if max_coords is None or n <= max_coords:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            flat = p.data.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(loss_fn().data)
                flat[i] = orig - epsilon
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * epsilon)
                a = g.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.grad = None
    return worst
