from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    `f` closes over `params` and must be deterministic. When the parameters
    hold more than `max_coords` scalars, a random subset of at least 64
    coordinates is checked, spread over every tensor. Returns the largest
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in tensors:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward(tensors)

    total = sum(p.size for p in tensors)
    rng = np.random.default_rng(seed)
    if max_coords is None or total <= max_coords:
        picks = [(p, np.arange(p.size)) for p in tensors]
    else:
        budget = max(64, max_coords)
        per = max(1, budget // len(tensors))
        picks = [(p, rng.choice(p.size, size=min(per, p.size), replace=False)) for p in tensors]

    worst = 0.0
    for p, idx in picks:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
