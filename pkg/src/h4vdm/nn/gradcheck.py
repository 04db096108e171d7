from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    # below ``floor`` the comparison is effectively absolute; finite differences of
    # a float64 loss carry ~1e-11 noise, which would swamp exactly-zero gradients
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[[dict], float], params: dict, analytic: dict,
               samples_per_tensor: int = 3, step: float = 1e-5,
               rng: np.random.Generator | None = None,
               names: list[str] | None = None) -> tuple[float, dict]:
    """Compare ``analytic`` gradients with central differences of ``f``.

    Coordinates are sampled per tensor; the step is scaled by ``max(1, |w|)``.
    Returns the max relative error and the per-tensor maxima. Intended for
    float64 parameters; ``params`` are perturbed in place and restored.
    """
    rng = rng or np.random.default_rng(0)
    worst: dict[str, float] = {}
    for name in names or sorted(params):
        w = params[name]
        flat = w.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        err = 0.0
        for i in picks:
            old = flat[i]
            h = step * max(1.0, abs(float(old)))
            flat[i] = old + h
            up = f(params)
            flat[i] = old - h
            down = f(params)
            flat[i] = old
            numeric = (up - down) / (2 * h)
            err = max(err, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
        worst[name] = err
    return max(worst.values(), default=0.0), worst
