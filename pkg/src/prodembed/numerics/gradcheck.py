from __future__ import annotations

from typing import Callable

import numpy as np


def grad_check(
    fn: Callable[[dict], tuple[float, dict]],
    params: dict,
    eps: float = 1e-5,
    n_samples: int | None = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(loss, grads)`` where ``grads`` maps the same
    names as ``params``. Up to ``n_samples`` coordinates per parameter are
    probed (all of them when ``n_samples`` is None). The error of one
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-5, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss, grads = fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("objective is not finite at the base point")
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(grads[name])
        flat = p.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(params)[0]
            flat[i] = orig - eps
            down = fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite objective probing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            analytic = float(g.reshape(-1)[i])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
