"""Central finite-difference gradient checking (run under 64-bit precision)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# Gradients smaller than this are compared absolutely; f64 round-off in the
# difference quotient is ~1e-10 * |f|, which would swamp a pure ratio.
REL_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    perturb: Callable[[Tensor, tuple], float] | None = None,
    per_tensor: int | None = None,
) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``fn`` recomputes a scalar loss from ``params``.  With ``samples`` set, that
    many (param, index) coordinates are drawn at random instead of checking
    every coordinate; ``per_tensor`` instead draws that many from each tensor.
    ``perturb`` may override ``eps`` per coordinate.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(*p.shape)]
    if per_tensor is not None:
        rng = rng or np.random.default_rng(0)
        coords = []
        for i, p in enumerate(params):
            flat = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
            coords += [(i, np.unravel_index(j, p.shape)) for j in sorted(flat)]
    elif samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        coords = [coords[j] for j in rng.choice(len(coords), size=samples, replace=False)]

    worst = 0.0
    for i, idx in coords:
        p = params[i]
        h = perturb(p, idx) if perturb is not None else eps
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = fn().item()
        p.data[idx] = orig - h
        down = fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, float(relative_error(analytic[i][idx], numeric)))
    return worst
