"""Central finite differences, the independent oracle for every gradient."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor


def finite_diff_gradient(f: Callable[[], float], params: Mapping[str, Tensor],
                         epsilon: float = 1e-5,
                         coords: Mapping[str, Iterable[int]] | None = None,
                         ) -> dict[str, np.ndarray]:
    """(f(w+eps) - f(w-eps)) / (2 eps) per parameter coordinate.

    f must be deterministic and read the parameters in place. coords limits
    the check to the given flat indices per tensor; without it every
    coordinate is swept. Unchecked coordinates come back as nan so they can't
    be mistaken for real values.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads: dict[str, np.ndarray] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        if coords is None:
            idx = range(flat.size)
            g = np.zeros(flat.size)
        else:
            idx = list(coords.get(name, ()))
            g = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f()
            flat[i] = orig - epsilon
            lo = f()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * epsilon)
        grads[name] = g.reshape(t.data.shape)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(floor, |n|) over the coordinates numeric covers."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    n = numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(n))))
