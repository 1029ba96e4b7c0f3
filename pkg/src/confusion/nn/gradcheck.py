"""Central finite differences, used to check tape gradients."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, value


def numerical_gradient(fn, arrays: dict, h: float = 1e-5) -> dict:
    """``d fn(arrays) / d arrays`` by central differences; ``fn`` returns a scalar."""
    def f(arrs):
        return fn({k: Tensor(v) for k, v in arrs.items()})

    out = {}
    for name in sorted(arrays):
        x = arrays[name]
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            up = float(value(f(arrays)))
            x[idx] = old - h
            down = float(value(f(arrays)))
            x[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def tape_gradient(fn, arrays: dict) -> dict:
    from . import leaves

    params = leaves(arrays)
    with Tape() as tape:
        loss = fn(params)
        return tape.gradient(loss, params)


def relative_error(a: dict, b: dict) -> float:
    """Max over arrays of ``|a - b| / max(|a|, |b|, 1e-8)`` using whole-array norms."""
    worst = 0.0
    for k in a:
        num = np.linalg.norm(a[k] - b[k])
        den = max(np.linalg.norm(a[k]), np.linalg.norm(b[k]), 1e-8)
        worst = max(worst, float(num / den))
    return worst
