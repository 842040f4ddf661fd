"""Shared builders for loss/network tests."""

import numpy as np

from gridpinn.norm import NormMeta


def random_meta(n_bus, rng, samples=50):
    """Metadata fitted on random but plausible states; the slack (bus 1) is held constant."""
    vm = 1 + 0.05 * rng.standard_normal((samples, n_bus))
    va = 0.2 * rng.standard_normal((samples, n_bus))
    vm[:, 0], va[:, 0] = 1.06, 0.0
    inputs = rng.standard_normal((samples, 2 * n_bus))
    return NormMeta.fit(inputs, vm, va)


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
