"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import no_grad


def grad_check(fn, params, fd_step: float = 1e-5, max_per_param=None, rng=None) -> float:
    """Return the max relative error between backprop and central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. Run it in float64; float32 round-off swamps the differences.
    ``max_per_param`` limits the probed entries per tensor (random subset).
    Relative error per entry is ``|a - c| / (|a| + |c| + 1e-8)``.
    """
    if not 1e-7 <= fd_step <= 1e-2:
        raise ValueError("fd_step outside the sensible range")
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss at probe point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(flat.size, size=max_per_param, replace=False)
        af = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + fd_step
                fp = float(fn().data)
                flat[i] = orig - fd_step
                fm = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite loss during finite differencing")
            c = (fp - fm) / (2 * fd_step)
            rel = abs(af[i] - c) / (abs(af[i]) + abs(c) + 1e-8)
            worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst
