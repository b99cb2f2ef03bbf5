"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, topological_order


class NondeterministicGraphError(RuntimeError):
    pass


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between ``backward()`` and central differences.

    ``fn`` rebuilds the scalar output from ``params`` on each call.  The error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is zero from dividing round-off by zero.
    Graphs containing an active dropout node are refused.
    """
    for p in params:
        p.grad = None
    out = fn()
    if any(node.stochastic for node in topological_order(out)):
        raise NondeterministicGraphError("finite_diff_check needs a deterministic function; disable dropout")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(fn().data)
            flat[j] = orig - eps
            down = float(fn().data)
            flat[j] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(a_flat[j] - num) / max(abs(a_flat[j]), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
