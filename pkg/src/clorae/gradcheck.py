"""Central finite-difference oracle for verifying analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor
from .nn import Parameter


def finite_diff_check(closure: Callable[[], Tensor],
                      params: Iterable[tuple[str, Parameter]] | Iterable[Parameter],
                      eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `closure` must rebuild the scalar loss from scratch, deterministically,
    with no side effects. Frozen parameters are asserted to carry an exactly
    zero analytic gradient and are excluded from the numeric comparison.
    """
    named = []
    for item in params:
        if isinstance(item, tuple):
            named.append(item)
        else:
            named.append(("param", item))

    for _, p in named:
        p.grad = None
    loss = closure()
    loss.backward()

    analytic = {}
    for name, p in named:
        if p.frozen:
            if p.grad is not None and np.any(p.grad != 0.0):
                raise AssertionError(f"frozen parameter {name} accumulated gradient")
            continue
        analytic[id(p)] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    max_err = 0.0
    for name, p in named:
        if p.frozen:
            continue
        ana = analytic[id(p)].reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = closure().item()
            flat[i] = orig - eps
            f_minus = closure().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-8)
            max_err = max(max_err, err)

    for _, p in named:
        p.grad = None
    return max_err
