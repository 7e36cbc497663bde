"""Variational mutual-information bound between the two expert outputs.

The universal expert acts as the teacher: a learned Gaussian head predicts
its output from the task expert's output, and minimizing the Gaussian
negative log-likelihood tightens a variational lower bound on the mutual
information between the two. The teacher side is detached, so this loss
shapes the task experts and the head but never drags the universal expert
toward any single task.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, linear
from .nn import Module, Parameter

# softplus(RAW_UNIT_VARIANCE) == 1, so heads start at unit variance.
RAW_UNIT_VARIANCE = math.log(math.e - 1.0)


class VidHead(Module):
    """Gaussian predictor of the universal output from the task output.

    Mean is an affine map initialized to the identity; per-channel variance
    is softplus-parameterized so it stays strictly positive.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mean_weight = Parameter((dim, dim), init=("identity",))
        self.mean_bias = Parameter((dim,), init=("zeros",))
        self.raw_var = Parameter((dim,), init=("constant", RAW_UNIT_VARIANCE))

    def variance(self) -> Tensor:
        return self.raw_var.softplus()

    def loss(self, task_out: Tensor, universal_out: Tensor) -> Tensor:
        """Mean over tokens and channels of the Gaussian NLL (without the
        constant term): 0.5*log(var) + (teacher - mean)^2 / (2*var)."""
        if task_out.shape != universal_out.shape:
            raise ValueError(
                f"expert output shapes disagree: {task_out.shape} vs "
                f"{universal_out.shape}")
        if task_out.shape[-1] != self.dim:
            raise ValueError(
                f"channel count {task_out.shape[-1]} != head dim {self.dim}")
        teacher = universal_out.detach()
        mean = linear(task_out, self.mean_weight) + self.mean_bias
        var = self.variance()
        err = teacher - mean
        per_channel = 0.5 * var.log() + (err * err) / (2.0 * var)
        return per_channel.mean()


def mim_loss(pairs: list[tuple[str, Tensor, Tensor]],
             heads: dict[str, VidHead]) -> Tensor:
    """Average the per-layer head losses over every traced wrapped layer.

    `pairs` holds (layer_name, universal_out, task_out) as traced during a
    forward pass; each layer has its own head.
    """
    if not pairs:
        return Tensor(0.0)
    total = None
    for layer_name, universal_out, task_out in pairs:
        term = heads[layer_name].loss(task_out, universal_out)
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))
