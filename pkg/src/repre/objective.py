"""Learnable uncertainty weighting of the contrastive and reconstruction losses."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import Tensor


class NonFiniteLossError(FloatingPointError):
    """A loss term went NaN/Inf; the message names the term."""


class UncertaintyWeights(Module):
    """Log-variance parameters s; the effective weights are exp(-s), always positive."""

    def __init__(self, s_contrast: float = 0.0, s_reconstruct: float = 0.0) -> None:
        self.s_contrast = param(np.array(float(s_contrast)))
        self.s_reconstruct = param(np.array(float(s_reconstruct)))

    @property
    def lambdas(self) -> tuple[float, float]:
        return (math.exp(-float(self.s_contrast.data)), math.exp(-float(self.s_reconstruct.data)))


def init_weights(s_contrast: float = 0.0, s_reconstruct: float = 0.0) -> UncertaintyWeights:
    return UncertaintyWeights(s_contrast, s_reconstruct)


def _check(name: str, loss: Tensor | None) -> None:
    if loss is not None and not np.all(np.isfinite(loss.data)):
        raise NonFiniteLossError(f"{name} is not finite: {loss.data!r}")


def combined_loss(l_contrast: Tensor, l_reconstruct: Tensor | None, w: UncertaintyWeights) -> Tensor:
    """``exp(-s1) * Lc + s1 + exp(-s2) * Lr + s2``.

    Passing ``l_reconstruct=None`` drops the whole second term, which leaves
    the plain contrastive objective.
    """
    _check("l_contrast", l_contrast)
    _check("l_reconstruct", l_reconstruct)
    s1, s2 = w.s_contrast, w.s_reconstruct
    total = T.exp(-s1) * l_contrast + s1
    if l_reconstruct is not None:
        total = total + (T.exp(-s2) * l_reconstruct + s2)
    return total
