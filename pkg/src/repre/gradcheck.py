"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, reset_tape


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Sup-norm of the difference, scaled by the larger gradient's sup-norm.

    Scaling per tensor rather than per element keeps near-zero entries from
    blowing up the ratio on pure rounding noise.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                            eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def value(arr: np.ndarray) -> float:
        reset_tape()
        out = f(Tensor(arr))
        if out.data.size != 1:
            raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    if value(base.copy()) != value(base.copy()):
        raise NonDeterministicError("two forward passes of f disagree")

    reset_tape()
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out)
        analytic = xt.grad.copy()
    else:
        analytic = np.zeros_like(base)
    reset_tape()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[i] += eps
        minus = base.copy()
        minus.reshape(-1)[i] -= eps
        flat[i] = (value(plus) - value(minus)) / (2.0 * eps)
    reset_tape()
    return GradCheckReport(relative_error(analytic, numeric), tol, analytic, numeric)
