"""Finite-difference sweep over every registered op and every loss.

Each case draws a small random instance (at most 64 elements per input) and
checks the gradient of ``sum(R * f(inputs))`` with respect to each input in
turn, ``R`` being fixed random weights so no output direction is left out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensor as T
from ..contrastive import NegativeQueue, cosine_loss, in_batch_info_nce, info_nce_loss
from ..decoder import reconstruction_loss
from ..gradcheck import finite_difference_check
from ..objective import UncertaintyWeights, combined_loss

Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., T.Tensor]]]


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    tol: float
    seconds: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error <= self.tol


def _away_from_zero(rng, shape, margin=0.05):
    """Entries with |x| >= margin so kinks (relu, abs) sit outside the eps stencil."""
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _mean_case(rng):
    shape = tuple(rng.integers(1, 5, size=3))
    axis = [None, 0, 1, 2, -1][rng.integers(0, 5)]
    keep = bool(rng.integers(0, 2))
    return [rng.standard_normal(shape)], lambda x: T.mean(x, axis=axis, keepdims=keep)


def _index_case(rng):
    x = rng.standard_normal((4, 5, 3))
    keys = [(slice(1, 3),), (2,), (slice(None), 0), (Ellipsis, slice(0, 2)), (slice(0, 4, 2), slice(1, None))]
    key = keys[rng.integers(0, len(keys))]
    return [x], lambda t: t[key]


def _transpose_case(rng):
    x = rng.standard_normal((2, 3, 4))
    axes = tuple(rng.permutation(3))
    return [x], lambda t: T.transpose(t, axes)


def _conv_case(rng):
    k = int(rng.choice([1, 3]))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    x = rng.standard_normal((1, h, w, cin))
    wt = rng.standard_normal((k, k, cin, cout)) * 0.5
    b = rng.standard_normal(cout)
    return [x, wt, b], lambda a, ww, bb: T.conv2d(a, ww, bb)


def _layer_norm_case(rng):
    # c = 2 is degenerate: the normalized pair is always (-1, 1), so d out / d x is 0
    # and the relative error would only measure rounding noise
    c = int(rng.integers(3, 7))
    x = rng.standard_normal((int(rng.integers(1, 5)), c))
    return [x, 1.0 + 0.3 * rng.standard_normal(c), 0.3 * rng.standard_normal(c)], T.layer_norm


def _info_nce_case(rng):
    b, d, kq = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 9))
    queue = NegativeQueue(kq, d)
    queue.fill_random(rng)
    kp = rng.standard_normal((b, d))
    kp /= np.linalg.norm(kp, axis=1, keepdims=True)
    tau = float(rng.uniform(0.1, 1.0))
    return [rng.standard_normal((b, d))], lambda q: info_nce_loss(T.l2_normalize(q), kp, queue, tau)


def _in_batch_case(rng):
    b, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    k = rng.standard_normal((b, d))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    tau = float(rng.uniform(0.1, 1.0))
    return [rng.standard_normal((b, d))], lambda q: in_batch_info_nce(T.l2_normalize(q), k, tau)


def _cosine_case(rng):
    b, d = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    z = rng.standard_normal((b, d))
    return [rng.standard_normal((b, d))], lambda p: cosine_loss(p, z)


def _reconstruction_case(rng):
    shape = (1, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 3)
    img = rng.uniform(0, 1, shape)
    return [img + _away_from_zero(rng, shape)], lambda r: reconstruction_loss(img, r)


def _combined_case(rng):
    values = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 5), rng.uniform(0.05, 1)])

    def f(v):
        w = UncertaintyWeights()
        w.s_contrast, w.s_reconstruct = v[0], v[1]
        return combined_loss(v[2], v[3], w)

    return [values], f


def _shape(rng, lo=1, hi=5, n=2):
    return tuple(int(s) for s in rng.integers(lo, hi, size=n))


OP_CASES: dict[str, Builder] = {
    "matmul": lambda r: (lambda m, k, n: ([r.standard_normal((2, m, k)), r.standard_normal((k, n))], T.matmul))(
        *_shape(r, n=3)),
    "linear": lambda r: (lambda m, k, n: ([r.standard_normal((m, k)), r.standard_normal((k, n)),
                                          r.standard_normal(n)], T.linear))(*_shape(r, n=3)),
    "conv2d": _conv_case,
    "add": lambda r: (lambda s: ([r.standard_normal(s), r.standard_normal(s[1:])], T.add))(_shape(r, n=3)),
    "mul": lambda r: (lambda s: ([r.standard_normal(s), r.standard_normal((s[0], 1))], T.mul))(_shape(r)),
    "concat": lambda r: (lambda a, b, c: ([r.standard_normal((a, b)), r.standard_normal((a, c))],
                                          lambda x, y: T.concat([x, y], axis=1)))(*_shape(r, n=3)),
    "index": _index_case,
    "reshape": lambda r: ([r.standard_normal((2, 6))], lambda x: T.reshape(x, (3, 4))),
    "transpose": _transpose_case,
    "mean": _mean_case,
    "softmax": lambda r: ([2.0 * r.standard_normal(_shape(r, 1, 5, 2))], T.softmax),
    "layer_norm": _layer_norm_case,
    "gelu": lambda r: ([2.0 * r.standard_normal(_shape(r))], T.gelu),
    "relu": lambda r: ([_away_from_zero(r, _shape(r))], T.relu),
    "l2_normalize": lambda r: ([r.standard_normal(_shape(r, 2, 6))], T.l2_normalize),
    "abs_sum": lambda r: ([_away_from_zero(r, _shape(r))], T.abs_sum),
    "log": lambda r: ([r.uniform(0.3, 3.0, _shape(r))], T.log),
    "exp": lambda r: ([r.uniform(-2.0, 2.0, _shape(r))], T.exp),
    "bilinear_upsample_2x": lambda r: ([r.standard_normal((1,) + _shape(r, 1, 4) + (2,))], T.bilinear_upsample_2x),
    "patch_merge": lambda r: ([r.standard_normal((1, 2 * int(r.integers(1, 3)), 2 * int(r.integers(1, 3)), 2))],
                              T.patch_merge),
    "add_scalar": lambda r: ([r.standard_normal(_shape(r))], lambda x: T.add_scalar(x, 1.7)),
    "mul_scalar": lambda r: ([r.standard_normal(_shape(r))], lambda x: T.mul_scalar(x, -0.6)),
}

LOSS_CASES: dict[str, Builder] = {
    "loss:info_nce": _info_nce_case,
    "loss:info_nce_in_batch": _in_batch_case,
    "loss:cosine": _cosine_case,
    "loss:reconstruction": _reconstruction_case,
    "loss:combined": _combined_case,
}


def check_case(name: str, build: Builder, instances: int = 20, eps: float = 1e-5, tol: float = 1e-4,
               seed: int = 0) -> CaseResult:
    rng = np.random.default_rng([seed, sum(name.encode())])
    worst = 0.0
    failures = []
    t0 = time.perf_counter()
    for inst in range(instances):
        arrays, fn = build(rng)
        if max(a.size for a in arrays) > 64:
            raise ValueError(f"{name}: instance exceeds 64 elements")
        with T.no_grad():
            out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
        weights = rng.standard_normal(out_shape)
        for i in range(len(arrays)):
            def f(t, i=i):
                args = [T.Tensor(a) for a in arrays]
                args[i] = t
                return (fn(*args) * weights).sum()

            rep = finite_difference_check(f, arrays[i], eps=eps, tol=tol)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failures.append(f"instance {inst} input {i}: rel err {rep.max_rel_error:.2e}")
    return CaseResult(name, instances, worst, tol, time.perf_counter() - t0, failures)


def run_suite(instances: int = 20, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CaseResult]:
    missing = set(T.OPS) - set(OP_CASES)
    if missing:
        raise RuntimeError(f"no gradient case for ops {sorted(missing)}")
    cases = {**OP_CASES, **LOSS_CASES}
    return [check_case(n, b, instances, eps, tol, seed) for n, b in cases.items()]
