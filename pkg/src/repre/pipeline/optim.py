"""AdamW with linear warm-up followed by cosine decay."""

from __future__ import annotations

import math

import numpy as np

from ..tensor import Tensor


def lr_at(step: int, total: int, base: float, warmup_frac: float = 0.05) -> float:
    """Learning rate for zero-based ``step`` out of ``total``."""
    warmup = max(1, int(round(warmup_frac * total))) if warmup_frac > 0 else 0
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * base * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05) -> None:
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            # decay weight matrices / kernels only; biases, norms, embeddings, scalars are exempt
            if self.weight_decay and p.ndim >= 2 and k.endswith("weight"):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=np.float64)
        self.t = t
