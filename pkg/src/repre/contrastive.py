"""Siamese contrastive branch: heads, EMA target, negative queue and the two loss families."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .encoder import Encoder
from .nn import MLP, Module
from .tensor import Tensor

Mode = Literal["with_negatives", "without_negatives"]
UNIT_TOL = 1e-6


@dataclass
class HeadConfig:
    proj_hidden: int = 256
    proj_dim: int = 128
    pred_hidden: int = 256
    tau: float = 0.2

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


class NegativeQueue:
    """FIFO of unit-norm, detached key vectors. Capacity 0 means in-batch negatives."""

    def __init__(self, capacity: int, dim: int) -> None:
        if capacity < 0:
            raise ValueError("queue capacity must be >= 0")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((0, dim))

    def __len__(self) -> int:
        return len(self.entries)

    def fill_random(self, rng: np.random.Generator) -> None:
        keys = rng.standard_normal((self.capacity, self.dim))
        self.entries = keys / np.linalg.norm(keys, axis=1, keepdims=True)


def enqueue_keys(queue: NegativeQueue, keys) -> None:
    if isinstance(keys, Tensor):
        if keys.requires_grad:
            raise ValueError("enqueue_keys: keys must be detached from the tape")
        keys = keys.data
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.shape[1] != queue.dim:
        raise T.ShapeError(f"enqueue_keys: key dim {keys.shape[1]} != queue dim {queue.dim}")
    norms = np.linalg.norm(keys, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"enqueue_keys: keys must be l2-normalised (max |norm-1| = "
                         f"{np.abs(norms - 1.0).max():.3g})")
    merged = np.concatenate([queue.entries, keys], axis=0)
    queue.entries = merged[max(0, len(merged) - queue.capacity):].copy()


def _check_nonzero(name: str, x: np.ndarray) -> None:
    if np.any(np.linalg.norm(np.atleast_2d(x), axis=-1) == 0):
        raise ValueError(f"{name} contains a zero-norm vector")


def info_nce_loss(q: Tensor, k_plus, negatives, tau: float) -> Tensor:
    """(Kq+1)-way softmax cross-entropy with the positive at index 0, batch-averaged.

    ``q`` and ``k_plus`` are (B, D) or (D,); ``negatives`` is a queue or a (Kq, D)
    array shared by the whole batch. ``k_plus`` and negatives carry no gradient.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    neg = negatives.entries if isinstance(negatives, NegativeQueue) else np.asarray(
        negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)
    if neg.ndim != 2 or len(neg) == 0:
        raise ValueError("info_nce_loss needs a non-empty (Kq, D) set of negatives")
    kp = k_plus.data if isinstance(k_plus, Tensor) else np.asarray(k_plus, dtype=np.float64)
    _check_nonzero("q", q.data)
    _check_nonzero("k_plus", kp)
    if q.ndim == 1:
        q = q.reshape(1, -1)
        kp = kp.reshape(1, -1)
    pos = (q * kp).sum(axis=-1, keepdims=True)
    logits = T.concat([pos, q @ neg.T], axis=-1) * (1.0 / tau)
    return -T.log(T.softmax(logits)[:, 0]).mean()


def in_batch_info_nce(q: Tensor, k: np.ndarray, tau: float) -> Tensor:
    """Eq.-1 form where the other samples' keys in the batch are the negatives."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    k = k.data if isinstance(k, Tensor) else k
    _check_nonzero("q", q.data)
    _check_nonzero("k", k)
    logp = T.log(T.softmax((q @ k.T) * (1.0 / tau)))
    return -(logp * np.eye(len(k))).sum(axis=-1).mean()


def cosine_loss(p1: Tensor, z2) -> Tensor:
    """Negative cosine similarity, batch-averaged; ``z2`` is treated as a constant."""
    z = z2.data if isinstance(z2, Tensor) else np.asarray(z2, dtype=np.float64)
    _check_nonzero("p1", p1.data)
    _check_nonzero("z2", z)
    z = z / np.linalg.norm(z, axis=-1, keepdims=True)
    p = T.l2_normalize(p1)
    if p.ndim == 1:
        return -(p * z).sum()
    return -(p * z).sum(axis=-1).mean()


@dataclass
class ViewOutputs:
    """Per-view head outputs: online query (on the tape) and detached target key."""

    q: Tensor
    k: np.ndarray


def symmetrized_contrast(view1: ViewOutputs, view2: ViewOutputs, mode: Mode,
                         queue: NegativeQueue | None = None, tau: float = 0.2) -> Tensor:
    """``ctr(q1, k2) + ctr(q2, k1)``."""
    if mode == "with_negatives":
        if queue is None:
            raise ValueError("with_negatives mode needs a NegativeQueue (capacity 0 for in-batch)")

        def ctr(q, k):
            qn = T.l2_normalize(q)
            kn = k / np.linalg.norm(k, axis=-1, keepdims=True)
            if queue.capacity == 0:
                return in_batch_info_nce(qn, kn, tau)
            return info_nce_loss(qn, kn, queue, tau)
    elif mode == "without_negatives":
        if queue is not None:
            raise ValueError("without_negatives mode takes no negative queue")
        ctr = cosine_loss
    else:
        raise ValueError(f"unknown contrastive mode {mode!r}")
    return ctr(view1.q, view2.k) + ctr(view2.q, view1.k)


class BranchState(Module):
    """Online encoder+projector(+predictor) and its EMA target copy."""

    def __init__(self, encoder: Encoder, heads: HeadConfig, mode: Mode, momentum: float,
                 queue_size: int, rng: np.random.Generator) -> None:
        if mode not in ("with_negatives", "without_negatives"):
            raise ValueError(f"unknown contrastive mode {mode!r}")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        heads.validate()
        self.encoder = encoder
        self.projector = MLP(encoder.config.out_width, heads.proj_hidden, heads.proj_dim, rng)
        if mode == "without_negatives":
            self.predictor = MLP(heads.proj_dim, heads.pred_hidden, heads.proj_dim, rng)
        self._mode = mode
        self._heads = heads
        self.momentum = momentum
        self._target_encoder = copy.deepcopy(encoder)
        self._target_projector = copy.deepcopy(self.projector)
        self._target_encoder.set_requires_grad(False)
        self._target_projector.set_requires_grad(False)
        self._queue = None
        if mode == "with_negatives":
            self._queue = NegativeQueue(queue_size, heads.proj_dim)
            if queue_size:
                self._queue.fill_random(rng)

    @property
    def mode(self) -> Mode:
        return self._mode

    @property
    def tau(self) -> float:
        return self._heads.tau

    @property
    def queue(self) -> NegativeQueue | None:
        return self._queue

    def target_named_parameters(self):
        yield from self._target_encoder.named_parameters("encoder.")
        yield from self._target_projector.named_parameters("projector.")

    def target_parameters(self) -> list[Tensor]:
        return [p for _, p in self.target_named_parameters()]

    def query(self, rep: Tensor) -> Tensor:
        z = self.projector(rep)
        return self.predictor(z) if self._mode == "without_negatives" else z

    def key(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            rep, _ = self._target_encoder(images)
            return self._target_projector(rep).data

    def aligned_pairs(self):
        online = dict(self.encoder.named_parameters("encoder."))
        online.update(self.projector.named_parameters("projector."))
        for name, tgt in self.target_named_parameters():
            yield name, online[name], tgt


def ema_update(state: BranchState) -> None:
    """target <- m * target + (1 - m) * online, for every aligned parameter."""
    m = state.momentum
    for name, online, target in state.aligned_pairs():
        if online.shape != target.shape:
            raise T.ShapeError(f"ema_update: {name} online {online.shape} vs target {target.shape}")
        target.data = m * target.data + (1.0 - m) * online.data
