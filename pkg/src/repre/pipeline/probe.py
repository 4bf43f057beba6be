"""Linear-probe evaluation of a frozen encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..encoder import Encoder
from ..nn import Linear
from .config import AugmentationPolicy
from .data import normalize
from .optim import AdamW


class EncoderMutatedError(RuntimeError):
    """The frozen encoder's parameters changed while probing."""


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    num_classes: int
    fingerprint: str


def extract_features(encoder: Encoder, images: np.ndarray, policy: AugmentationPolicy | None = None,
                     chunk: int = 128) -> np.ndarray:
    """Class representations of normalized ``images``; no tape is recorded."""
    policy = policy or AugmentationPolicy()
    feats = [encoder.represent(normalize(images[i:i + chunk], policy))
             for i in range(0, len(images), chunk)]
    return np.concatenate(feats, axis=0)


def _cross_entropy(logits: T.Tensor, onehot: np.ndarray) -> T.Tensor:
    # log-softmax with the row max shifted out as a constant
    z = logits - logits.data.max(axis=1, keepdims=True)
    lse = T.log(T.exp(z).sum(axis=1, keepdims=True))
    return -((z - lse) * onehot).sum(axis=1).mean()


def train_linear(features: np.ndarray, labels: np.ndarray, num_classes: int, steps: int = 300,
                 lr: float = 0.05, weight_decay: float = 1e-4, seed: int = 0) -> Linear:
    """Full-batch softmax regression trained with the autodiff engine."""
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature rows but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    head = Linear(features.shape[1], num_classes, np.random.default_rng(seed))
    opt = AdamW(head.named_parameters(), lr=lr, weight_decay=weight_decay)
    onehot = np.eye(num_classes)[labels]
    x = T.Tensor(features)
    for _ in range(steps):
        T.reset_tape()
        opt.zero_grad()
        loss = _cross_entropy(head(x), onehot)
        T.backward(loss)
        opt.step()
    T.reset_tape()
    return head


def accuracy(head: Linear, features: np.ndarray, labels: np.ndarray) -> float:
    with T.no_grad():
        pred = head(T.Tensor(features)).data.argmax(axis=1)
    return float(np.mean(pred == labels))


def linear_probe(encoder: Encoder, train: tuple[np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray],
                 policy: AugmentationPolicy | None = None, steps: int = 300, lr: float = 0.05,
                 seed: int = 0) -> ProbeResult:
    """Fit a linear layer on frozen class representations and report top-1 accuracy.

    ``train`` and ``test`` are ``(images, labels)`` pairs. The encoder is checked
    to be bit-identical before and after.
    """
    (xtr, ytr), (xte, yte) = train, test
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise ValueError("image and label counts differ")
    before = encoder.fingerprint()
    ftr = extract_features(encoder, xtr, policy)
    fte = extract_features(encoder, xte, policy)
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-8
    ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
    num_classes = int(max(ytr.max(), yte.max())) + 1
    head = train_linear(ftr, ytr, num_classes, steps=steps, lr=lr, seed=seed)
    after = encoder.fingerprint()
    if after != before:
        raise EncoderMutatedError("encoder parameters changed during the probe")
    return ProbeResult(accuracy(head, ftr, ytr), accuracy(head, fte, yte), num_classes, after)


def split_dataset(images: np.ndarray, labels: np.ndarray, test_frac: float = 0.25, seed: int = 0):
    """Deterministic shuffled train / test split."""
    order = np.random.default_rng(seed).permutation(len(images))
    n_test = max(1, int(round(test_frac * len(images))))
    te, tr = order[:n_test], order[n_test:]
    return (images[tr], labels[tr]), (images[te], labels[te])
