"""The pre-training loop: two views, taps, reconstruction + contrast, uncertainty weights, EMA."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import tensor as T
from ..contrastive import BranchState, ViewOutputs, ema_update, enqueue_keys, symmetrized_contrast
from ..decoder import Decoder, decoder_cost_ratio, reconstruction_loss
from ..encoder import Encoder, HierarchyFeatures
from ..objective import NonFiniteLossError, UncertaintyWeights, combined_loss, init_weights
from .config import TrainConfig
from .data import augment_two_views, load_image_dir, synthetic_shapes
from .optim import AdamW, lr_at

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    step: int
    l_contrast: float
    l_reconstruct: Optional[float]
    combined: float
    lambda_contrast: float
    lambda_reconstruct: float
    psnr: Optional[float]
    param_ratio: float
    flop_ratio: float
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def psnr(recon: np.ndarray, target: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        mse = float(np.mean((recon - target) ** 2))
    if mse == 0:
        return float("inf")
    return -float("inf") if math.isinf(mse) else 10.0 * math.log10(1.0 / mse)


def load_dataset(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.dataset == "synthetic":
        return synthetic_shapes(config.dataset_size, config.dataset_seed, config.image_size,
                                config.num_classes)
    return load_image_dir(config.dataset, config.image_size)


class Trainer:
    """Owns every piece of mutable training state; one step at a time."""

    def __init__(self, config: TrainConfig, images: np.ndarray | None = None) -> None:
        config.validate()
        self.config = config
        if images is None:
            images, _ = load_dataset(config)
        if len(images) < 1:
            raise ValueError("empty training set")
        self.images = images
        # independent streams so optional parts never shift the others' draws
        enc_seq, head_seq, dec_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.encoder = Encoder(config.encoder_config(), np.random.default_rng(enc_seq))
        self.branch = BranchState(self.encoder, config.head_config(), config.contrastive_mode,
                                  config.momentum, config.queue_size, np.random.default_rng(head_seq))
        self.decoder = (Decoder.for_encoder(self.encoder, config.decoder_config(),
                                            np.random.default_rng(dec_seq))
                        if config.reconstruction else None)
        self.weights = init_weights(config.s_contrast_init, config.s_reconstruct_init)
        self.optimizer = AdamW(self.trainable_named_parameters(), lr=config.lr,
                               weight_decay=config.weight_decay)
        self.param_ratio, self.flop_ratio = decoder_cost_ratio(self.encoder, self.decoder)
        self.step = 0

    def trainable_named_parameters(self):
        yield from self.branch.named_parameters("online.")
        if self.decoder is not None:
            yield from self.decoder.named_parameters("decoder.")
            yield from self.weights.named_parameters("weights.")
        # contrastive-only runs optimise the plain contrastive loss; the weights stay put

    def batch_views(self, step: int):
        """Augmented views for ``step``; a pure function of (seed, step)."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, step])
        n = len(self.images)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        return augment_two_views(self.images[idx], cfg.augmentation(), rng)

    def train_step(self, views) -> MetricsRecord:
        t0 = time.perf_counter()
        cfg = self.config
        v1_raw, v1_norm, v2_norm = views
        b = len(v1_raw)
        T.reset_tape()
        self.optimizer.zero_grad()

        both = np.concatenate([v1_norm, v2_norm], axis=0)
        rep, taps = self.encoder(both)
        q = self.branch.query(rep)
        k = self.branch.key(both)
        view1 = ViewOutputs(q[:b], k[:b])
        view2 = ViewOutputs(q[b:], k[b:])
        try:
            l_con = symmetrized_contrast(view1, view2, self.branch.mode, self.branch.queue, self.branch.tau)
        except T.NonFiniteError as e:
            raise NonFiniteLossError(f"l_contrast: {e}") from e

        l_rec = None
        recon = None
        if self.decoder is not None:
            taps_v1 = HierarchyFeatures([f[:b] for f in taps.features], taps.grids)
            try:
                recon = self.decoder(taps_v1)
                l_rec = reconstruction_loss(v1_raw, recon)
            except T.NonFiniteError as e:
                raise NonFiniteLossError(f"l_reconstruct: {e}") from e

        # uncertainty weighting only makes sense across two tasks
        loss = combined_loss(l_con, l_rec, self.weights) if l_rec is not None else l_con
        T.backward(loss)
        # refuse to apply an update that would poison the parameters or moments
        for name, p in self.optimizer.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteLossError(f"gradient of {name} is not finite")
        self.optimizer.step(lr_at(self.step, cfg.steps, cfg.lr, cfg.warmup_frac))
        ema_update(self.branch)
        queue = self.branch.queue
        if queue is not None and queue.capacity > 0:
            keys = np.concatenate([k[:b], k[b:]], axis=0)
            enqueue_keys(queue, keys / np.linalg.norm(keys, axis=1, keepdims=True))

        lam_c, lam_r = self.weights.lambdas
        record = MetricsRecord(
            step=self.step + 1,
            l_contrast=float(l_con.data),
            l_reconstruct=None if l_rec is None else float(l_rec.data),
            combined=float(loss.data),
            lambda_contrast=lam_c,
            lambda_reconstruct=lam_r,
            psnr=None if recon is None else psnr(recon.data, v1_raw),
            param_ratio=self.param_ratio,
            flop_ratio=self.flop_ratio,
            wall_clock=time.perf_counter() - t0,
        )
        self.step += 1
        T.reset_tape()
        return record

    def run(self, steps: int | None = None, metrics_path: str | Path | None = None,
            checkpoint_path: str | Path | None = None) -> list[MetricsRecord]:
        """Train until ``steps`` total steps (default: config.steps), appending JSON lines."""
        from .checkpoint import save_checkpoint

        end = self.config.steps if steps is None else steps
        records = []
        fh = open(metrics_path, "a") if metrics_path is not None else None
        try:
            while self.step < end:
                rec = self.train_step(self.batch_views(self.step))
                records.append(rec)
                if fh is not None:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
                if rec.step % 50 == 0 or rec.step == 1:
                    log.info("step %d  l_con %.4f  l_rec %s  psnr %s  %.2fs", rec.step, rec.l_contrast,
                             "-" if rec.l_reconstruct is None else f"{rec.l_reconstruct:.4f}",
                             "-" if rec.psnr is None else f"{rec.psnr:.2f}", rec.wall_clock)
                every = self.config.checkpoint_every
                if checkpoint_path is not None and every and rec.step % every == 0:
                    save_checkpoint(checkpoint_path, self)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, self)
        return records


def pretrain(config: TrainConfig, images: np.ndarray | None = None) -> Trainer:
    """Run a full pre-training job into ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    trainer = Trainer(config, images)
    trainer.run(metrics_path=metrics, checkpoint_path=out / "checkpoint.bin")
    return trainer


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
