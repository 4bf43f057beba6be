"""Diagnostic dumps: attention maps, reconstruction triptychs, embeddings for t-SNE."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..encoder import Encoder
from .config import AugmentationPolicy
from .data import normalize, write_ppm
from .probe import extract_features

SEPARATOR = 1.0  # white 1-px column between triptych panels


def _prepare_dir(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PermissionError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def _unit_range(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi - lo <= 0 else (a - lo) / (hi - lo)


def triptych(image: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """``input | reconstruction | abs-error`` side by side, width 3W + 2."""
    recon = np.clip(recon, 0.0, 1.0)
    err = np.abs(recon - image)
    sep = np.full((image.shape[0], 1, 3), SEPARATOR)
    return np.concatenate([image, sep, recon, sep, err], axis=1)


def attention_maps(encoder: Encoder, images: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    """Last-block class attention, ``(B, heads, grid, grid)``."""
    cfg = encoder.config
    seq = encoder.patch_embed(normalize(images, policy))
    last = len(encoder.blocks) - 1
    maps = [encoder.attention_map(seq, last, h) for h in range(cfg.heads)]
    return np.stack(maps, axis=1).reshape(len(images), cfg.heads, cfg.grid, cfg.grid)


def dump_diagnostics(trainer, out_dir: str | Path, images: np.ndarray, labels: np.ndarray,
                     num_examples: int = 8) -> dict[str, list[Path]]:
    """Write attention pixmaps, reconstruction triptychs and ``embeddings.csv``.

    ``trainer`` is a restored training state. Attention maps need a class token and are
    skipped for the hierarchical variant; triptychs need the reconstruction branch.
    """
    out = _prepare_dir(out_dir)
    policy = trainer.config.augmentation()
    encoder = trainer.encoder
    examples = images[:num_examples]
    written: dict[str, list[Path]] = {"attention": [], "reconstruction": [], "embeddings": []}

    if encoder.config.variant == "vit":
        maps = attention_maps(encoder, examples, policy)
        for i, per_head in enumerate(maps):
            for h, m in enumerate(per_head):
                path = out / f"attention_{i:03d}_head{h}.ppm"
                write_ppm(path, _unit_range(m))
                written["attention"].append(path)

    if trainer.decoder is not None:
        with T.no_grad():
            _, taps = encoder(normalize(examples, policy))
            recon = trainer.decoder(taps).data
        for i, (img, rec) in enumerate(zip(examples, recon)):
            path = out / f"reconstruction_{i:03d}.ppm"
            write_ppm(path, triptych(img, rec))
            written["reconstruction"].append(path)

    feats = extract_features(encoder, images, policy)
    path = out / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"e{j}" for j in range(feats.shape[1])])
        for i, (lab, row) in enumerate(zip(labels, feats)):
            w.writerow([i, int(lab)] + [repr(float(v)) for v in row])
    written["embeddings"].append(path)
    return written
