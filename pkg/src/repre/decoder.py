"""Lightweight U-Net style pixel decoder over the encoder's tapped features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .encoder import Block, Encoder, HierarchyFeatures, unpatchify
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor

FUSION_LAYER_CHOICES = (1, 2, 4)


@dataclass
class DecoderConfig:
    fusion_operator: Literal["conv", "transformer"] = "conv"
    fusion_layers: int = 2
    taps: int = 4
    # channel width inside the decoder; None keeps each tap's own width
    width: int | None = 32
    heads: int = 4

    def validate(self) -> None:
        if self.fusion_operator not in ("conv", "transformer"):
            raise ValueError(f"unknown fusion operator {self.fusion_operator!r}")
        if self.fusion_layers not in FUSION_LAYER_CHOICES:
            raise ValueError(f"fusion_layers must be one of {FUSION_LAYER_CHOICES}, got {self.fusion_layers}")
        if self.taps < 1:
            raise ValueError("decoder needs at least one tap")
        if self.width is not None and self.width < 1:
            raise ValueError("decoder width must be positive")


def tokens_to_grid(tap: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """``(B, N, C) -> (B, gh, gw, C)`` in patch row-major order."""
    b, n, c = tap.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"tokens_to_grid: {n} tokens do not fill a {grid_h}x{grid_w} grid")
    return tap.reshape(b, grid_h, grid_w, c)


def grid_to_tokens(grid: Tensor) -> Tensor:
    b, h, w, c = grid.shape
    return grid.reshape(b, h * w, c)


class ConvFusion(Module):
    """3x3 conv + ReLU; the first layer maps 2C to C, later ones C to C."""

    def __init__(self, channels: int, layers: int, rng: np.random.Generator) -> None:
        self.convs = [Conv2d(2 * channels if i == 0 else channels, channels, 3, rng)
                      for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return x


class TransformerFusion(Module):
    """Backbone-style transformer blocks over the grid tokens; 2C to C after the first."""

    def __init__(self, channels: int, layers: int, heads: int, rng: np.random.Generator) -> None:
        self.first = Block(2 * channels, heads, 4, rng)
        self.reduce = Linear(2 * channels, channels, rng)
        self.rest = [Block(channels, heads, 4, rng) for _ in range(layers - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, _ = x.shape
        t = self.reduce(self.first(grid_to_tokens(x)))
        for blk in self.rest:
            t = blk(t)
        return t.reshape(b, h, w, t.shape[-1])


class FuseBlock(Module):
    def __init__(self, deep_channels: int, shallow_channels: int, config: DecoderConfig,
                 rng: np.random.Generator) -> None:
        if deep_channels != shallow_channels:
            self.align = Linear(deep_channels, shallow_channels, rng)
        else:
            self.align = None
        if config.fusion_operator == "conv":
            self.fusion = ConvFusion(shallow_channels, config.fusion_layers, rng)
        else:
            self.fusion = TransformerFusion(shallow_channels, config.fusion_layers, config.heads, rng)

    def __call__(self, deep: Tensor, shallow: Tensor) -> Tensor:
        return fuse_block(deep, shallow, self)


def fuse_block(deep: Tensor, shallow: Tensor, block: FuseBlock) -> Tensor:
    """Align ``deep`` to ``shallow`` (2x bilinear + channel map if needed), concat, fuse."""
    (dh, dw), (sh, sw) = deep.shape[1:3], shallow.shape[1:3]
    if (2 * dh, 2 * dw) == (sh, sw):
        deep = T.bilinear_upsample_2x(deep)
    elif (dh, dw) != (sh, sw):
        raise ShapeError(f"fuse_block: cannot align deep grid {dh}x{dw} with shallow grid {sh}x{sw}")
    if block.align is not None:
        deep = block.align(deep)
    if deep.shape[-1] != shallow.shape[-1]:
        raise ShapeError(f"fuse_block: channel mismatch {deep.shape[-1]} vs {shallow.shape[-1]}")
    return block.fusion(T.concat([deep, shallow], axis=-1))


class Decoder(Module):
    """Folds taps deepest-first through K-1 fuse blocks, then a 1x1 conv to P*P*3 pixels."""

    def __init__(self, config: DecoderConfig, tap_channels: list[int], patch_size: int,
                 rng: np.random.Generator) -> None:
        config.validate()
        if len(tap_channels) != config.taps:
            raise ValueError(f"decoder configured for {config.taps} taps, got {len(tap_channels)} channel specs")
        self._config = config
        self._patch = patch_size
        # per-tap linear maps (1x1 convs) into the decoder width
        if config.width is not None:
            self.tap_proj = [Linear(c, config.width, rng) for c in tap_channels]
            chans = [config.width] * len(tap_channels)
        else:
            self.tap_proj = []
            chans = list(tap_channels)
        k = config.taps
        # block j fuses the running deep feature with tap k-2-j
        self.blocks = [FuseBlock(chans[k - 1 - j], chans[k - 2 - j], config, rng)
                       for j in range(k - 1)]
        self.head = Conv2d(chans[0], patch_size * patch_size * 3, 1, rng)

    @classmethod
    def for_encoder(cls, encoder: Encoder, config: DecoderConfig, rng: np.random.Generator) -> "Decoder":
        ecfg = encoder.config
        if config.taps != ecfg.taps:
            raise ValueError(f"decoder taps {config.taps} != encoder taps {ecfg.taps}")
        if ecfg.variant == "hierarchical":
            chans = [ecfg.width * 2 ** i for i in range(ecfg.taps)]
        else:
            chans = [ecfg.width] * ecfg.taps
        return cls(config, chans, ecfg.patch_size, rng)

    @property
    def config(self) -> DecoderConfig:
        return self._config

    def __call__(self, taps: HierarchyFeatures) -> Tensor:
        return self.reconstruct(taps)

    def reconstruct(self, taps: HierarchyFeatures) -> Tensor:
        if len(taps) != self._config.taps:
            raise ValueError(f"reconstruct: got {len(taps)} taps, decoder expects {self._config.taps}")
        grids = [tokens_to_grid(f, gh, gw) for f, (gh, gw) in taps]
        if self.tap_proj:
            grids = [proj(g) for proj, g in zip(self.tap_proj, grids)]
        x = grids[-1]
        for j, blk in enumerate(self.blocks):
            x = blk(x, grids[-2 - j])
        pix = self.head(x)
        b, gh, gw, _ = pix.shape
        return unpatchify(grid_to_tokens(pix), gh, gw, self._patch)


def reconstruction_loss(img, recon: Tensor) -> Tensor:
    """Mean absolute error over every pixel and channel."""
    target = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if target.shape != recon.shape:
        raise ShapeError(f"reconstruction_loss: image {target.shape} vs reconstruction {recon.shape}")
    return T.abs_sum(recon - target) * (1.0 / target.size)


def decoder_cost_ratio(encoder: Encoder, decoder: Decoder | None) -> tuple[float, float]:
    """(decoder params / encoder params, decoder FLOPs / encoder FLOPs) for one image."""
    if decoder is None or decoder.num_parameters() == 0:
        return 0.0, 0.0
    cfg = encoder.config
    img = np.zeros((1, cfg.image_size, cfg.image_size, 3))
    with T.no_grad():
        with T.count_flops() as enc_flops:
            _, taps = encoder(img)
        with T.count_flops() as dec_flops:
            decoder(taps)
    return (decoder.num_parameters() / encoder.num_parameters(),
            dec_flops[0] / enc_flops[0])
