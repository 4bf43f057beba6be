"""Miniature ViT encoder and a multi-stage hierarchical variant, both with feature taps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .nn import INIT_STD, LayerNorm, Linear, MLP, Module, param, trunc_normal
from .tensor import Tensor, ShapeError


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 8
    width: int = 128
    heads: int = 4
    variant: Literal["vit", "hierarchical"] = "vit"
    taps: int = 4
    mlp_ratio: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def out_width(self) -> int:
        """Width of the global representation (last stage width for hierarchical)."""
        if self.variant == "hierarchical":
            return self.width * 2 ** (self.taps - 1)
        return self.width

    def validate(self) -> None:
        if self.variant not in ("vit", "hierarchical"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if not 1 <= self.taps < self.depth:
            raise ValueError(f"need 1 <= taps < depth, got taps={self.taps} depth={self.depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.variant == "hierarchical" and self.grid % 2 ** (self.taps - 1):
            raise ValueError(f"token grid {self.grid} cannot be halved {self.taps - 1} times")


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, N+1, C) with the class token at index 0, or (B, N, C)
    grid_h: int
    grid_w: int
    has_class_token: bool

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def patch_tokens(self) -> Tensor:
        return self.tokens[:, 1:] if self.has_class_token else self.tokens


@dataclass
class HierarchyFeatures:
    """Tapped patch-token maps ordered shallow to deep; class token never included."""

    features: list[Tensor]  # each (B, gh*gw, C_k)
    grids: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(zip(self.features, self.grids))


def hierarchy_indices(depth: int, taps: int) -> list[int]:
    """Zero-based block indices to tap: ``floor(L/K)*k - 1`` for k < K, then ``L - 1``.

    >>> hierarchy_indices(12, 4)
    [2, 5, 8, 11]
    """
    if taps < 1:
        raise ValueError(f"tap count must be >= 1, got {taps}")
    if taps >= depth:
        raise ValueError(f"tap count {taps} must be smaller than depth {depth}")
    step = depth // taps
    return [step * k - 1 for k in range(1, taps)] + [depth - 1]


def patchify(images: np.ndarray | Tensor, patch: int) -> Tensor:
    """``(B, H, W, 3) -> (B, N, P*P*3)``, patches in row-major grid order."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    b, h, w, c = x.shape
    x = x.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: Tensor, grid_h: int, grid_w: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = tokens.shape[0]
    c = tokens.shape[-1] // (patch * patch)
    x = tokens.reshape(b, grid_h, grid_w, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * patch, grid_w * patch, c)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._scale = (dim // heads) ** -0.5

    def probs(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, t, c = x.shape
        h = self._heads
        flat = x.reshape(b * t, c)
        w, bias = self.qkv.weight, self.qkv.bias
        # slice the (small) fused weight rather than the (large) fused activation
        q, k, v = (T.linear(flat, w[:, i * c:(i + 1) * c], bias[i * c:(i + 1) * c])
                   .reshape(b, t, h, c // h).transpose(0, 2, 1, 3) for i in range(3))
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * self._scale)
        return att, v

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        att, v = self.probs(x)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng, activation="gelu")

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """Halve the token grid per side and map the 4C stacked channels to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.reduction = Linear(4 * dim, 2 * dim, rng)

    def __call__(self, x: Tensor, grid_h: int, grid_w: int) -> Tensor:
        b, _, c = x.shape
        merged = T.patch_merge(x.reshape(b, grid_h, grid_w, c))
        return self.reduction(merged.reshape(b, (grid_h // 2) * (grid_w // 2), 4 * c))


class Encoder(Module):
    """ViT (class token, single resolution) or hierarchical (pooled, one stage per tap)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator) -> None:
        config.validate()
        self._config = config
        cfg = config
        c = cfg.width
        self.patch_proj = Linear(cfg.patch_size ** 2 * 3, c, rng)
        n_tok = cfg.num_patches + (1 if cfg.variant == "vit" else 0)
        if cfg.variant == "vit":
            self.cls_token = param(trunc_normal(rng, (1, 1, c), INIT_STD))
        self.pos_embed = param(trunc_normal(rng, (1, n_tok, c), INIT_STD))

        self._tap_idx = hierarchy_indices(cfg.depth, cfg.taps)
        blocks, merges = [], []
        stage = 0
        for i in range(cfg.depth):
            scale = 2 ** stage if cfg.variant == "hierarchical" else 1
            blocks.append(Block(c * scale, cfg.heads * scale, cfg.mlp_ratio, rng))
            if cfg.variant == "hierarchical" and i in self._tap_idx and i != cfg.depth - 1:
                merges.append(PatchMerging(c * scale, rng))
                stage += 1
        self.blocks = blocks
        self.merges = merges

    @property
    def config(self) -> EncoderConfig:
        return self._config

    @property
    def tap_indices(self) -> list[int]:
        return list(self._tap_idx)

    def patch_embed(self, images: np.ndarray | Tensor) -> TokenSequence:
        cfg = self._config
        shape = images.shape
        if len(shape) != 4 or shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError(f"patch_embed: expected (B, {cfg.image_size}, {cfg.image_size}, 3) "
                             f"images, got {tuple(shape)}")
        b = shape[0]
        tokens = self.patch_proj(patchify(images, cfg.patch_size))
        if cfg.variant == "vit":
            cls = self.cls_token + np.zeros((b, 1, cfg.width))
            tokens = T.concat([cls, tokens], axis=1)
        tokens = tokens + self.pos_embed
        return TokenSequence(tokens, cfg.grid, cfg.grid, cfg.variant == "vit")

    def encode_with_taps(self, seq: TokenSequence) -> tuple[Tensor, HierarchyFeatures]:
        """Run every block; return the global representation and the tapped patch maps."""
        x = seq.tokens
        gh, gw = seq.grid_h, seq.grid_w
        feats, grids = [], []
        merge = iter(self.merges)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i in self._tap_idx:
                feats.append(x[:, 1:] if seq.has_class_token else x)
                grids.append((gh, gw))
                if self._config.variant == "hierarchical" and i != len(self.blocks) - 1:
                    x = next(merge)(x, gh, gw)
                    gh, gw = gh // 2, gw // 2
        if seq.has_class_token:
            rep = x[:, 0]
        else:
            rep = x.mean(axis=1)
        return rep, HierarchyFeatures(feats, grids)

    def __call__(self, images: np.ndarray | Tensor) -> tuple[Tensor, HierarchyFeatures]:
        return self.encode_with_taps(self.patch_embed(images))

    def represent(self, images: np.ndarray) -> np.ndarray:
        """Global representation without recording a tape."""
        with T.no_grad():
            rep, _ = self(images)
        return rep.data

    def attention_map(self, seq: TokenSequence, block: int, head: int) -> np.ndarray:
        """Class-token attention over the N patch keys at ``block``/``head``, shape (B, N).

        The class token's own key is left out and the weights are renormalised,
        so each row sums to one over patches.
        """
        if not seq.has_class_token:
            raise ValueError("attention_map needs a class token; the hierarchical variant has none")
        if not 0 <= block < len(self.blocks):
            raise IndexError(f"block {block} out of range [0, {len(self.blocks)})")
        heads = self._config.heads
        if not 0 <= head < heads:
            raise IndexError(f"head {head} out of range [0, {heads})")
        with T.no_grad():
            x = seq.tokens
            for blk in self.blocks[:block]:
                x = blk(x)
            blk = self.blocks[block]
            b, t, c = x.shape
            d = c // heads
            qkv = blk.attn.qkv(blk.norm1(x)).data.reshape(b, t, 3, heads, d)
            q = qkv[:, 0, 0, head]          # (B, d)  class query
            k = qkv[:, 1:, 1, head]         # (B, N, d) patch keys
            logits = Tensor(np.einsum("bd,bnd->bn", q, k) * d ** -0.5)
            return T.softmax(logits).data
