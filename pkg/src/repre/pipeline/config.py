"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..contrastive import HeadConfig
from ..decoder import DecoderConfig
from ..encoder import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.35, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1  # fraction of a full turn of the chroma plane
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    # applied to the encoder input only; the reconstruction target stays raw
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    @classmethod
    def identity(cls, **kw) -> "AugmentationPolicy":
        base = dict(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0,
                    brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, grayscale_prob=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainConfig:
    # encoder
    image_size: int = 32
    patch_size: int = 4
    depth: int = 8
    width: int = 128
    heads: int = 4
    variant: str = "vit"
    taps: int = 4
    # decoder
    reconstruction: bool = True
    fusion_operator: str = "conv"
    fusion_layers: int = 2
    decoder_width: typing.Optional[int] = 32
    # contrastive branch
    contrastive_mode: str = "with_negatives"
    tau: float = 0.2
    momentum: float = 0.99
    queue_size: int = 256
    proj_hidden: typing.Optional[int] = None  # None: twice the encoder output width
    proj_dim: int = 128
    pred_hidden: int = 256
    # uncertainty weights (log-variances)
    s_contrast_init: float = 0.0
    s_reconstruct_init: float = 0.0
    # data
    dataset: str = "synthetic"
    dataset_size: int = 1024
    dataset_seed: int = 0
    num_classes: int = 4
    # augmentation
    crop_scale_min: float = 0.35
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    # optimisation
    batch_size: int = 32
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 0
    # output
    out_dir: str = "runs/default"
    checkpoint_every: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.patch_size, self.depth, self.width,
                             self.heads, self.variant, self.taps)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.fusion_operator, self.fusion_layers, self.taps, self.decoder_width)

    def head_config(self) -> HeadConfig:
        hidden = self.proj_hidden or 2 * self.encoder_config().out_width
        return HeadConfig(hidden, self.proj_dim, self.pred_hidden, self.tau)

    def augmentation(self) -> AugmentationPolicy:
        return AugmentationPolicy(crop_scale=(self.crop_scale_min, self.crop_scale_max),
                                  flip_prob=self.flip_prob, brightness=self.brightness,
                                  contrast=self.contrast, saturation=self.saturation, hue=self.hue,
                                  jitter_prob=self.jitter_prob, grayscale_prob=self.grayscale_prob,
                                  norm_mean=tuple(self.norm_mean), norm_std=tuple(self.norm_std))

    def validate(self) -> None:
        try:
            self.encoder_config().validate()
            if self.reconstruction:
                self.decoder_config().validate()
            self.head_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.contrastive_mode not in ("with_negatives", "without_negatives"):
            raise ConfigError(f"unknown contrastive_mode {self.contrastive_mode!r}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.contrastive_mode == "with_negatives" and self.queue_size == 0 and self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ConfigError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError("hue must lie in [0, 0.5]")
        if not (0.0 <= self.jitter_prob <= 1.0 and 0.0 <= self.grayscale_prob <= 1.0
                and 0.0 <= self.flip_prob <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        if any(s <= 0 for s in self.norm_std):
            raise ConfigError("norm_std entries must be positive")

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        hints = typing.get_type_hints(cls)
        kw = {k: (tuple(v) if _is_tuple(hints[k]) else v) for k, v in d.items()}
        return cls(**kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in hints:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            try:
                kw[key] = _parse(value, hints[key])
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _is_tuple(tp) -> bool:
    return typing.get_origin(tp) is tuple


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def _parse(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse(text, args[0])
    if origin is tuple:
        parts = [p.strip() for p in text.split(",")]
        n = len(typing.get_args(tp))
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text
