"""Datasets (seeded synthetic shapes, PPM / .npy directories) and two-view augmentation."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import AugmentationPolicy

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        # apex up; base at cy + r
        return (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.6) & (dy >= -r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {kind!r}")


def synthetic_shapes(n: int, seed: int, image_size: int = 32, num_classes: int = 4,
                     noise: float = 0.03) -> tuple[np.ndarray, np.ndarray]:
    """Colored shapes on colored backgrounds; the label is the shape type.

    Returns images ``(n, H, W, 3)`` in [0, 1] and integer labels.
    """
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    h = image_size
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64) + 0.5
    images = np.empty((n, h, h, 3))
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        bg = rng.uniform(0.0, 1.0, 3)
        fg = rng.uniform(0.0, 1.0, 3)
        while np.abs(fg - bg).sum() < 0.9:
            fg = rng.uniform(0.0, 1.0, 3)
        r = rng.uniform(0.25, 0.4) * h
        cy, cx = rng.uniform(0.35, 0.65, 2) * h
        mask = _shape_mask(SHAPES[labels[i]], yy, xx, cy, cx, r)
        img = np.where(mask[..., None], fg, bg)
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


# -- file formats -------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8-bit. ``image`` is (H, W, 3) in [0, 1] or (H, W) grayscale."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"write_ppm: need (H, W, 3) or (H, W), got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(raw: bytes):
    pos = 0
    while True:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        yield raw[start:pos], pos


def read_ppm(path: str | Path) -> np.ndarray:
    """Read P6 (binary) or P3 (ASCII) pixmaps into (H, W, 3) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    toks = _ppm_tokens(raw)
    magic, _ = next(toks)
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"{path}: not a P3/P6 pixmap (magic {magic!r})")
    w = int(next(toks)[0])
    h = int(next(toks)[0])
    maxval_tok, pos = next(toks)
    maxval = int(maxval_tok)
    if magic == b"P6":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        body = raw[pos + 1:]
        count = h * w * 3
        arr = np.frombuffer(body, dtype=dtype, count=count)
    else:
        arr = np.array(raw[pos:].split()[: h * w * 3], dtype=np.int64)
        if arr.size != h * w * 3:
            raise ValueError(f"{path}: truncated P3 data")
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def load_image_dir(path: str | Path, image_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load ``*.ppm`` / ``*.npy`` images. Subdirectory names become class labels,
    files directly under ``path`` get label -1. Files are opened read-only."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    entries: list[tuple[Path, int]] = []
    for f in sorted(root.iterdir()):
        if f.is_file() and f.suffix.lower() in (".ppm", ".npy"):
            entries.append((f, -1))
    for ci, cname in enumerate(classes):
        for f in sorted((root / cname).iterdir()):
            if f.is_file() and f.suffix.lower() in (".ppm", ".npy"):
                entries.append((f, ci))
    if not entries:
        raise ValueError(f"{root}: no .ppm or .npy images found")
    images, labels = [], []
    for f, label in entries:
        img = read_ppm(f) if f.suffix.lower() == ".ppm" else np.load(f, allow_pickle=False).astype(np.float64)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"{f}: expected (H, W, 3), got {img.shape}")
        if image_size is not None and img.shape[:2] != (image_size, image_size):
            raise ValueError(f"{f}: expected {image_size}x{image_size}, got {img.shape[:2]}")
        images.append(img)
        labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)


# -- augmentation -------------------------------------------------------------


def _crop_box(h: int, w: int, policy: AugmentationPolicy, rng: np.random.Generator):
    area = h * w
    lo, hi = policy.crop_scale
    log_r = (math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def resized_crop(image: np.ndarray, top: int, left: int, ch: int, cw: int) -> np.ndarray:
    h, w, _ = image.shape
    if ch < 1 or cw < 1 or top < 0 or left < 0 or top + ch > h or left + cw > w:
        raise ValueError(f"degenerate crop box ({top}, {left}, {ch}, {cw}) for {h}x{w} image")
    if (top, left, ch, cw) == (0, 0, h, w):
        return image.copy()
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode="nearest")
                     for c in range(3)], axis=-1)


_GRAY = np.array([0.299, 0.587, 0.114])
_RGB_TO_YIQ = np.array([[0.299, 0.587, 0.114],
                        [0.596, -0.274, -0.322],
                        [0.211, -0.523, 0.312]])


def hue_rotation(turns: float) -> np.ndarray:
    """3x3 RGB map rotating the YIQ chroma plane by ``turns`` of a full circle; luma is kept."""
    a = 2.0 * math.pi * turns
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, math.cos(a), -math.sin(a)],
                    [0.0, math.sin(a), math.cos(a)]])
    return np.linalg.solve(_RGB_TO_YIQ, rot @ _RGB_TO_YIQ)


def _jitter(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    changed = False
    if rng.uniform() < policy.jitter_prob:
        if policy.brightness > 0:
            img = img * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        if policy.contrast > 0:
            m = img.mean()
            img = (img - m) * rng.uniform(1 - policy.contrast, 1 + policy.contrast) + m
        if policy.saturation > 0:
            gray = img @ _GRAY
            img = (img - gray[..., None]) * rng.uniform(1 - policy.saturation, 1 + policy.saturation) \
                + gray[..., None]
        if policy.hue > 0:
            img = img @ hue_rotation(rng.uniform(-policy.hue, policy.hue)).T
        changed = bool(policy.brightness or policy.contrast or policy.saturation or policy.hue)
    if rng.uniform() < policy.grayscale_prob:
        img = np.repeat((img @ _GRAY)[..., None], 3, axis=-1)
        changed = True
    return np.clip(img, 0.0, 1.0) if changed else img


def augment_view(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """One raw (un-normalised) augmented view."""
    h, w, _ = image.shape
    view = resized_crop(image, *_crop_box(h, w, policy, rng))
    if rng.uniform() < policy.flip_prob:
        view = view[:, ::-1].copy()
    return _jitter(view, policy, rng)


def normalize(images: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    return (images - np.asarray(policy.norm_mean)) / np.asarray(policy.norm_std)


def augment_two_views(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    """``(v1_raw, v1_norm, v2_norm)``; v1_raw is the reconstruction target."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4:
        pairs = [augment_two_views(im, policy, rng) for im in image]
        return tuple(np.stack(p) for p in zip(*pairs))
    v1 = augment_view(image, policy, rng)
    v2 = augment_view(image, policy, rng)
    return v1, normalize(v1, policy), normalize(v2, policy)
