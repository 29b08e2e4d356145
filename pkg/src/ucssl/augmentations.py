"""Seeded view generation: two-view pipelines, multi-crop, and patch masks.

Every function takes an explicit seed (an int or a tuple of ints, passed to
``numpy.random.default_rng``) and has no other source of randomness, so a
worker can derive ``(base_seed, epoch, record_index)`` and get the same views
regardless of batch composition or worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from PIL import Image, ImageFilter

from ucssl.errors import ValidationError

Seed = Union[int, Sequence[int]]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    color_jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    output_side: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValidationError(f"crop_scale_range must lie in (0, 1], got {self.crop_scale_range}")
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValidationError(f"{name} must be a probability")
        if self.color_jitter_strength < 0:
            raise ValidationError("color_jitter_strength must be non-negative")
        if self.output_side < 1:
            raise ValidationError("output_side must be positive")
        if any(s <= 0 for s in self.std):
            raise ValidationError("normalization std must be positive")

    @property
    def value_range(self) -> tuple[np.ndarray, np.ndarray]:
        mean, std = np.asarray(self.mean), np.asarray(self.std)
        return (0 - mean) / std, (1 - mean) / std


# Light recipe for the supervised / fine-tuning classifier stage.
def classifier_augment(side: int) -> AugmentConfig:
    return AugmentConfig(crop_scale_range=(0.8, 1.0), flip_prob=0.5, color_jitter_strength=0.0,
                         jitter_prob=0.0, blur_prob=0.0, output_side=side)


def eval_augment(side: int) -> AugmentConfig:
    return AugmentConfig(crop_scale_range=(1.0, 1.0), flip_prob=0.0, color_jitter_strength=0.0,
                         jitter_prob=0.0, blur_prob=0.0, output_side=side)


@dataclass(frozen=True)
class MultiCropConfig:
    n_global: int = 2
    global_side: int = 224
    n_local: int = 4
    local_side: int = 96
    global_scale_range: tuple[float, float] = (0.14, 1.0)
    local_scale_range: tuple[float, float] = (0.05, 0.14)

    def __post_init__(self):
        if self.n_global < 2:
            raise ValidationError("multi-crop needs at least two global crops")
        if self.n_local < 0:
            raise ValidationError("n_local must be non-negative")
        if self.n_local and self.global_side <= self.local_side:
            raise ValidationError("global_side must exceed local_side")

    @property
    def sides(self) -> list[int]:
        return [self.global_side] * self.n_global + [self.local_side] * self.n_local


def _to_pil(image) -> Image.Image:
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3 or 0 in a.shape:
        raise ValidationError(f"expected a non-empty HxWx3 image, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = (np.clip(a, 0.0, 1.0) * 255).round().astype(np.uint8)
    return Image.fromarray(a)


def _crop_box(w: int, h: int, scale: tuple[float, float], rng: np.random.Generator):
    lo, hi = scale
    area = w * h
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            return (x0, y0, x0 + cw, y0 + ch)
    return (0, 0, w, h)


def _jitter(a: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue in a random order (values in [0, 1])."""
    s = 0.8 * strength
    gray_w = np.array([0.299, 0.587, 0.114])
    for op in rng.permutation(4):
        if op == 0:
            a = a * rng.uniform(max(0.0, 1 - s), 1 + s)
        elif op == 1:
            m = (a @ gray_w).mean()
            a = (a - m) * rng.uniform(max(0.0, 1 - s), 1 + s) + m
        elif op == 2:
            g = (a @ gray_w)[..., None]
            a = (a - g) * rng.uniform(max(0.0, 1 - s), 1 + s) + g
        else:
            shift = rng.uniform(-0.2 * strength, 0.2 * strength)
            hsv = np.asarray(Image.fromarray((np.clip(a, 0, 1) * 255).astype(np.uint8)).convert("HSV")).copy()
            hsv[..., 0] = (hsv[..., 0].astype(np.int16) + int(round(shift * 255))) % 256
            a = np.asarray(Image.fromarray(hsv, "HSV").convert("RGB"), dtype=np.float64) / 255
        a = np.clip(a, 0.0, 1.0)
    return a


def augment(image, cfg: AugmentConfig, rng: np.random.Generator, scale=None, side=None) -> np.ndarray:
    """One stochastic view as a normalized float32 CHW array."""
    pil = _to_pil(image)
    side = side or cfg.output_side
    box = _crop_box(pil.width, pil.height, scale or cfg.crop_scale_range, rng)
    pil = pil.resize((side, side), Image.BILINEAR, box=box)
    if rng.random() < cfg.flip_prob:
        pil = pil.transpose(Image.FLIP_LEFT_RIGHT)
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        sigma = rng.uniform(0.1, 2.0) * side / 224
        pil = pil.filter(ImageFilter.GaussianBlur(radius=sigma))
    a = np.asarray(pil, dtype=np.float64) / 255
    if cfg.color_jitter_strength > 0 and rng.random() < cfg.jitter_prob:
        a = _jitter(a, cfg.color_jitter_strength, rng)
    a = (a - np.asarray(cfg.mean)) / np.asarray(cfg.std)
    return np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32)


def _child_rngs(seed: Seed, n: int) -> list[np.random.Generator]:
    entropy = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(e) for e in entropy]).spawn(n)]


def two_views(image, cfg: AugmentConfig, seed: Seed) -> tuple[np.ndarray, np.ndarray]:
    a, b = _child_rngs(seed, 2)
    return augment(image, cfg, a), augment(image, cfg, b)


def multi_crop(image, cfg: MultiCropConfig, seed: Seed, aug: AugmentConfig | None = None) -> list[np.ndarray]:
    """``n_global`` crops at ``global_side`` followed by ``n_local`` at ``local_side``."""
    aug = aug or AugmentConfig(output_side=cfg.global_side)
    rngs = _child_rngs(seed, cfg.n_global + cfg.n_local)
    views = [augment(image, aug, r, cfg.global_scale_range, cfg.global_side) for r in rngs[:cfg.n_global]]
    views += [augment(image, aug, r, cfg.local_scale_range, cfg.local_side) for r in rngs[cfg.n_global:]]
    return views


@dataclass(frozen=True)
class MaskPlan:
    """Patch mask; ``masked[i, j]`` is True when patch (i, j) is hidden."""

    masked: np.ndarray
    patch_size: int
    mask_ratio: float

    @property
    def grid_h(self) -> int:
        return self.masked.shape[0]

    @property
    def grid_w(self) -> int:
        return self.masked.shape[1]

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    def pixel_mask(self) -> np.ndarray:
        return np.kron(self.masked, np.ones((self.patch_size, self.patch_size), dtype=bool)).astype(bool)


def make_mask(image_side: int, patch_size: int, mask_ratio: float, seed: Seed, mode: str = "bernoulli") -> MaskPlan:
    """Independent Bernoulli(mask_ratio) per patch, or exactly ``ceil(ratio * n)`` patches."""
    if patch_size <= 0 or image_side % patch_size:
        raise ValidationError(f"patch_size {patch_size} must divide image_side {image_side}")
    if not 0 <= mask_ratio <= 1:
        raise ValidationError("mask_ratio must be in [0, 1]")
    g = image_side // patch_size
    rng = np.random.default_rng(seed)
    if mode == "bernoulli":
        masked = rng.random((g, g)) < mask_ratio
    elif mode == "exact_count":
        k = math.ceil(mask_ratio * g * g - 1e-12)
        flat = np.zeros(g * g, dtype=bool)
        flat[rng.permutation(g * g)[:k]] = True
        masked = flat.reshape(g, g)
    else:
        raise ValidationError(f"unknown mask mode {mode!r}")
    return MaskPlan(masked, patch_size, float(mask_ratio))
