"""SparK: sparse masked encoding, mask-embedding densification, a U-Net style
decoder, and per-patch normalized pixel regression on masked patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ucssl.augmentations import AugmentConfig, augment, make_mask
from ucssl.backbone import FeaturePyramid, ResidualEncoder, encode_sparse, mask_tensor
from ucssl.errors import ValidationError
from ucssl.pretext.base import PretextMethod, pretext_step

PATCH_EPS = 1e-6


@dataclass(frozen=True)
class SparkConfig:
    patch_size: int = 32
    mask_ratio: float = 0.6
    mask_mode: str = "bernoulli"  # or "exact_count"
    decoder_width: int | None = None  # None: match encoder widths, no projection

    def __post_init__(self):
        if not 0 <= self.mask_ratio <= 1:
            raise ValidationError("mask_ratio must be in [0, 1]")
        if self.mask_mode not in ("bernoulli", "exact_count"):
            raise ValidationError(f"unknown mask_mode {self.mask_mode!r}")
        if self.patch_size <= 0:
            raise ValidationError("patch_size must be positive")


@dataclass
class PatchTargets:
    values: torch.Tensor  # (B, n_patches, patch_pixels)
    means: torch.Tensor  # (B, n_patches)
    stds: torch.Tensor  # (B, n_patches)
    patch_size: int
    eps: float = PATCH_EPS

    def denormalize(self) -> torch.Tensor:
        """Invert the standardization back to a (B, 3, S, S) image."""
        x = self.values * (self.stds + self.eps)[..., None] + self.means[..., None]
        return unpatchify(x, self.patch_size)


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    b, c, h, w = images.shape
    if h % p or w % p:
        raise ValidationError(f"patch size {p} does not divide image size {h}x{w}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, p: int, channels: int = 3) -> torch.Tensor:
    b, n, _ = patches.shape
    g = int(round(n ** 0.5))
    x = patches.reshape(b, g, g, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, g * p, g * p)


def patchify_normalize(images: torch.Tensor, patch_size: int, eps: float = PATCH_EPS) -> PatchTargets:
    """Standardize each patch: ``(x - mean) / (std + eps)``, population std."""
    x = patchify(images, patch_size)
    mean = x.mean(dim=-1)
    # clamp keeps the sqrt differentiable for (near-)constant patches
    std = (x - mean[..., None]).pow(2).mean(dim=-1).clamp_min(1e-12).sqrt()
    return PatchTargets((x - mean[..., None]) / (std + eps)[..., None], mean, std, patch_size, eps)


def masked_patch_mse(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Per-patch MSE averaged over masked patches only; 0 if none is masked.

    ``masked`` is (B, n_patches) bool.
    """
    per_patch = (pred - target).pow(2).mean(dim=-1)
    w = masked.to(per_patch.dtype)
    return (per_patch * w).sum() / w.sum().clamp_min(1.0)


def _masked_flat(mask, batch: int) -> torch.Tensor:
    return mask_tensor(mask, batch).reshape(batch, -1)


def masked_l2(reconstruction: torch.Tensor, targets: PatchTargets, mask) -> torch.Tensor:
    """Compare the patch-normalized reconstruction with the targets on masked patches."""
    pred = patchify_normalize(reconstruction, targets.patch_size, targets.eps).values
    if pred.shape != targets.values.shape:
        raise ValidationError(f"reconstruction patches {tuple(pred.shape)} != targets {tuple(targets.values.shape)}")
    masked = _masked_flat(mask, reconstruction.shape[0])
    if masked.shape[1] != pred.shape[1]:
        raise ValidationError("mask grid does not match the number of patches")
    return masked_patch_mse(pred, targets.values, masked)


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, 2)
        self.conv = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x, skip):
        return F.relu(self.bn(self.conv(self.up(x) + skip)))


class SparkDecoder(nn.Module):
    """Mask embeddings, per-level projections, 3 up-blocks and a 2-layer upsampling head."""

    def __init__(self, encoder_channels, decoder_width: int | None = None):
        super().__init__()
        enc = list(encoder_channels)
        if decoder_width is None:
            widths = enc
        else:
            widths = [max(decoder_width // 2 ** (3 - i), 8) for i in range(4)]
        self.widths = widths
        self.mask_embeddings = nn.ParameterList([nn.Parameter(torch.zeros(1, c, 1, 1)) for c in enc])
        for p in self.mask_embeddings:
            nn.init.trunc_normal_(p, std=0.02)
        self.projections = nn.ModuleList([
            nn.Identity() if c == w else nn.Conv2d(c, w, 1) for c, w in zip(enc, widths)
        ])
        self.up_blocks = nn.ModuleList([UpBlock(widths[i + 1], widths[i]) for i in (2, 1, 0)])
        c0 = widths[0]
        self.head = nn.Sequential(
            nn.ConvTranspose2d(c0, max(c0 // 2, 8), 2, 2), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(max(c0 // 2, 8), max(c0 // 4, 8), 2, 2), nn.ReLU(inplace=True),
            nn.Conv2d(max(c0 // 4, 8), 3, 1),
        )


def densify(pyramid: FeaturePyramid, decoder: SparkDecoder) -> FeaturePyramid:
    """Fill invalid positions with each level's mask embedding, then project."""
    out = []
    for i, feat in enumerate(pyramid.levels):
        emb = decoder.mask_embeddings[i]
        if emb.shape[1] != feat.shape[1]:
            raise ValidationError(f"level {i}: features have {feat.shape[1]} channels, mask embedding {emb.shape[1]}")
        if pyramid.valid_mask is not None:
            v = pyramid.valid_mask[i].bool()
            feat = torch.where(v, feat, emb.expand_as(feat))
        out.append(decoder.projections[i](feat))
    return FeaturePyramid(out)


def decode(dense: FeaturePyramid, decoder: SparkDecoder) -> torch.Tensor:
    """Coarse-to-fine fusion with additive skips, then upsample to full resolution."""
    x = dense.levels[3]
    for block, skip in zip(decoder.up_blocks, (dense.levels[2], dense.levels[1], dense.levels[0])):
        x = block(x, skip)
    return decoder.head(x)


def spark_augment(side: int) -> AugmentConfig:
    return AugmentConfig(crop_scale_range=(0.67, 1.0), flip_prob=0.5, color_jitter_strength=0.0,
                         jitter_prob=0.0, blur_prob=0.0, output_side=side)


class SparK(PretextMethod):
    name = "spark"

    def __init__(self, encoder: ResidualEncoder, cfg: SparkConfig = SparkConfig(), aug: AugmentConfig | None = None, seed: int = 0):
        super().__init__()
        side = encoder.spec.input_side
        if side % cfg.patch_size or cfg.patch_size % 32:
            raise ValidationError(f"patch_size {cfg.patch_size} must divide {side} and be a multiple of 32")
        self.cfg = cfg
        self.aug = aug or spark_augment(side)
        self._encoder = encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.decoder = SparkDecoder(encoder.channels, cfg.decoder_width)

    @property
    def encoder(self) -> nn.Module:
        return self._encoder

    def views(self, images, seeds):
        side = self._encoder.spec.input_side
        x, masks = [], []
        for img, s in zip(images, seeds):
            entropy = [s] if isinstance(s, (int, np.integer)) else list(s)
            x.append(augment(img, self.aug, np.random.default_rng([*entropy, 0])))
            masks.append(make_mask(side, self.cfg.patch_size, self.cfg.mask_ratio, [*entropy, 1], self.cfg.mask_mode).masked)
        return torch.from_numpy(np.stack(x)), torch.from_numpy(np.stack(masks))

    def reconstruct(self, images: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        pyr = encode_sparse(images, masked, self._encoder)
        return decode(densify(pyr, self.decoder), self.decoder)

    def loss(self, views) -> torch.Tensor:
        images, masked = views
        recon = self.reconstruct(images, masked)
        return masked_l2(recon, patchify_normalize(images, self.cfg.patch_size), masked)


def spark_step(model: SparK, views, optimizer: torch.optim.Optimizer) -> float:
    return pretext_step(model, views, optimizer)
