"""SwAV: online clustering onto learnable prototypes with swapped prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ucssl.augmentations import AugmentConfig, MultiCropConfig, multi_crop
from ucssl.backbone import pool, projection_head
from ucssl.errors import ValidationError
from ucssl.pretext.base import PretextMethod, pretext_step


@dataclass(frozen=True)
class SwavConfig:
    temperature: float = 0.1
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    n_prototypes: int = 64
    latent_dim: int = 128
    hidden_dim: int = 2048
    assignment: str = "sinkhorn"  # or "softmax" (greedy, for ablation)
    multi_crop: MultiCropConfig = field(default_factory=MultiCropConfig)

    def __post_init__(self):
        if self.temperature <= 0 or self.sinkhorn_epsilon <= 0:
            raise ValidationError("temperature and sinkhorn_epsilon must be positive")
        if self.sinkhorn_iters < 1:
            raise ValidationError("sinkhorn_iters must be at least 1")
        if self.assignment not in ("sinkhorn", "softmax"):
            raise ValidationError(f"unknown assignment mode {self.assignment!r}")


class PrototypeBank(nn.Module):
    def __init__(self, n_prototypes: int, dim: int):
        super().__init__()
        self.prototypes = nn.Parameter(F.normalize(torch.randn(n_prototypes, dim), dim=1))

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        return z @ self.prototypes.T

    @torch.no_grad()
    def normalize_(self) -> None:
        self.prototypes.copy_(F.normalize(self.prototypes, dim=1))


def normalize_embed(x: torch.Tensor) -> torch.Tensor:
    if (x.detach().norm(dim=1) == 0).any():
        raise ValidationError("cannot project a zero vector onto the unit sphere")
    return F.normalize(x, dim=1)


@torch.no_grad()
def sinkhorn(scores: torch.Tensor, epsilon: float, iters: int) -> torch.Tensor:
    """Equipartitioned soft assignments for a (B, K) score matrix.

    Alternately rescales prototype totals to 1/K and sample totals to 1/B,
    ending on the sample step and multiplying by B, so every row sums to 1.
    """
    if torch.isnan(scores).any():
        raise ValidationError("NaN in assignment scores")
    s = scores.detach().double() / epsilon
    q = torch.exp(s - s.max()).T  # (K, B)
    K, B = q.shape
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(dim=1, keepdim=True)
        q /= K
        q /= q.sum(dim=0, keepdim=True)
        q /= B
    q *= B
    return q.T.to(scores.dtype)


def compute_assignments(embeddings: torch.Tensor, bank: PrototypeBank, cfg: SwavConfig) -> torch.Tensor:
    with torch.no_grad():
        s = bank.scores(embeddings.detach())
        if cfg.assignment == "softmax":
            return torch.softmax(s / cfg.sinkhorn_epsilon, dim=1)
        return sinkhorn(s, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)


def swapped_loss(q_t, q_s, log_p_t, log_p_s) -> torch.Tensor:
    """``mean_b -sum_k (q_s log P_t + q_t log P_s)``."""
    return -(q_s * log_p_t + q_t * log_p_s).sum(dim=1).mean()


def swav_loss(z_t: torch.Tensor, z_s: torch.Tensor, bank: PrototypeBank, cfg: SwavConfig, codes=None) -> torch.Tensor:
    """Swapped prediction between two views. ``codes=(q_t, q_s)`` supplies
    precomputed assignments; otherwise they are computed (without gradient)."""
    if cfg.temperature <= 0:
        raise ValidationError("temperature must be positive")
    if codes is None:
        q_t, q_s = compute_assignments(z_t, bank, cfg), compute_assignments(z_s, bank, cfg)
    else:
        q_t, q_s = (q.detach() for q in codes)
    log_p_t = F.log_softmax(bank.scores(z_t) / cfg.temperature, dim=1)
    log_p_s = F.log_softmax(bank.scores(z_s) / cfg.temperature, dim=1)
    return swapped_loss(q_t, q_s, log_p_t, log_p_s)


def usage_entropy(embeddings: torch.Tensor, bank: PrototypeBank, temperature: float) -> float:
    """Entropy of the batch-averaged prototype distribution (nats)."""
    with torch.no_grad():
        p = torch.softmax(bank.scores(embeddings) / temperature, dim=1).mean(dim=0)
        return float(-(p * p.clamp_min(1e-12).log()).sum())


class SwAV(PretextMethod):
    name = "swav"

    def __init__(self, encoder: nn.Module, cfg: SwavConfig = SwavConfig(), aug: AugmentConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.aug = aug or AugmentConfig(output_side=cfg.multi_crop.global_side)
        self._encoder = encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.projector = projection_head(encoder.channels[-1], cfg.hidden_dim, cfg.latent_dim)
            self.bank = PrototypeBank(cfg.n_prototypes, cfg.latent_dim)

    @property
    def encoder(self) -> nn.Module:
        return self._encoder

    def views(self, images, seeds):
        crops = [multi_crop(img, self.cfg.multi_crop, s, self.aug) for img, s in zip(images, seeds)]
        n = len(crops[0])
        return tuple(torch.from_numpy(np.stack([c[v] for c in crops])) for v in range(n))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return normalize_embed(self.projector(pool(self._encoder(x))))

    def loss(self, views) -> torch.Tensor:
        n_global = self.cfg.multi_crop.n_global
        # crops sharing a resolution go through the encoder together
        sizes = [v.shape[0] for v in views]
        z = []
        start = 0
        while start < len(views):
            end = start
            while end < len(views) and views[end].shape[-1] == views[start].shape[-1]:
                end += 1
            z.extend(self.embed(torch.cat(views[start:end])).split(sizes[start:end]))
            start = end
        log_p = [F.log_softmax(self.bank.scores(zi) / self.cfg.temperature, dim=1) for zi in z]
        total = 0.0
        n_terms = 0
        for i in range(n_global):
            q = compute_assignments(z[i], self.bank, self.cfg)
            for v in range(len(views)):
                if v != i:
                    total = total - (q * log_p[v]).sum(dim=1).mean()
                    n_terms += 1
        # scaled so the two-crop case equals swav_loss exactly
        return total * (2.0 / n_terms)

    def after_step(self) -> None:
        self.bank.normalize_()


def swav_step(model: SwAV, views, optimizer: torch.optim.Optimizer) -> float:
    return pretext_step(model, views, optimizer)


__all__ = [
    "SwavConfig", "PrototypeBank", "SwAV", "normalize_embed", "sinkhorn", "compute_assignments",
    "swapped_loss", "swav_loss", "usage_entropy", "swav_step",
]

