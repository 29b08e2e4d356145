"""BYOL: an online network with a predictor regresses an EMA target network."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ucssl.augmentations import AugmentConfig
from ucssl.backbone import build_encoder, ema_update, freeze, mlp, pool, projection_head
from ucssl.errors import ValidationError
from ucssl.pretext.base import PretextMethod, pretext_step, stack_two_views


@dataclass(frozen=True)
class ByolConfig:
    ema_momentum: float = 0.996
    latent_dim: int = 256
    hidden_dim: int = 2048
    symmetrize: bool = True
    target_init: str = "copy"  # "copy" or "random"

    def __post_init__(self):
        # 1 is accepted: it pins the target, which is useful for ablations
        if not 0 <= self.ema_momentum <= 1:
            raise ValidationError("ema_momentum must be in [0, 1]")
        if self.target_init not in ("copy", "random"):
            raise ValidationError(f"target_init must be 'copy' or 'random', got {self.target_init!r}")


def _check_rows(name: str, x: torch.Tensor) -> None:
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValidationError(f"{name} must be (B, d) with d >= 2, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    if (x.detach().norm(dim=1) == 0).any():
        raise ValidationError(f"{name} has a zero-norm row; normalization is undefined")


def byol_loss(online_prediction: torch.Tensor, target_projection: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between L2-normalized rows, i.e. ``2 - 2 cos``; in [0, 4]."""
    _check_rows("online_prediction", online_prediction)
    _check_rows("target_projection", target_projection)
    p = F.normalize(online_prediction, dim=1)
    z = F.normalize(target_projection, dim=1)
    return (p - z).pow(2).sum(dim=1).mean()


class BYOL(PretextMethod):
    name = "byol"

    def __init__(self, encoder: nn.Module, cfg: ByolConfig = ByolConfig(), aug: AugmentConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.aug = aug or AugmentConfig(output_side=encoder.spec.input_side)
        c = encoder.channels[-1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.online = nn.ModuleDict({
                "encoder": encoder,
                "projector": projection_head(c, cfg.hidden_dim, cfg.latent_dim),
            })
            self.predictor = mlp([cfg.latent_dim, cfg.hidden_dim, cfg.latent_dim])
            if cfg.target_init == "copy":
                self.target = copy.deepcopy(self.online)
            else:
                self.target = nn.ModuleDict({
                    "encoder": build_encoder(encoder.spec, seed + 2),
                    "projector": projection_head(c, cfg.hidden_dim, cfg.latent_dim),
                })
        freeze(self.target)

    @property
    def encoder(self) -> nn.Module:
        return self.online["encoder"]

    def views(self, images, seeds):
        return stack_two_views(images, self.aug, seeds)

    def _online(self, x):
        return self.predictor(self.online["projector"](pool(self.online["encoder"](x))))

    @torch.no_grad()
    def _target(self, x):
        return self.target["projector"](pool(self.target["encoder"](x)))

    def loss(self, views) -> torch.Tensor:
        v1, v2 = views
        loss = byol_loss(self._online(v2), self._target(v1))
        if self.cfg.symmetrize:
            loss = 0.5 * (loss + byol_loss(self._online(v1), self._target(v2)))
        return loss

    def after_step(self) -> None:
        ema_update(self.target, self.online, self.cfg.ema_momentum)


def byol_step(model: BYOL, views, optimizer: torch.optim.Optimizer) -> float:
    return pretext_step(model, views, optimizer)
