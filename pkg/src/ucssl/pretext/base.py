from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from ucssl.augmentations import AugmentConfig, two_views


class PretextMethod(nn.Module):
    """Common surface driven by :func:`ucssl.training.pretrain`.

    Subclasses own every module they train (and any non-gradient state such
    as EMA copies or a feature queue) so one ``state_dict`` checkpoints the
    whole method. ``encoder`` is the network handed to fine-tuning.
    """

    name = "pretext"
    encoder: nn.Module

    def views(self, images: np.ndarray, seeds: Sequence) -> tuple[torch.Tensor, ...]:
        raise NotImplementedError

    def loss(self, views) -> torch.Tensor:
        raise NotImplementedError

    def after_step(self) -> None:
        """Non-gradient updates applied after each optimizer step."""


def stack_two_views(images: np.ndarray, cfg: AugmentConfig, seeds: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [two_views(img, cfg, s) for img, s in zip(images, seeds)]
    a = torch.from_numpy(np.stack([p[0] for p in pairs]))
    b = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return a, b


def pretext_step(method: PretextMethod, views, optimizer: torch.optim.Optimizer) -> float:
    """One gradient step on the method's trainable parameters, then its post-step hook."""
    method.train()
    loss = method.loss(views)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    method.after_step()
    return float(loss.detach())
