"""MoCo: a query encoder contrasted against a momentum key encoder and a FIFO
queue of past keys."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ucssl.augmentations import AugmentConfig
from ucssl.backbone import ema_update, freeze, pool, projection_head
from ucssl.errors import ValidationError
from ucssl.pretext.base import PretextMethod, pretext_step, stack_two_views


@dataclass(frozen=True)
class MocoConfig:
    temperature: float = 0.07
    momentum: float = 0.999
    queue_capacity: int = 4096
    latent_dim: int = 128
    hidden_dim: int = 2048

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not 0 <= self.momentum <= 1:
            raise ValidationError("momentum must be in [0, 1]")
        if self.queue_capacity < 1:
            raise ValidationError("queue_capacity must be positive")


class FeatureQueue(nn.Module):
    """Ring buffer of unit-norm keys.

    Slots ``[0, filled)`` hold keys. The next write lands at ``cursor``; once
    full, the oldest batch sits at ``cursor`` too, so FIFO order is
    ``cursor, cursor+1, ... (mod K)``.
    """

    def __init__(self, capacity: int, dim: int, norm_tol: float = 1e-4):
        super().__init__()
        if capacity < 1:
            raise ValidationError("queue capacity must be positive")
        self.register_buffer("storage", torch.zeros(capacity, dim))
        self.register_buffer("cursor", torch.zeros((), dtype=torch.long))
        self.register_buffer("filled", torch.zeros((), dtype=torch.long))
        self.norm_tol = norm_tol

    @property
    def capacity(self) -> int:
        return self.storage.shape[0]

    def negatives(self) -> torch.Tensor:
        return self.storage[: int(self.filled)]

    def ordered(self) -> torch.Tensor:
        """Stored keys from oldest to newest."""
        n, c = int(self.filled), int(self.cursor)
        if n < self.capacity:
            return self.storage[:n]
        return torch.cat([self.storage[c:], self.storage[:c]])

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "FeatureQueue":
        b = keys.shape[0]
        if b == 0 or self.capacity % b:
            raise ValidationError(f"batch of {b} keys must divide queue capacity {self.capacity}")
        if keys.shape[1] != self.storage.shape[1]:
            raise ValidationError(f"key dim {keys.shape[1]} != queue dim {self.storage.shape[1]}")
        if ((keys.norm(dim=1) - 1).abs() > self.norm_tol).any():
            raise ValidationError("queued keys must be L2-normalized")
        c = int(self.cursor)
        if c + b > self.capacity:
            raise ValidationError("queue cursor is misaligned with the batch size")
        self.storage[c:c + b] = keys.detach().to(self.storage.dtype)
        self.cursor.fill_((c + b) % self.capacity)
        self.filled.fill_(min(int(self.filled) + b, self.capacity))
        return self


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, negatives, temperature: float) -> torch.Tensor:
    """Mean of ``-log softmax`` of the positive logit among ``[q.k+, q.k-...] / tau``.

    ``negatives`` is a FeatureQueue or a (N, d) tensor; N may be 0.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    if isinstance(negatives, FeatureQueue):
        negatives = negatives.negatives()
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = torch.cat([pos, q @ negatives.to(q.dtype).T], dim=1) / temperature
    # logsumexp subtracts the row max internally
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


class MoCo(PretextMethod):
    name = "moco"

    def __init__(self, encoder: nn.Module, cfg: MocoConfig = MocoConfig(), aug: AugmentConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.aug = aug or AugmentConfig(output_side=encoder.spec.input_side)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.query = nn.ModuleDict({
                "encoder": encoder,
                "projector": projection_head(encoder.channels[-1], cfg.hidden_dim, cfg.latent_dim),
            })
        self.key = freeze(copy.deepcopy(self.query))
        self.queue = FeatureQueue(cfg.queue_capacity, cfg.latent_dim)
        self._pending_keys: torch.Tensor | None = None

    @property
    def encoder(self) -> nn.Module:
        return self.query["encoder"]

    def views(self, images, seeds):
        return stack_two_views(images, self.aug, seeds)

    def embed_query(self, x):
        return F.normalize(self.query["projector"](pool(self.query["encoder"](x))), dim=1)

    @torch.no_grad()
    def embed_key(self, x):
        return F.normalize(self.key["projector"](pool(self.key["encoder"](x))), dim=1)

    def loss(self, views) -> torch.Tensor:
        vq, vk = views
        q = self.embed_query(vq)
        k = self.embed_key(vk)
        self._pending_keys = k
        return info_nce(q, k, self.queue, self.cfg.temperature)

    def after_step(self) -> None:
        ema_update(self.key, self.query, self.cfg.momentum)
        if self._pending_keys is not None:
            self.queue.enqueue(self._pending_keys)
            self._pending_keys = None

    @torch.no_grad()
    def warm_queue(self, views) -> None:
        """Fill the queue with real keys (no gradient) before the first step."""
        self.queue.enqueue(self.embed_key(views[1]))


def moco_step(model: MoCo, views, optimizer: torch.optim.Optimizer) -> float:
    return pretext_step(model, views, optimizer)
