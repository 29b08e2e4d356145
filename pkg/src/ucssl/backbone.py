"""Convolutional encoders with a 4-level feature pyramid, plus heads and
parameter utilities (EMA tracking, freezing, weight import/export).

The residual encoders can run *sparsely*: given a patch mask, masked pixels
are zeroed at the input, every normalization layer computes its statistics
over visible positions only, and every layer output is re-masked. A
convolution whose window centre is masked therefore contributes nothing, and
visible outputs never depend on masked pixel values. Parameter names follow
the torchvision ResNet layout so ImageNet checkpoints map one-to-one.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ucssl import NUM_CLASSES
from ucssl.archive import load_arrays, save_arrays
from ucssl.augmentations import MaskPlan
from ucssl.errors import ValidationError

log = logging.getLogger(__name__)

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class EncoderSpec:
    family: str = "residual_small"
    stage_channels: tuple[int, int, int, int] = (32, 48, 96, 160)
    stage_strides: tuple[int, int, int, int] = PYRAMID_STRIDES
    input_side: int = 64
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_channels: int = 32

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ValidationError("an encoder has exactly 4 pyramid stages")
        if tuple(self.stage_strides) != PYRAMID_STRIDES:
            raise ValidationError(f"pyramid strides must be {PYRAMID_STRIDES}")
        if self.input_side % 32:
            raise ValidationError("input_side must be a multiple of 32")

    @classmethod
    def residual_small(cls, input_side: int = 64) -> "EncoderSpec":
        return cls("residual_small", (32, 48, 96, 160), PYRAMID_STRIDES, input_side, (1, 1, 1, 1), 32)

    @classmethod
    def residual_50(cls, input_side: int = 224) -> "EncoderSpec":
        return cls("residual_50", (256, 512, 1024, 2048), PYRAMID_STRIDES, input_side, (3, 4, 6, 3), 64)


@dataclass
class FeaturePyramid:
    """Feature maps at strides 4, 8, 16, 32 (finest first)."""

    levels: list[torch.Tensor]
    valid_mask: list[torch.Tensor] | None = None  # (B, 1, h, w) floats, 1 = visible

    @property
    def top(self) -> torch.Tensor:
        return self.levels[-1]


class SparseContext:
    """Visible-position masks derived from a (B, gh, gw) patch grid."""

    def __init__(self, masked: torch.Tensor):
        self.visible = (~masked.bool()).float().unsqueeze(1)
        self._cache: dict[tuple[int, int], torch.Tensor] = {}

    def at(self, h: int, w: int) -> torch.Tensor:
        key = (h, w)
        if key not in self._cache:
            gh, gw = self.visible.shape[-2:]
            if h % gh or w % gw:
                raise ValidationError(f"mask grid {gh}x{gw} does not align with a {h}x{w} feature map")
            self._cache[key] = self.visible.repeat_interleave(h // gh, 2).repeat_interleave(w // gw, 3)
        return self._cache[key]


def _vis(ctx: SparseContext | None, x: torch.Tensor):
    return None if ctx is None else ctx.at(x.shape[-2], x.shape[-1])


class MaskedBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm whose batch statistics ignore masked positions."""

    def forward(self, x: torch.Tensor, visible: torch.Tensor | None = None) -> torch.Tensor:
        if visible is None or bool(visible.all()):
            return super().forward(x)
        if not self.training:
            return super().forward(x) * visible
        count = visible.sum()
        denom = count.clamp_min(1.0)
        mean = (x * visible).sum(dim=(0, 2, 3)) / denom
        centered = (x - mean[None, :, None, None]) * visible
        var = (centered * centered).sum(dim=(0, 2, 3)) / denom
        if self.track_running_stats and count > 1:
            with torch.no_grad():
                m = self.momentum if self.momentum is not None else 0.1
                self.running_mean.mul_(1 - m).add_(mean.detach(), alpha=m)
                self.running_var.mul_(1 - m).add_(var.detach() * count / (count - 1), alpha=m)
                self.num_batches_tracked += 1
        y = (x - mean[None, :, None, None]) * torch.rsqrt(var + self.eps)[None, :, None, None]
        if self.affine:
            y = y * self.weight[None, :, None, None] + self.bias[None, :, None, None]
        return y * visible


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1, bias=False)


class Downsample(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(nn.Conv2d(cin, cout, 1, stride, bias=False), MaskedBatchNorm2d(cout))

    def forward(self, x, ctx=None):
        y = self[0](x)
        return self[1](y, _vis(ctx, y))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = conv3x3(cin, width, stride)
        self.bn1 = MaskedBatchNorm2d(width)
        self.conv2 = conv3x3(width, cout)
        self.bn2 = MaskedBatchNorm2d(cout)
        self.downsample = Downsample(cin, cout, stride) if stride != 1 or cin != cout else None

    def forward(self, x, ctx=None):
        out = self.conv1(x)
        out = F.relu(self.bn1(out, _vis(ctx, out)))
        out = self.conv2(out)
        out = self.bn2(out, _vis(ctx, out))
        shortcut = x if self.downsample is None else self.downsample(x, ctx)
        return F.relu(out + shortcut)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = MaskedBatchNorm2d(width)
        self.conv2 = conv3x3(width, width, stride)
        self.bn2 = MaskedBatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = MaskedBatchNorm2d(cout)
        self.downsample = Downsample(cin, cout, stride) if stride != 1 or cin != cout else None

    def forward(self, x, ctx=None):
        out = self.conv1(x)
        out = F.relu(self.bn1(out, _vis(ctx, out)))
        out = self.conv2(out)
        out = F.relu(self.bn2(out, _vis(ctx, out)))
        out = self.conv3(out)
        out = self.bn3(out, _vis(ctx, out))
        shortcut = x if self.downsample is None else self.downsample(x, ctx)
        return F.relu(out + shortcut)


class Stage(nn.Sequential):
    def forward(self, x, ctx=None):
        for block in self:
            x = block(x, ctx)
        return x


class ResidualEncoder(nn.Module):
    """4-stage residual network returning a :class:`FeaturePyramid`."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        block = Bottleneck if spec.family == "residual_50" else BasicBlock
        self.conv1 = nn.Conv2d(3, spec.stem_channels, 7, 2, 3, bias=False)
        self.bn1 = MaskedBatchNorm2d(spec.stem_channels)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        cin = spec.stem_channels
        for i, (cout, n) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
            if cout % block.expansion:
                raise ValidationError(f"stage width {cout} not divisible by block expansion {block.expansion}")
            width = cout // block.expansion
            blocks = [block(cin, width, 1 if i == 0 else 2)]
            blocks += [block(cout, width) for _ in range(n - 1)]
            setattr(self, f"layer{i + 1}", Stage(*blocks))
            cin = cout
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.spec.stage_channels)

    def forward(self, x: torch.Tensor, masked: torch.Tensor | None = None) -> FeaturePyramid:
        ctx = None if masked is None else SparseContext(masked.to(x.device))
        if ctx is not None:
            x = x * ctx.at(x.shape[-2], x.shape[-1])
        x = self.conv1(x)
        x = F.relu(self.bn1(x, _vis(ctx, x)))
        x = self.maxpool(x)
        if ctx is not None:
            x = x * _vis(ctx, x)
        levels = []
        for i in range(4):
            x = getattr(self, f"layer{i + 1}")(x, ctx)
            levels.append(x)
        valid = None if ctx is None else [ctx.at(t.shape[-2], t.shape[-1]) for t in levels]
        return FeaturePyramid(levels, valid)


class ExternalEncoder(nn.Module):
    """Adapter exposing four intermediate nodes of an arbitrary network as a pyramid.

    Each selected output is average-pooled to the nominal side of its stride
    when the wrapped network's own strides differ. Sparse execution is not
    supported for external networks.
    """

    def __init__(self, model: nn.Module, return_nodes: Sequence[str], input_side: int):
        super().__init__()
        from torchvision.models.feature_extraction import create_feature_extractor

        if len(return_nodes) != 4:
            raise ValidationError("exactly four return nodes are required")
        self.body = create_feature_extractor(model, {n: f"l{i}" for i, n in enumerate(return_nodes)})
        self.input_side = input_side
        with torch.no_grad():
            was = self.body.training
            self.body.eval()
            outs = self.body(torch.zeros(1, 3, input_side, input_side))
            self.body.train(was)
        self._channels = tuple(outs[f"l{i}"].shape[1] for i in range(4))
        self.spec = EncoderSpec("external_import", self._channels, PYRAMID_STRIDES, input_side)

    @property
    def channels(self) -> tuple[int, ...]:
        return self._channels

    def forward(self, x, masked=None) -> FeaturePyramid:
        if masked is not None:
            raise ValidationError("sparse encoding is only available for residual encoders")
        outs = self.body(x)
        levels = []
        for i, s in enumerate(PYRAMID_STRIDES):
            t = outs[f"l{i}"]
            side = x.shape[-1] // s
            if t.shape[-1] != side:
                t = F.adaptive_avg_pool2d(t, side)
            levels.append(t)
        return FeaturePyramid(levels)


def vgg19_encoder(input_side: int = 224) -> ExternalEncoder:
    from torchvision.models import vgg19

    return ExternalEncoder(vgg19(weights=None).features, ["9", "18", "27", "36"], input_side)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> nn.Module:
    """Deterministically initialized encoder; does not disturb the global RNG."""
    if spec.family not in ("residual_small", "residual_50"):
        raise ValidationError(f"cannot build family {spec.family!r}; use ExternalEncoder for imports")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ResidualEncoder(spec)


def _check_images(images: torch.Tensor, encoder: nn.Module) -> None:
    side = encoder.spec.input_side
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != side or images.shape[3] != side:
        raise ValidationError(f"expected images of shape (B, 3, {side}, {side}), got {tuple(images.shape)}")


def encode(images: torch.Tensor, encoder: nn.Module) -> FeaturePyramid:
    _check_images(images, encoder)
    return encoder(images)


def mask_tensor(mask, batch: int) -> torch.Tensor:
    """Normalize a MaskPlan, a list of MaskPlans, or a bool array to (B, gh, gw)."""
    if isinstance(mask, MaskPlan):
        t = torch.from_numpy(mask.masked).unsqueeze(0).expand(batch, -1, -1)
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskPlan):
        t = torch.from_numpy(np.stack([m.masked for m in mask]))
    else:
        t = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
        if t.ndim == 2:
            t = t.unsqueeze(0).expand(batch, -1, -1)
    if t.shape[0] != batch:
        raise ValidationError(f"mask batch {t.shape[0]} does not match image batch {batch}")
    return t.bool()


def encode_sparse(images: torch.Tensor, mask, encoder: nn.Module) -> FeaturePyramid:
    _check_images(images, encoder)
    if not isinstance(encoder, ResidualEncoder):
        raise ValidationError("sparse encoding is only available for residual encoders")
    masked = mask_tensor(mask, images.shape[0])
    side = images.shape[-1]
    g = masked.shape[-1]
    if side % g or (side // g) % 32:
        raise ValidationError(f"patch size {side // g if g else '?'} must be a multiple of 32 to align with every pyramid level")
    return encoder(images, masked)


def mlp(dims: Sequence[int], last_bn: bool = False) -> nn.Sequential:
    """Linear-BN-ReLU stack; no normalization or activation after the last layer."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(nn.Linear(a, b, bias=last and not last_bn))
        if not last:
            layers += [nn.BatchNorm1d(b), nn.ReLU(inplace=True)]
        elif last_bn:
            layers.append(nn.BatchNorm1d(b, affine=False))
    return nn.Sequential(*layers)


def projection_head(in_dim: int, hidden: int = 2048, out_dim: int = 256) -> nn.Sequential:
    return mlp([in_dim, hidden, out_dim])


class ClassifierHead(nn.Module):
    """Three fully connected layers producing class logits."""

    def __init__(self, in_dim: int, widths: tuple[int, int] = (512, 128), n_classes: int = NUM_CLASSES):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, widths[0])
        self.fc2 = nn.Linear(widths[0], widths[1])
        self.fc3 = nn.Linear(widths[1], n_classes)

    def forward(self, x):
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


def pool(features) -> torch.Tensor:
    """Global-average-pool the top pyramid level (or a raw NCHW map)."""
    if isinstance(features, FeaturePyramid):
        features = features.top
    if features.ndim == 4:
        return features.mean(dim=(2, 3))
    if features.ndim != 2:
        raise ValidationError(f"cannot pool features of shape {tuple(features.shape)}")
    return features


def project(features, head: nn.Module) -> torch.Tensor:
    x = pool(features)
    first = next(m for m in head.modules() if isinstance(m, nn.Linear))
    if x.shape[1] != first.in_features:
        raise ValidationError(f"projection expects {first.in_features} features, got {x.shape[1]}")
    return head(x)


def classify(features, head: ClassifierHead) -> torch.Tensor:
    x = pool(features)
    if x.shape[1] != head.fc1.in_features:
        raise ValidationError(f"classifier expects {head.fc1.in_features} features, got {x.shape[1]}")
    return torch.softmax(head(x), dim=1)


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, m: float) -> nn.Module:
    """In place: ``target <- m * target + (1 - m) * online`` for every parameter."""
    if not 0 <= m <= 1:
        raise ValidationError(f"momentum must be in [0, 1], got {m}")
    tp = dict(target.named_parameters())
    op = dict(online.named_parameters())
    if tp.keys() != op.keys():
        raise ValidationError(f"parameter names differ: {sorted(tp.keys() ^ op.keys())[:5]}")
    for name, t in tp.items():
        o = op[name]
        if t.shape != o.shape:
            raise ValidationError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(o.shape)}")
        t.mul_(m).add_(o.detach(), alpha=1 - m)
    return target


def freeze(module: nn.Module, names: Callable[[str], bool] | str | None = None) -> nn.Module:
    """Exclude matching parameters from gradient updates.

    ``names`` is a predicate over parameter names, a name prefix, or None for
    every parameter.
    """
    if names is None:
        match = lambda n: True  # noqa: E731
    elif isinstance(names, str):
        prefix = names
        match = lambda n: n == prefix or n.startswith(prefix.rstrip(".") + ".")  # noqa: E731
    else:
        match = names
    for n, p in module.named_parameters():
        if match(n):
            p.requires_grad_(False)
    return module


def trainable(module: nn.Module) -> list[nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def export_weights(module: nn.Module, path: str | Path, prefix: str = "") -> None:
    state = {prefix + k: v for k, v in module.state_dict().items()}
    spec = getattr(module, "spec", None)
    meta = {"spec": spec.__dict__} if spec is not None else {}
    save_arrays(path, state, meta)


@dataclass
class ImportReport:
    loaded: list[str] = field(default_factory=list)
    unmatched_source: list[str] = field(default_factory=list)
    missing_target: list[str] = field(default_factory=list)


def import_weights(
    source: str | Path,
    spec: EncoderSpec,
    name_map: Callable[[str], str | None] | None = None,
    seed: int = 0,
) -> tuple[nn.Module, ImportReport]:
    """Build an encoder for ``spec`` and load matching arrays from ``source``.

    Source names are passed through ``name_map`` (return None to drop a
    name). Classifier weights in the archive (``fc.*``, ``classifier.*``) are
    never loaded; a classifier head is always initialized fresh by the caller.
    """
    arrays, _ = load_arrays(source)
    if not arrays:
        raise ValidationError(f"no arrays in {source}")
    encoder = build_encoder(spec, seed)
    target = encoder.state_dict()
    report = ImportReport()
    new_state = {}
    for name, arr in arrays.items():
        mapped = name_map(name) if name_map else name
        if mapped is None or mapped.startswith(("fc.", "classifier.")) or mapped not in target:
            report.unmatched_source.append(name)
            continue
        if tuple(arr.shape) != tuple(target[mapped].shape):
            raise ValidationError(f"incompatible shape for {mapped}: {tuple(arr.shape)} vs {tuple(target[mapped].shape)}")
        new_state[mapped] = arr.to(target[mapped].dtype)
        report.loaded.append(mapped)
    if not new_state:
        raise ValidationError(f"no array in {source} matches the {spec.family} encoder")
    report.missing_target = sorted(set(target) - set(new_state))
    encoder.load_state_dict(new_state, strict=False)
    if report.unmatched_source or report.missing_target:
        warnings.warn(
            f"partial weight import from {source}: {len(report.unmatched_source)} unmatched source arrays "
            f"({report.unmatched_source[:5]}), {len(report.missing_target)} encoder arrays left at init "
            f"({report.missing_target[:5]})",
            stacklevel=2,
        )
    return encoder, report
