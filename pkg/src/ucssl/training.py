"""Pretext training loop, classifier training (supervised baselines and SSL
fine-tuning), class-weighted cross-entropy, and checkpoints.

Every source of randomness is keyed by explicit seeds: batch order by
``(seed, epoch)``, augmentation by ``(seed, epoch, record_index)``, module
initialization by ``seed``. With one CPU thread the runs are bit-exact, which
is the default nondeterminism budget.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ucssl import NUM_CLASSES
from ucssl.archive import load_arrays, save_arrays
from ucssl.augmentations import augment, classifier_augment, eval_augment
from ucssl.backbone import ClassifierHead, EncoderSpec, build_encoder, freeze, pool
from ucssl.datasets import ClassWeights, DatasetView, Manifest, SplitPlan, class_weights, split_view, subsample
from ucssl.errors import ValidationError
from ucssl.evaluation import MetricsReport, ResultRow, confusion, metrics
from ucssl.pretext.base import PretextMethod
from ucssl.pretext.moco import MoCo

RESULT_SCHEMA_VERSION = 1
_WARMUP_TAG = 2**31 - 1  # seed slot reserved for queue warm-up views


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def _set_lr(optimizer: torch.optim.Optimizer, factor: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = g["initial_lr"] * factor


# ---------------------------------------------------------------- losses

def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Weighted mean of per-sample NLL: ``sum w[y] * nll / sum w[y]``.

    ``weights`` is a ClassWeights, a length-C sequence/tensor, or None for
    uniform (plain cross-entropy).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValidationError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not align")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValidationError(f"labels must lie in 0..{logits.shape[1] - 1}")
    nll = -F.log_softmax(logits, dim=1).gather(1, labels[:, None])[:, 0]
    if weights is None:
        return nll.mean()
    if isinstance(weights, ClassWeights):
        weights = weights.as_array()
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64) if not torch.is_tensor(weights) else weights)
    if w.shape != (logits.shape[1],):
        raise ValidationError(f"expected {logits.shape[1]} class weights, got shape {tuple(w.shape)}")
    wl = w.to(logits.dtype)[labels]
    return (wl * nll).sum() / wl.sum()


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """Named module states plus optimizer state and loop position."""

    states: dict[str, dict[str, torch.Tensor]]
    optimizer: dict | None = None
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    arrays: dict[str, torch.Tensor] = {}
    for module, state in ckpt.states.items():
        if "/" in module:
            raise ValidationError(f"module name {module!r} must not contain '/'")
        for k, v in state.items():
            arrays[f"{module}/{k}"] = v
    optim_meta = None
    if ckpt.optimizer is not None:
        scalars: dict[str, dict] = {}
        for pid, st in ckpt.optimizer["state"].items():
            for k, v in st.items():
                if torch.is_tensor(v):
                    arrays[f"optim/{pid}/{k}"] = v
                else:
                    scalars.setdefault(str(pid), {})[k] = v
        optim_meta = {"param_groups": ckpt.optimizer["param_groups"], "scalars": scalars}
    meta = {
        "modules": sorted(ckpt.states),
        "optimizer": optim_meta,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash or config_hash(ckpt.config),
        "extra": ckpt.extra,
    }
    path = Path(path)
    save_arrays(path, arrays, meta)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if "modules" not in meta:
        raise ValidationError(f"{path} is a weight archive, not a training checkpoint")
    states: dict[str, dict[str, torch.Tensor]] = {m: {} for m in meta["modules"]}
    optim_state: dict[int, dict] = {}
    for name, t in arrays.items():
        head, _, rest = name.partition("/")
        if head == "optim" and meta.get("optimizer") is not None:
            pid, _, k = rest.partition("/")
            optim_state.setdefault(int(pid), {})[k] = t
        else:
            states.setdefault(head, {})[rest] = t
    optimizer = None
    if meta.get("optimizer") is not None:
        for pid, sc in meta["optimizer"]["scalars"].items():
            optim_state.setdefault(int(pid), {}).update(sc)
        optimizer = {"state": optim_state, "param_groups": meta["optimizer"]["param_groups"]}
    ckpt = Checkpoint(states, optimizer, meta["step"], meta["epoch"], meta["config"], meta["config_hash"], meta.get("extra", {}))
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        warnings.warn(f"checkpoint {path} was written under config {ckpt.config_hash}, current config is {expected_hash}",
                      stacklevel=2)
    return ckpt


# ---------------------------------------------------------------- pretext loop

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # extra mid-epoch checkpoint period in steps; 0 = epoch ends only

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")


@dataclass
class PretrainResult:
    epoch_losses: list[float]
    step_losses: list[float]
    checkpoint: Path | None
    steps: int


class Interrupted(RuntimeError):
    """Raised after a resumable checkpoint has been written."""


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _adamw(groups, weight_decay: float) -> torch.optim.AdamW:
    opt = torch.optim.AdamW(groups, weight_decay=weight_decay)
    for g in opt.param_groups:
        g["initial_lr"] = g["lr"]
    return opt


def _write_curve(path: Path, losses: Sequence[float]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for e, v in enumerate(losses):
            w.writerow((e, repr(float(v))))
    tmp.replace(path)


def pretrain(
    method: PretextMethod,
    view: DatasetView,
    cfg: PretrainConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    config_snapshot: Mapping | None = None,
    should_stop: Callable[[int], bool] | None = None,
) -> PretrainResult:
    """Label-free training of ``method`` on ``view``.

    Writes ``checkpoints/last.safetensors`` and ``curves.csv`` under
    ``out_dir`` when given. ``should_stop(step)`` is polled between steps;
    when it returns True a resumable checkpoint is written and
    :class:`Interrupted` is raised. ``resume`` continues from that checkpoint.
    """
    side = method.encoder.spec.input_side
    images = view.images(side)
    n = len(images)
    if n < cfg.batch_size:
        raise ValidationError(f"pretext set of {n} images is smaller than one batch ({cfg.batch_size})")
    per_epoch = n // cfg.batch_size  # drop_last keeps batch statistics and the queue aligned
    total = per_epoch * cfg.epochs
    snapshot = dict(config_snapshot or {"pretrain": asdict(cfg), "method": method.name})
    snapshot.setdefault("encoder_spec", asdict(method.encoder.spec))
    chash = config_hash(snapshot)
    ckpt_path = Path(out_dir) / "checkpoints" / "last.safetensors" if out_dir is not None else None

    params = [p for p in method.parameters() if p.requires_grad]
    optimizer = _adamw([{"params": params, "lr": cfg.lr}], cfg.weight_decay)
    step, epoch, pos = 0, 0, 0
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    current: list[float] = []

    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {out_dir}")
        ck = load_checkpoint(ckpt_path, chash)
        method.load_state_dict(ck.states["method"])
        optimizer.load_state_dict(ck.optimizer)
        step, epoch = ck.step, ck.epoch
        pos = ck.extra["position"]
        epoch_losses = list(ck.extra["epoch_losses"])
        step_losses = list(ck.extra["step_losses"])
        current = list(ck.extra["current"])
    elif isinstance(method, MoCo) and int(method.queue.filled) == 0 and total > 0:
        _warm_moco(method, images, cfg)

    def checkpoint() -> Path | None:
        if ckpt_path is None:
            return None
        state = Checkpoint(
            states={"method": method.state_dict(), "encoder": method.encoder.state_dict()},
            optimizer=optimizer.state_dict(), step=step, epoch=epoch, config=snapshot, config_hash=chash,
            extra={"position": pos, "epoch_losses": epoch_losses, "step_losses": step_losses, "current": current},
        )
        save_checkpoint(ckpt_path, state)
        _write_curve(ckpt_path.parent.parent / "curves.csv", epoch_losses)
        return ckpt_path

    method.train()
    while epoch < cfg.epochs:
        order = _epoch_order(n, cfg.seed, epoch)
        while pos < per_epoch:
            if should_stop is not None and should_stop(step):
                checkpoint()
                raise Interrupted(f"stopped after {step} steps")
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            seeds = [(cfg.seed, epoch, int(view.indices[i])) for i in idx]
            _set_lr(optimizer, cosine_lr(1.0, step, total))
            views = method.views(images[idx], seeds)
            loss = method.loss(views)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite pretext loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            method.after_step()
            value = float(loss.detach())
            step_losses.append(value)
            current.append(value)
            step += 1
            pos += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint()
        epoch_losses.append(float(np.mean(current)))
        current = []
        epoch += 1
        pos = 0
        checkpoint()
    path = checkpoint()
    return PretrainResult(epoch_losses, step_losses, path, step)


@torch.no_grad()
def _warm_moco(method: MoCo, images: np.ndarray, cfg: PretrainConfig) -> None:
    """Fill the key queue with real keys before the first step."""
    b = cfg.batch_size
    n_batches = method.queue.capacity // b
    order = np.random.default_rng([cfg.seed, _WARMUP_TAG]).permutation(len(images))
    per_epoch = len(images) // b
    for k in range(n_batches):
        j = k % per_epoch
        idx = order[j * b:(j + 1) * b]
        views = method.views(images[idx], [(cfg.seed, _WARMUP_TAG, k, int(i)) for i in idx])
        method.warm_queue(views)


# ---------------------------------------------------------------- classifier training

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "finetune"  # or "supervised"
    data_fraction: float = 1.0
    class_weighting: bool = False
    freeze_backbone: bool = False
    lr: float = 1e-3
    lr_backbone_scale: float = 1.0
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping
    classifier_widths: tuple[int, int] = (512, 128)
    val_fraction: float = 0.2  # held out of the fine-tune split for model selection

    def __post_init__(self):
        if self.mode not in ("supervised", "finetune"):
            raise ValidationError(f"unknown training mode {self.mode!r}")
        if not 0 < self.data_fraction <= 1:
            raise ValidationError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.lr_backbone_scale < 0:
            raise ValidationError("lr_backbone_scale must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 0:
            raise ValidationError("epochs, batch_size and early_stop_patience must be non-negative (batch_size >= 1)")
        if not 0 < self.val_fraction < 1:
            raise ValidationError("val_fraction must be in (0, 1)")
        object.__setattr__(self, "classifier_widths", tuple(int(w) for w in self.classifier_widths))

    @property
    def encoder_frozen(self) -> bool:
        # a zero backbone learning rate is treated as a frozen probe, BN statistics included
        return self.freeze_backbone or self.lr_backbone_scale == 0


class Classifier(nn.Module):
    """Encoder, global average pooling and the 3-layer head."""

    def __init__(self, encoder: nn.Module, widths: tuple[int, int], seed: int, frozen: bool):
        super().__init__()
        self.encoder = encoder
        self.frozen = frozen
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.head = ClassifierHead(encoder.channels[-1], widths)
        if frozen:
            freeze(self.encoder)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(pool(self.encoder(x)))


@dataclass
class RunResult:
    """Outcome of one classifier run. JSON fields (schema version 1):

    ``schema_version, method, fraction, group, seed, config, history,
    best_epoch, best_checkpoint, report, val_report, train_counts, wall_time``.
    ``history`` holds one dict per completed epoch with keys
    ``epoch, lr, train_loss, val_accuracy, val_f1``; ``report`` is the Test
    MetricsReport of the Validation-best epoch.
    """

    method: str
    fraction: float
    config: dict
    history: list[dict]
    report: MetricsReport
    best_epoch: int
    seed: int
    wall_time: float
    best_checkpoint: str | None = None
    val_report: MetricsReport | None = None
    train_counts: dict = field(default_factory=dict)
    group: str = ""

    def to_row(self) -> ResultRow:
        r = self.report
        return ResultRow(self.method, self.fraction, r.accuracy, r.macro_precision, r.macro_recall, r.f1, self.group)

    def to_json(self) -> str:
        d = {
            "schema_version": RESULT_SCHEMA_VERSION,
            "method": self.method, "fraction": self.fraction, "group": self.group, "seed": self.seed,
            "config": self.config, "history": self.history, "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint, "report": self.report.to_dict(),
            "val_report": self.val_report.to_dict() if self.val_report else None,
            "train_counts": {str(k): v for k, v in self.train_counts.items()}, "wall_time": self.wall_time,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        d = json.loads(text)
        if d.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise ValidationError(f"unsupported result schema {d.get('schema_version')!r}")
        return cls(
            method=d["method"], fraction=d["fraction"], config=d["config"], history=d["history"],
            report=MetricsReport.from_dict(d["report"]), best_epoch=d["best_epoch"], seed=d["seed"],
            wall_time=d["wall_time"], best_checkpoint=d["best_checkpoint"],
            val_report=MetricsReport.from_dict(d["val_report"]) if d["val_report"] else None,
            train_counts={int(k): v for k, v in d["train_counts"].items()}, group=d["group"],
        )

    def comparable(self) -> dict:
        """Everything except wall time, for reproducibility checks."""
        d = json.loads(self.to_json())
        d.pop("wall_time")
        d.pop("best_checkpoint")
        return d


def _eval_tensor(images: np.ndarray, side: int) -> torch.Tensor:
    cfg = eval_augment(side)
    rng = np.random.default_rng(0)  # eval pipeline draws nothing
    return torch.from_numpy(np.stack([augment(img, cfg, rng) for img in images]))


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    out = [model(x[i:i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
    model.train(was)
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def evaluate(model: nn.Module, x: torch.Tensor, labels: np.ndarray) -> MetricsReport:
    return metrics(confusion(predict(model, x).tolist(), labels.tolist(), NUM_CLASSES))


def fit(
    encoder: nn.Module,
    train: DatasetView,
    val: DatasetView,
    test: DatasetView,
    cfg: TrainConfig,
    method: str,
    out_dir: str | Path | None = None,
    config_snapshot: Mapping | None = None,
) -> RunResult:
    """Train a fresh head (and optionally the encoder); select on Validation macro F1; report Test."""
    if len(train) == 0:
        raise ValidationError("empty training subsample")
    if len(val) == 0 or len(test) == 0:
        raise ValidationError("validation and test splits must be non-empty")
    start = time.perf_counter()
    side = encoder.spec.input_side
    model = Classifier(encoder, cfg.classifier_widths, cfg.seed, cfg.encoder_frozen)
    groups = [{"params": list(model.head.parameters()), "lr": cfg.lr}]
    if not cfg.encoder_frozen:
        groups.append({"params": list(model.encoder.parameters()), "lr": cfg.lr * cfg.lr_backbone_scale})
    optimizer = _adamw(groups, cfg.weight_decay)

    train_images = train.images(side)
    train_labels = torch.from_numpy(train.labels)
    weights = class_weights(train.class_counts()) if cfg.class_weighting else None
    x_val, y_val = _eval_tensor(val.images(side), side), val.labels
    x_test, y_test = _eval_tensor(test.images(side), side), test.labels
    aug = classifier_augment(side)

    n = len(train)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = per_epoch * cfg.epochs
    history: list[dict] = []
    best_f1, best_epoch, best_state = -1.0, -1, None
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = _epoch_order(n, cfg.seed, epoch)
        losses = []
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # a lone sample would make batch norm degenerate
            x = torch.from_numpy(np.stack([
                augment(train_images[i], aug, np.random.default_rng([cfg.seed, epoch, int(train.indices[i])]))
                for i in idx
            ]))
            lr_factor = cosine_lr(1.0, step, total)
            _set_lr(optimizer, lr_factor)
            loss = weighted_cross_entropy(model(x), train_labels[idx], weights)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step += 1
        val_report = evaluate(model, x_val, y_val)
        history.append({
            "epoch": epoch, "lr": cfg.lr * cosine_lr(1.0, step, total),
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_accuracy": val_report.accuracy, "val_f1": val_report.f1,
        })
        if val_report.f1 > best_f1:
            best_f1, best_epoch, stale = val_report.f1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    best_val = evaluate(model, x_val, y_val)
    report = evaluate(model, x_test, y_test)

    best_path = None
    if out_dir is not None:
        best_path = Path(out_dir) / "checkpoints" / "best.safetensors"
        save_checkpoint(best_path, Checkpoint(
            states={"encoder": model.encoder.state_dict(), "head": model.head.state_dict()},
            step=step, epoch=best_epoch, config=dict(config_snapshot or {"train": asdict(cfg)}),
        ))
    return RunResult(
        method=method, fraction=float(cfg.data_fraction),
        config=dict(config_snapshot or {"train": _jsonable(asdict(cfg))}),
        history=history, report=report, best_epoch=best_epoch, seed=cfg.seed,
        wall_time=time.perf_counter() - start, best_checkpoint=str(best_path) if best_path else None,
        val_report=best_val, train_counts=train.class_counts(),
    )


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=list))


def _require(split: SplitPlan, *names: str) -> None:
    missing = [n for n in names if n not in split.split_names]
    if missing:
        raise ValidationError(f"split is missing {missing}; has {split.split_names}")


def train_supervised(
    cfg: TrainConfig,
    manifest: Manifest,
    split: SplitPlan,
    spec: EncoderSpec | None = None,
    encoder: nn.Module | None = None,
    method: str = "Supervised",
    out_dir: str | Path | None = None,
    config_snapshot: Mapping | None = None,
) -> RunResult:
    """Baseline on a train/val/test split: Train x data_fraction, select on val, report test.

    ``encoder`` carries imported weights; otherwise one is built from ``spec``
    with random initialization (desk mode).
    """
    _require(split, "train", "val", "test")
    if encoder is None:
        if spec is None:
            raise ValidationError("either an encoder or an EncoderSpec is required")
        encoder = build_encoder(spec, cfg.seed)
    train = subsample(split.view(manifest, "train"), cfg.data_fraction, cfg.seed)
    return fit(encoder, train, split.view(manifest, "val"), split.view(manifest, "test"), cfg, method,
               out_dir, config_snapshot)


def finetune_views(manifest: Manifest, split: SplitPlan, cfg: TrainConfig) -> tuple[DatasetView, DatasetView, DatasetView]:
    """(train subsample, validation, test) drawn from the fine-tune and test splits."""
    _require(split, "finetune", "test")
    pool_view, val = split_view(split.view(manifest, "finetune"), (1 - cfg.val_fraction, cfg.val_fraction), split.seed + 1)
    return subsample(pool_view, cfg.data_fraction, cfg.seed), val, split.view(manifest, "test")


def encoder_from_checkpoint(pretrained: Checkpoint | str | Path, spec: EncoderSpec | None = None, seed: int = 0) -> nn.Module:
    ckpt = pretrained if isinstance(pretrained, Checkpoint) else load_checkpoint(pretrained)
    if "encoder" not in ckpt.states:
        raise ValidationError("incompatible checkpoint: no encoder state")
    if spec is None:
        raw = ckpt.config.get("encoder_spec")
        if raw is None:
            raise ValidationError("incompatible checkpoint: no encoder spec recorded")
        spec = EncoderSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    encoder = build_encoder(spec, seed)
    try:
        encoder.load_state_dict(ckpt.states["encoder"])
    except RuntimeError as exc:
        raise ValidationError(f"incompatible checkpoint: {exc}") from exc
    return encoder


def finetune(
    pretrained: Checkpoint | str | Path | None,
    cfg: TrainConfig,
    manifest: Manifest,
    split: SplitPlan,
    spec: EncoderSpec | None = None,
    method: str = "Scratch",
    out_dir: str | Path | None = None,
    config_snapshot: Mapping | None = None,
) -> RunResult:
    """Fine-tune a pretext encoder (or a fresh one when ``pretrained`` is None)."""
    if pretrained is None:
        if spec is None:
            raise ValidationError("a spec is required to fine-tune from scratch")
        encoder = build_encoder(spec, cfg.seed)
    else:
        encoder = encoder_from_checkpoint(pretrained, spec, cfg.seed)
    train, val, test = finetune_views(manifest, split, cfg)
    return fit(encoder, train, val, test, cfg, method, out_dir, config_snapshot)


__all__ = [
    "PretrainConfig", "PretrainResult", "TrainConfig", "RunResult", "Checkpoint", "Classifier", "Interrupted",
    "weighted_cross_entropy", "pretrain", "fit", "train_supervised", "finetune", "finetune_views",
    "encoder_from_checkpoint", "save_checkpoint", "load_checkpoint", "config_hash", "cosine_lr", "evaluate",
    "predict",
]
