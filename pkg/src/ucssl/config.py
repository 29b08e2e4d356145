"""Experiment configuration: one INI document, one section per dataclass.

Every section maps field-for-field onto a dataclass below or onto a config
type owned by another module (``[augment]`` -> AugmentConfig, ``[byol]`` ->
ByolConfig, ...). Values use INI text: booleans ``true``/``false``, ``none``
for optional values, and comma-separated lists for tuples. Absent sections
and keys take the dataclass defaults.

Scalars can be overridden from the environment as
``UCSSL_<SECTION>__<KEY>=value``, e.g. ``UCSSL_PRETRAIN__EPOCHS=2``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from ucssl.augmentations import AugmentConfig, MultiCropConfig
from ucssl.backbone import EncoderSpec
from ucssl.errors import ValidationError
from ucssl.pretext import ByolConfig, MocoConfig, SparkConfig, SwavConfig
from ucssl.training import PretrainConfig, TrainConfig, config_hash

ENV_PREFIX = "UCSSL_"
METHOD_NAMES = ("supervised", "byol", "moco", "swav", "spark")
SSL_METHODS = ("byol", "moco", "swav", "spark")


@dataclass(frozen=True)
class DatasetSection:
    root: str = "data/synthetic"
    layout: str = "class_folders"  # or csv_manifest
    fractions: tuple[float, ...] = (0.5, 0.3, 0.2)  # pretrain / finetune / test
    supervised_fractions: tuple[float, ...] = (0.6, 0.2, 0.2)  # train / val / test
    seed: int = 0
    patient_grouped: bool = False
    # used by the synth command only
    synthetic_per_class: int = 400
    synthetic_imbalanced: bool = False

    def __post_init__(self):
        if self.layout not in ("class_folders", "csv_manifest"):
            raise ValidationError(f"unknown dataset layout {self.layout!r}")
        for name in ("fractions", "supervised_fractions"):
            fr = getattr(self, name)
            if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
                raise ValidationError(f"{name} must be three non-negative values summing to 1, got {fr}")


@dataclass(frozen=True)
class EncoderSection:
    family: str = "residual_small"  # or residual_50
    input_side: int = 64
    weights: str | None = None  # imported weights for the supervised baseline

    def __post_init__(self):
        if self.family not in ("residual_small", "residual_50"):
            raise ValidationError(f"unknown encoder family {self.family!r}")

    def spec(self) -> EncoderSpec:
        return getattr(EncoderSpec, self.family)(self.input_side)


@dataclass(frozen=True)
class MethodSection:
    name: str = "spark"

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValidationError(f"unknown method {self.name!r}; expected one of {METHOD_NAMES}")


@dataclass(frozen=True)
class BenchmarkSection:
    methods: tuple[str, ...] = SSL_METHODS
    pretrain_fractions: tuple[float, ...] = (1.0, 0.5)
    finetune_fractions: tuple[float, ...] = (1.0, 0.5, 0.25)
    class_weighting_variant: bool = True
    workers: int = 1

    def __post_init__(self):
        bad = [m for m in self.methods if m not in SSL_METHODS]
        if bad:
            raise ValidationError(f"unknown benchmark methods {bad}")
        if any(not 0 < f <= 1 for f in (*self.pretrain_fractions, *self.finetune_fractions)):
            raise ValidationError("benchmark fractions must be in (0, 1]")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")


@dataclass(frozen=True)
class EvalSection:
    layout: str = "table4"


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(output_side=64))
    multicrop: MultiCropConfig = field(default_factory=MultiCropConfig)
    byol: ByolConfig = field(default_factory=ByolConfig)
    moco: MocoConfig = field(default_factory=MocoConfig)
    swav: SwavConfig = field(default_factory=SwavConfig)
    spark: SparkConfig = field(default_factory=SparkConfig)
    method: MethodSection = field(default_factory=MethodSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    supervised: TrainConfig = field(default_factory=lambda: TrainConfig(mode="supervised", freeze_backbone=True))
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def method_config(self, name: str | None = None):
        name = name or self.method.name
        if name == "supervised":
            return self.supervised
        if name not in SSL_METHODS:
            raise ValidationError(f"unknown method {name!r}")
        cfg = getattr(self, name)
        return replace(cfg, multi_crop=self.multicrop) if name == "swav" else cfg

    def to_dict(self) -> dict:
        return {s: _section_dict(getattr(self, s)) for s in SECTIONS}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _skipped(f: dataclasses.Field) -> bool:
    # nested dataclasses live in their own section (swav.multi_crop -> [multicrop])
    return dataclasses.is_dataclass(f.default_factory) if f.default_factory is not dataclasses.MISSING else False


def _section_dict(obj) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj) if not _skipped(f)}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _encode(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_encode(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _decode(text: str, hint, where: str):
    text = text.strip()
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if type(None) in args and text.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)]
            return _decode(text, inner[0], where)
        if origin is tuple:
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_decode(t, args[0], where) for t in items)
            if len(items) != len(args):
                raise ValidationError(f"{where}: expected {len(args)} comma-separated values, got {text!r}")
            return tuple(_decode(t, a, where) for t, a in zip(items, args))
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint in (int, float, str):
            return hint(text)
    except ValueError as exc:
        raise ValidationError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from exc
    raise ValidationError(f"{where}: unsupported field type {hint}")


def _build(cls, values: Mapping[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if not _skipped(f)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValidationError(f"[{section}] has unknown keys {sorted(unknown)}")
    kwargs = {k: _decode(v, hints[k], f"[{section}] {k}") for k, v in values.items()}
    return cls(**kwargs)


def _defaults() -> ExperimentConfig:
    return ExperimentConfig()


def _env_overrides(env: Mapping[str, str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for k, v in env.items():
        if not k.startswith(ENV_PREFIX) or "__" not in k:
            continue
        section, _, key = k[len(ENV_PREFIX):].partition("__")
        section, key = section.lower(), key.lower()
        if section in SECTIONS:
            out.setdefault(section, {})[key] = v
    return out


def parse_config(text: str, env: Mapping[str, str] | None = None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse INI text over ``base`` (defaults when None), then apply env overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for s, kv in _env_overrides(env if env is not None else os.environ).items():
        raw.setdefault(s, {}).update(kv)
    base = base or _defaults()
    sections = {}
    for name in SECTIONS:
        current = getattr(base, name)
        values = {k: _encode(v) for k, v in _section_dict(current).items()}
        values.update(raw.get(name, {}))
        sections[name] = _build(type(current), values, name)
    return ExperimentConfig(**sections)


def render_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        parser[name] = {k: _encode(v) for k, v in _section_dict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path: str | Path | None, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", env)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), env)


def desk_config(root: str = "data/synthetic", output: str = "runs") -> ExperimentConfig:
    """Laptop-CPU preset: synthetic 64 px corpus, small residual encoder, short schedules."""
    return ExperimentConfig(
        dataset=DatasetSection(root=root, synthetic_per_class=400),
        encoder=EncoderSection("residual_small", 64),
        augment=AugmentConfig(output_side=64),
        multicrop=MultiCropConfig(n_global=2, global_side=64, n_local=4, local_side=32),
        byol=ByolConfig(hidden_dim=256),
        moco=MocoConfig(hidden_dim=256, queue_capacity=256),
        swav=SwavConfig(hidden_dim=256, n_prototypes=64),
        spark=SparkConfig(patch_size=32),
        pretrain=PretrainConfig(epochs=12, batch_size=32, lr=1e-3),
        train=TrainConfig(mode="finetune", epochs=15, batch_size=32, lr=1e-3),
        supervised=TrainConfig(mode="supervised", freeze_backbone=True, epochs=15, batch_size=32, lr=1e-3),
        output=OutputSection(output),
    )


__all__ = [
    "ExperimentConfig", "DatasetSection", "EncoderSection", "MethodSection", "BenchmarkSection", "EvalSection",
    "OutputSection", "parse_config", "render_config", "load_config", "desk_config", "SECTIONS", "ENV_PREFIX",
    "METHOD_NAMES", "SSL_METHODS",
]
