"""Corpus ingestion, stratified splitting, subsampling and class weights.

Records are always ordered lexicographically by path before any shuffling so
that splits do not depend on file-system enumeration order. All randomness is
drawn from ``numpy.random.default_rng`` seeded with ``(seed, class)`` tuples,
which makes every operation here a pure function of its inputs.
"""
from __future__ import annotations

import csv
import functools
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from ucssl import CLASS_NAMES, NUM_CLASSES
from ucssl.errors import ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
DEFAULT_CLASS_MAP = {name: i for i, name in enumerate(CLASS_NAMES)}
CSV_COLUMNS = ("path", "mes_class", "patient_id", "procedure_id")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    mes_class: int
    patient_id: str | None = None
    procedure_id: str | None = None

    def __post_init__(self):
        if self.mes_class not in range(NUM_CLASSES):
            raise ValidationError(f"mes_class must be in 0..3, got {self.mes_class!r} for {self.path}")


@dataclass(frozen=True)
class Manifest:
    """Ordered image records; ``root`` anchors relative paths."""

    records: tuple[ImageRecord, ...]
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = Counter(r.mes_class for r in self.records)
        return {c: counts.get(c, 0) for c in range(NUM_CLASSES)}

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((r.mes_class for r in self.records), dtype=np.int64, count=len(self.records))

    def resolve(self, i: int) -> Path:
        p = Path(self.records[i].path)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.path, r.mes_class, r.patient_id or "", r.procedure_id or ""])


def reference_counts() -> dict[str, dict[int, int]]:
    """LIMUC per-class counts: ``total`` plus the published pretrain/finetune/test split."""
    text = resources.files("ucssl.data").joinpath("limuc_counts.csv").read_text(encoding="utf-8")
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    return {col: {int(r["mes_class"]): int(r[col]) for r in rows} for col in ("total", "pretrain", "finetune", "test")}


def manifest_from_counts(counts: Mapping[int, int]) -> Manifest:
    """Placeholder manifest with the given per-class sizes (no files behind it)."""
    records = [
        ImageRecord(path=f"{CLASS_NAMES[c]}/{i:06d}.png", mes_class=c)
        for c in sorted(counts)
        for i in range(counts[c])
    ]
    return Manifest(tuple(sorted(records, key=lambda r: r.path)))


def load_manifest(
    root: str | Path,
    layout: str = "class_folders",
    class_map: Mapping[str, int] | None = None,
) -> Manifest:
    """Scan a corpus on disk.

    ``class_folders`` expects ``root/<class_name>/*.png``; ``csv_manifest``
    expects either a CSV file or a directory holding ``manifest.csv`` with
    columns ``path,mes_class[,patient_id,procedure_id]``. Relative CSV paths
    are resolved against the CSV's directory.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if layout == "class_folders":
        class_map = dict(class_map or DEFAULT_CLASS_MAP)
        records = []
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            if sub.name not in class_map:
                raise ValidationError(f"unknown class folder {sub.name!r}; expected one of {sorted(class_map)}")
            for f in sub.iterdir():
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    records.append(ImageRecord(path=f"{sub.name}/{f.name}", mes_class=class_map[sub.name]))
        base = root
    elif layout == "csv_manifest":
        csv_path = root / "manifest.csv" if root.is_dir() else root
        if not csv_path.exists():
            raise FileNotFoundError(f"manifest CSV not found: {csv_path}")
        base = csv_path.parent
        records = []
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"path", "mes_class"} <= set(reader.fieldnames):
                raise ValidationError(f"{csv_path} must have columns path,mes_class")
            for row in reader:
                try:
                    label = int(row["mes_class"])
                except ValueError as exc:
                    raise ValidationError(f"non-integer mes_class {row['mes_class']!r}") from exc
                records.append(ImageRecord(
                    path=row["path"],
                    mes_class=label,
                    patient_id=row.get("patient_id") or None,
                    procedure_id=row.get("procedure_id") or None,
                ))
    else:
        raise ValidationError(f"unknown layout {layout!r}")
    if not records:
        raise ValidationError(f"no images found under {root}")
    records.sort(key=lambda r: r.path)
    return Manifest(tuple(records), root=base)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    # str() keeps decimal literals like 0.3 exact instead of their binary expansion
    return Fraction(str(x))


def _check_fractions(fractions: Sequence) -> list[Fraction]:
    fr = [_as_fraction(f) for f in fractions]
    if not fr:
        raise ValidationError("at least one split fraction is required")
    if any(f < 0 for f in fr):
        raise ValidationError(f"split fractions must be non-negative: {fractions}")
    if abs(float(sum(fr)) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must sum to 1, got {float(sum(fr))}")
    return fr


def allocate(n: int, fractions: Sequence) -> list[int]:
    """Round-half-up per split, remainder to the last split.

    Cumulative allocation is capped at ``n`` so degenerate fraction lists can
    never over-allocate.
    """
    fr = _check_fractions(fractions)
    sizes = []
    left = n
    for f in fr[:-1]:
        k = min(round_half_up(f * n), left)
        sizes.append(k)
        left -= k
    sizes.append(left)
    return sizes


def _class_permutation(indices: np.ndarray, seed: int, cls: int) -> np.ndarray:
    rng = np.random.default_rng([seed, cls])
    return indices[rng.permutation(len(indices))]


def _stratify(indices: np.ndarray, labels: np.ndarray, fractions: list[Fraction], seed: int) -> list[np.ndarray]:
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(NUM_CLASSES):
        members = _class_permutation(indices[labels == c], seed, c)
        start = 0
        for k, size in enumerate(allocate(len(members), fractions)):
            parts[k].extend(members[start:start + size].tolist())
            start += size
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


@dataclass(frozen=True)
class SplitPlan:
    split_names: tuple[str, ...]
    assignment: dict[int, str]
    fractions: tuple[Fraction, ...]
    seed: int

    def indices(self, name: str) -> np.ndarray:
        if name not in self.split_names:
            raise ValidationError(f"unknown split {name!r}; have {self.split_names}")
        return np.array(sorted(i for i, s in self.assignment.items() if s == name), dtype=np.int64)

    def view(self, manifest: Manifest, name: str, label_visible: bool = True) -> "DatasetView":
        return DatasetView(manifest, tuple(self.indices(name).tolist()), label_visible)

    def counts(self, manifest: Manifest) -> dict[str, dict[int, int]]:
        out = {s: {c: 0 for c in range(NUM_CLASSES)} for s in self.split_names}
        for i, s in self.assignment.items():
            out[s][manifest.records[i].mes_class] += 1
        return out

    def to_csv(self, manifest: Manifest, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("path", "mes_class", "split"))
            for i, r in enumerate(manifest.records):
                w.writerow((r.path, r.mes_class, self.assignment[i]))

    @classmethod
    def from_csv(cls, manifest: Manifest, path: str | Path, seed: int = 0) -> "SplitPlan":
        index = {r.path: i for i, r in enumerate(manifest.records)}
        assignment, names = {}, []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["path"] not in index:
                    raise ValidationError(f"split CSV references unknown path {row['path']!r}")
                assignment[index[row["path"]]] = row["split"]
                if row["split"] not in names:
                    names.append(row["split"])
        if len(assignment) != len(manifest):
            raise ValidationError("split CSV does not cover every manifest record")
        n = len(manifest)
        fractions = tuple(Fraction(sum(1 for s in assignment.values() if s == nm), n) for nm in names)
        return cls(tuple(names), assignment, fractions, seed)


def stratified_split(
    manifest: Manifest,
    fractions: Sequence,
    seed: int,
    names: Sequence[str] | None = None,
    patient_grouped: bool = False,
) -> SplitPlan:
    fr = _check_fractions(fractions)
    names = tuple(names) if names is not None else tuple(f"split{k}" for k in range(len(fr)))
    if len(names) != len(fr):
        raise ValidationError("one name per split fraction is required")
    if patient_grouped:
        assignment = _patient_grouped_assignment(manifest, fr, seed, names)
    else:
        parts = _stratify(np.arange(len(manifest)), manifest.labels, fr, seed)
        assignment = {int(i): name for name, part in zip(names, parts) for i in part}
    return SplitPlan(names, assignment, tuple(fr), seed)


def _patient_grouped_assignment(manifest, fr, seed, names) -> dict[int, str]:
    # Whole patients go to one split; records without a patient id form singleton groups.
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r.patient_id or f"__record_{i}", []).append(i)
    keys = sorted(groups)
    rng = np.random.default_rng([seed, 7919])
    order = [keys[j] for j in rng.permutation(len(keys))]
    n = len(manifest)
    targets = [float(f) * n for f in fr]
    filled = [0] * len(fr)
    assignment = {}
    for key in order:
        members = groups[key]
        deficits = [t - f for t, f in zip(targets, filled)]
        k = int(np.argmax(deficits))
        filled[k] += len(members)
        for i in members:
            assignment[i] = names[k]
    return assignment


@dataclass(frozen=True)
class DatasetView:
    """Ordered subset of a manifest; pretext views hide labels."""

    source: Manifest
    indices: tuple[int, ...]
    label_visible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(set(self.indices)) != len(self.indices):
            raise ValidationError("view indices must be unique")
        if self.indices and (min(self.indices) < 0 or max(self.indices) >= len(self.source)):
            raise ValidationError("view index out of range")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        if not self.label_visible:
            raise ValidationError("labels are hidden on this view")
        return self.source.labels[list(self.indices)] if self.indices else np.zeros(0, dtype=np.int64)

    def class_counts(self) -> dict[int, int]:
        counts = Counter(self.source.records[i].mes_class for i in self.indices)
        return {c: counts.get(c, 0) for c in range(NUM_CLASSES)}

    def unlabeled(self) -> "DatasetView":
        return DatasetView(self.source, self.indices, label_visible=False)

    def images(self, side: int) -> np.ndarray:
        """Decoded uint8 array of shape (N, side, side, 3)."""
        if not self.indices:
            return np.zeros((0, side, side, 3), dtype=np.uint8)
        return np.stack([load_image(str(self.source.resolve(i)), side) for i in self.indices])


def split_view(view: DatasetView, fractions: Sequence, seed: int) -> list[DatasetView]:
    """Stratified partition of a view, same rounding rule as :func:`stratified_split`."""
    fr = _check_fractions(fractions)
    idx = np.asarray(view.indices, dtype=np.int64)
    parts = _stratify(idx, view.source.labels[idx], fr, seed)
    return [DatasetView(view.source, tuple(p.tolist()), view.label_visible) for p in parts]


def full_view(manifest: Manifest, label_visible: bool = True) -> DatasetView:
    return DatasetView(manifest, tuple(range(len(manifest))), label_visible)


@functools.lru_cache(maxsize=16384)
def load_image(path: str, side: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    arr.setflags(write=False)
    return arr


def subsample(view: DatasetView, fraction, seed: int) -> DatasetView:
    """Keep ``round_half_up(fraction * n_c)`` records of every class.

    The per-class permutation depends only on ``(seed, class)``, so a smaller
    fraction always keeps a prefix of what a larger one keeps.
    """
    if len(view) == 0:
        raise ValidationError("cannot subsample an empty view")
    f = _as_fraction(fraction)
    if not (0 < f <= 1):
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    idx = np.asarray(view.indices, dtype=np.int64)
    labels = view.source.labels[idx]
    keep = []
    for c in range(NUM_CLASSES):
        members = _class_permutation(idx[labels == c], seed, c)
        keep.extend(members[:round_half_up(f * len(members))].tolist())
    kept = set(keep)
    return DatasetView(view.source, tuple(i for i in view.indices if i in kept), view.label_visible)


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[int, float]
    n_images: int
    n_classes: int

    def as_array(self) -> np.ndarray:
        return np.array([self.weights[c] for c in sorted(self.weights)], dtype=np.float64)


def class_weights(counts: Mapping[int, int]) -> ClassWeights:
    """``n_images / (n_i * n_classes)``, the scikit-learn "balanced" heuristic."""
    if not counts:
        raise ValidationError("counts must not be empty")
    if any(n <= 0 for n in counts.values()):
        raise ValidationError(f"every class needs at least one sample: {dict(counts)}")
    n_images = sum(counts.values())
    n_classes = len(counts)
    weights = {c: n_images / (n * n_classes) for c, n in sorted(counts.items())}
    return ClassWeights(weights, n_images, n_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int | Mapping[int, int]
    image_side: int = 64
    seed: int = 0

    def counts(self) -> dict[int, int]:
        if isinstance(self.n_per_class, Mapping):
            return {c: int(self.n_per_class.get(c, 0)) for c in range(NUM_CLASSES)}
        return {c: int(self.n_per_class) for c in range(NUM_CLASSES)}


def imbalanced_counts(total: int, proportions: Iterable[float] = (0.5414, 0.2707, 0.1112, 0.0767)) -> dict[int, int]:
    """Per-class sizes mirroring the LIMUC class proportions."""
    p = np.asarray(list(proportions), dtype=np.float64)
    p = p / p.sum()
    return {c: max(1, int(round(total * float(q)))) for c, q in enumerate(p)}


def synthetic_image(cls: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Textured pink background with ``cls + 1`` reddish blobs."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    base = np.array([0.80, 0.55, 0.50]) + rng.normal(0, 0.04, 3)
    texture = np.zeros((side, side))
    for _ in range(3):
        fx, fy = rng.uniform(2, 8, 2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img = base[None, None, :] + 0.03 * texture[..., None] + rng.normal(0, 0.025, (side, side, 3))
    radius = 0.07 + 0.02 * cls
    redness = 0.25 + 0.12 * cls
    for _ in range(cls + 1):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        r = radius * rng.uniform(0.75, 1.25)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
        tint = np.array([1.0, 0.9 - redness, 0.9 - redness]) * rng.uniform(0.85, 1.15)
        img = img * (1 - blob[..., None]) + tint[None, None, :] * blob[..., None]
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out: str | Path) -> Manifest:
    """Write a class-separable 4-class corpus in ``class_folders`` layout."""
    counts = spec.counts()
    if sum(counts.values()) == 0 or any(n < 0 for n in counts.values()):
        raise ValidationError(f"synthetic corpus needs a positive image count, got {counts}")
    if spec.image_side < 32:
        raise ValidationError("image_side must be at least 32")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for c, n in counts.items():
        d = out / CLASS_NAMES[c]
        d.mkdir(exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng([spec.seed, c, i])
            Image.fromarray(synthetic_image(c, spec.image_side, rng)).save(d / f"img_{i:05d}.png")
    return load_manifest(out, "class_folders")


__all__ = [
    "ImageRecord", "Manifest", "SplitPlan", "DatasetView", "ClassWeights", "SyntheticSpec",
    "load_manifest", "manifest_from_counts", "stratified_split", "subsample", "class_weights",
    "generate_synthetic", "imbalanced_counts", "allocate", "round_half_up", "full_view", "split_view", "load_image",
    "reference_counts",
]
