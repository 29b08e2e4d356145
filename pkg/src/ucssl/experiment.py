"""Run planning, execution and provenance for the benchmark grid.

Layout: ``<output>/<config-hash>/<run-name>/{checkpoints/, curves.csv,
result.json, manifest.json}``. A run is complete exactly when its
``manifest.json`` exists; the manifest is written last and atomically, so an
interrupted grid can be resumed by skipping completed runs.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from ucssl.backbone import build_encoder, import_weights
from ucssl.config import SSL_METHODS, ExperimentConfig, parse_config, render_config
from ucssl.datasets import Manifest, SplitPlan, load_manifest, stratified_split, subsample
from ucssl.errors import ValidationError
from ucssl.evaluation import LAYOUTS, render_tables
from ucssl.pretext import DISPLAY_NAMES, METHODS
from ucssl.training import Interrupted, PretrainResult, RunResult, finetune, pretrain, train_supervised

SSL_SPLIT_NAMES = ("pretrain", "finetune", "test")
SUPERVISED_SPLIT_NAMES = ("train", "val", "test")


def code_hash() -> str:
    """Content hash of the package sources (stands in for a commit id)."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_manifest(run_dir: Path, cfg: ExperimentConfig, seeds: dict, started: str, artifacts: Iterable[Path]) -> Path:
    arts = [str(Path(a).relative_to(run_dir)) for a in artifacts]
    missing = [a for a in arts if not (run_dir / a).exists()]
    if missing:
        raise ValidationError(f"run manifest names missing artifacts: {missing}")
    record = {
        "config_hash": cfg.hash, "code_hash": code_hash(), "seeds": seeds,
        "started": started, "finished": _now(), "artifacts": sorted(arts),
    }
    path = run_dir / "manifest.json"
    _atomic_write(path, json.dumps(record, indent=2, sort_keys=True))
    return path


def is_complete(run_dir: Path) -> bool:
    return (run_dir / "manifest.json").exists()


# ---------------------------------------------------------------- data

def dataset_manifest(cfg: ExperimentConfig) -> Manifest:
    return load_manifest(cfg.dataset.root, cfg.dataset.layout)


def ssl_split(cfg: ExperimentConfig, manifest: Manifest) -> SplitPlan:
    d = cfg.dataset
    return stratified_split(manifest, d.fractions, d.seed, SSL_SPLIT_NAMES, d.patient_grouped)


def supervised_split(cfg: ExperimentConfig, manifest: Manifest) -> SplitPlan:
    d = cfg.dataset
    return stratified_split(manifest, d.supervised_fractions, d.seed, SUPERVISED_SPLIT_NAMES, d.patient_grouped)


# ---------------------------------------------------------------- runs

@dataclass(frozen=True)
class RunSpec:
    kind: str  # pretrain | finetune | supervised
    method: str
    pretrain_fraction: float | None = None
    fraction: float | None = None
    weighted: bool = False

    @property
    def name(self) -> str:
        if self.kind == "pretrain":
            return f"pretrain-{self.method}-p{self.pretrain_fraction:g}"
        suffix = "-weighted" if self.weighted else ""
        if self.kind == "supervised":
            return f"supervised-f{self.fraction:g}{suffix}"
        return f"finetune-{self.method}-p{self.pretrain_fraction:g}-f{self.fraction:g}{suffix}"

    @property
    def layout(self) -> str | None:
        if self.kind == "pretrain":
            return None
        if self.weighted:
            return "table6"
        if self.kind == "supervised":
            return "table2"
        return "table4" if self.pretrain_fraction == 1.0 else "table5"


def plan_grid(cfg: ExperimentConfig) -> list[RunSpec]:
    """Supervised x fine-tune fractions, each SSL method pretrained at every
    pretrain fraction and fine-tuned at every fine-tune fraction, plus the
    class-weighted variants (full data) when enabled. Pretrain runs precede
    the fine-tunes that depend on them."""
    b = cfg.benchmark
    runs = [RunSpec("supervised", "supervised", fraction=f) for f in b.finetune_fractions]
    for m in b.methods:
        for pf in b.pretrain_fractions:
            runs.append(RunSpec("pretrain", m, pretrain_fraction=pf))
            runs += [RunSpec("finetune", m, pretrain_fraction=pf, fraction=f) for f in b.finetune_fractions]
    if b.class_weighting_variant:
        runs.append(RunSpec("supervised", "supervised", fraction=1.0, weighted=True))
        top = max(b.pretrain_fractions)
        runs += [RunSpec("finetune", m, pretrain_fraction=top, fraction=1.0, weighted=True) for m in b.methods]
    return runs


def format_plan(runs: list[RunSpec]) -> str:
    lines = [f"{'#':>3}  {'kind':<10} {'run':<40} depends-on"]
    for i, r in enumerate(runs):
        dep = RunSpec("pretrain", r.method, pretrain_fraction=r.pretrain_fraction).name if r.kind == "finetune" else "-"
        lines.append(f"{i:>3}  {r.kind:<10} {r.name:<40} {dep}")
    kinds = {k: sum(r.kind == k for r in runs) for k in ("pretrain", "finetune", "supervised")}
    weighted = sum(r.weighted for r in runs)
    lines.append(f"total {len(runs)} runs: {kinds['pretrain']} pretrain, {kinds['finetune']} fine-tune, "
                 f"{kinds['supervised']} supervised ({weighted} class-weighted)")
    return "\n".join(lines)


def experiment_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output.dir) / cfg.hash


def _ssl_method(cfg: ExperimentConfig, name: str):
    if name not in SSL_METHODS:
        raise ValidationError(f"unknown pretext method {name!r}; expected one of {SSL_METHODS}")
    spec = cfg.encoder.spec()
    seed = cfg.pretrain.seed
    mcfg = cfg.method_config(name)
    if name == "spark":
        return METHODS[name](build_encoder(spec, seed), mcfg, None, seed)
    aug = replace(cfg.augment, output_side=cfg.multicrop.global_side if name == "swav" else spec.input_side)
    return METHODS[name](build_encoder(spec, seed), mcfg, aug, seed)


def run_pretrain(
    cfg: ExperimentConfig,
    method: str,
    fraction: float,
    run_dir: Path,
    resume: bool = False,
    should_stop: Callable[[int], bool] | None = None,
) -> PretrainResult:
    started = _now()
    manifest = dataset_manifest(cfg)
    view = ssl_split(cfg, manifest).view(manifest, "pretrain", label_visible=False)
    view = subsample(view, fraction, cfg.dataset.seed)
    model = _ssl_method(cfg, method)
    snapshot = {**cfg.to_dict(), "run": {"kind": "pretrain", "method": method, "pretrain_fraction": fraction}}
    result = pretrain(model, view, cfg.pretrain, run_dir, resume=resume and (run_dir / "checkpoints" / "last.safetensors").exists(),
                      config_snapshot=snapshot, should_stop=should_stop)
    if result.checkpoint is None:
        raise ValidationError("pretraining produced no checkpoint")
    write_manifest(run_dir, cfg, {"pretrain": cfg.pretrain.seed, "split": cfg.dataset.seed}, started,
                   [result.checkpoint, run_dir / "curves.csv"])
    return result


def _save_result(run_dir: Path, result: RunResult, cfg: ExperimentConfig, started: str, seeds: dict) -> RunResult:
    path = run_dir / "result.json"
    _atomic_write(path, result.to_json())
    arts = [path] + ([Path(result.best_checkpoint)] if result.best_checkpoint else [])
    write_manifest(run_dir, cfg, seeds, started, arts)
    return result


def run_finetune(
    cfg: ExperimentConfig,
    method: str,
    checkpoint: Path | None,
    fraction: float,
    run_dir: Path,
    weighted: bool | None = None,
    pretrain_fraction: float | None = None,
) -> RunResult:
    started = _now()
    tcfg = replace(cfg.train, data_fraction=fraction)
    if weighted is not None:
        tcfg = replace(tcfg, class_weighting=weighted)
    if checkpoint is not None and not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    manifest = dataset_manifest(cfg)
    display = DISPLAY_NAMES.get(method, method)
    snapshot = {**cfg.to_dict(), "train": _plain(tcfg),
                "run": {"kind": "finetune", "method": method, "pretrain_fraction": pretrain_fraction,
                        "fraction": fraction, "weighted": tcfg.class_weighting, "checkpoint": str(checkpoint) if checkpoint else None}}
    result = finetune(checkpoint, tcfg, manifest, ssl_split(cfg, manifest), cfg.encoder.spec(), display, run_dir, snapshot)
    result.group = "ssl" if tcfg.class_weighting else ""
    return _save_result(run_dir, result, cfg, started, {"train": tcfg.seed, "split": cfg.dataset.seed})


def run_supervised(cfg: ExperimentConfig, fraction: float, run_dir: Path, weighted: bool | None = None) -> RunResult:
    started = _now()
    tcfg = replace(cfg.supervised, data_fraction=fraction)
    if weighted is not None:
        tcfg = replace(tcfg, class_weighting=weighted)
    manifest = dataset_manifest(cfg)
    spec = cfg.encoder.spec()
    encoder = None
    if cfg.encoder.weights:
        encoder, _ = import_weights(cfg.encoder.weights, spec, seed=tcfg.seed)
    snapshot = {**cfg.to_dict(), "supervised": _plain(tcfg),
                "run": {"kind": "supervised", "fraction": fraction, "weighted": tcfg.class_weighting}}
    result = train_supervised(tcfg, manifest, supervised_split(cfg, manifest), spec, encoder, "Supervised", run_dir, snapshot)
    result.group = "supervised" if tcfg.class_weighting else ""
    return _save_result(run_dir, result, cfg, started, {"train": tcfg.seed, "split": cfg.dataset.seed})


def _plain(dc) -> dict:
    return json.loads(json.dumps(dc.__dict__, default=list))


def execute(cfg: ExperimentConfig, run: RunSpec, root: Path, resume: bool = False,
            should_stop: Callable[[int], bool] | None = None):
    run_dir = root / run.name
    if run.kind == "pretrain":
        return run_pretrain(cfg, run.method, run.pretrain_fraction, run_dir, resume=resume, should_stop=should_stop)
    if run.kind == "supervised":
        return run_supervised(cfg, run.fraction, run_dir, weighted=run.weighted)
    ckpt = root / RunSpec("pretrain", run.method, pretrain_fraction=run.pretrain_fraction).name / "checkpoints" / "last.safetensors"
    return run_finetune(cfg, run.method, ckpt, run.fraction, run_dir, weighted=run.weighted,
                        pretrain_fraction=run.pretrain_fraction)


def _execute_in_worker(config_text: str, run: RunSpec, root: str, resume: bool) -> str:
    cfg = parse_config(config_text, env={})
    execute(cfg, run, Path(root), resume)
    return run.name


def run_grid(
    cfg: ExperimentConfig,
    resume: bool = True,
    log: Callable[[str], None] = print,
    should_stop: Callable[[int], bool] | None = None,
) -> tuple[list[str], list[str]]:
    """Execute every incomplete run; returns (executed, skipped) run names.

    ``should_stop`` is honoured between runs and inside pretext runs when
    running sequentially; it raises :class:`Interrupted`.
    """
    root = experiment_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    _atomic_write(root / "config.ini", render_config(cfg))
    runs = plan_grid(cfg)
    executed, skipped = [], []
    todo = []
    for r in runs:
        if resume and is_complete(root / r.name):
            skipped.append(r.name)
        else:
            todo.append(r)
    stages = [[r for r in todo if r.kind == "pretrain"], [r for r in todo if r.kind != "pretrain"]]
    for stage in stages:
        if cfg.benchmark.workers > 1 and len(stage) > 1:
            text = render_config(cfg)
            with ProcessPoolExecutor(cfg.benchmark.workers) as pool:
                futures = [pool.submit(_execute_in_worker, text, r, str(root), resume) for r in stage]
                for f in futures:
                    executed.append(f.result())
                    log(f"done {executed[-1]}")
        else:
            for r in stage:
                if should_stop is not None and should_stop(0):
                    write_index(root)
                    raise Interrupted(f"stopped before {r.name}")
                t0 = time.perf_counter()
                execute(cfg, r, root, resume, should_stop)
                executed.append(r.name)
                log(f"done {r.name} ({time.perf_counter() - t0:.1f}s)")
    write_index(root)
    return executed, skipped


def write_index(root: Path) -> Path:
    """Grid index: one line per completed run (written by the orchestrator only)."""
    runs = sorted(p.parent.name for p in root.glob("*/manifest.json"))
    path = root / "index.json"
    _atomic_write(path, json.dumps({"runs": runs}, indent=2))
    return path


# ---------------------------------------------------------------- reports

def collect_results(results_dir: str | Path) -> list[tuple[str, RunResult]]:
    """(layout, result) for every completed result under ``results_dir``."""
    results_dir = Path(results_dir)
    if not results_dir.exists():
        raise FileNotFoundError(f"results directory not found: {results_dir}")
    out = []
    for path in sorted(results_dir.rglob("result.json")):
        if not (path.parent / "manifest.json").exists():
            continue
        result = RunResult.from_json(path.read_text(encoding="utf-8"))
        out.append((_layout_of(result), result))
    return out


def _layout_of(result: RunResult) -> str:
    run = result.config.get("run", {})
    if run.get("weighted"):
        return "table6"
    if run.get("kind") == "supervised":
        return "table2"
    return "table4" if run.get("pretrain_fraction") in (1.0, None) else "table5"


def render_report(results: list[tuple[str, RunResult]], layouts: Iterable[str] = LAYOUTS) -> dict[str, tuple[str, str]]:
    return {lay: render_tables([r for l, r in results if l == lay], lay) for lay in layouts}


def write_report(report: dict[str, tuple[str, str]], out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for lay, (text, csv_text) in report.items():
        for suffix, body in ((".txt", text), (".csv", csv_text)):
            p = out / f"{lay}{suffix}"
            _atomic_write(p, body)
            paths.append(p)
    return paths


__all__ = [
    "RunSpec", "plan_grid", "format_plan", "run_grid", "execute", "run_pretrain", "run_finetune", "run_supervised",
    "collect_results", "render_report", "write_report", "experiment_dir", "ssl_split", "supervised_split",
    "dataset_manifest", "code_hash", "is_complete", "write_manifest",
]
