import csv
import os
import signal
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from ucssl import ValidationError
from ucssl.cli import EXIT_INTERRUPTED, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from ucssl.config import (
    BenchmarkSection, DatasetSection, EncoderSection, ExperimentConfig, desk_config, load_config, parse_config,
    render_config,
)
from ucssl.datasets import manifest_from_counts, reference_counts
from ucssl.experiment import plan_grid
from ucssl.training import PretrainConfig, TrainConfig

TINY = """
[dataset]
root = {root}
synthetic_per_class = 24

[byol]
hidden_dim = 32
latent_dim = 16

[moco]
hidden_dim = 32
latent_dim = 16
queue_capacity = 16

[swav]
hidden_dim = 32
latent_dim = 16
n_prototypes = 8

[multicrop]
n_global = 2
global_side = 64
n_local = 2
local_side = 32

[pretrain]
epochs = {epochs}
batch_size = 8

[train]
epochs = 1
batch_size = 8
classifier_widths = 16, 16

[supervised]
mode = supervised
freeze_backbone = true
epochs = 1
batch_size = 8
classifier_widths = 16, 16

[benchmark]
methods = spark, byol
pretrain_fractions = 1.0
finetune_fractions = 1.0, 0.5

[output]
dir = {out}
"""


def write_tiny(tmp: Path, epochs: int = 1) -> Path:
    path = tmp / "tiny.ini"
    path.write_text(TINY.format(root=tmp / "corpus", out=tmp / "runs", epochs=epochs))
    return path


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_tiny(tmp)
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    return tmp, cfg


@pytest.fixture(scope="module")
def benchmark(tiny):
    tmp, cfg = tiny
    assert main(["benchmark", "--config", str(cfg)]) == EXIT_OK
    return tmp, cfg, load_config(cfg, env={})


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for k in list(os.environ):
        if k.startswith("UCSSL_"):
            monkeypatch.delenv(k)


# ---------------------------------------------------------------- config


def test_render_parse_round_trip_defaults_and_desk():
    for cfg in (ExperimentConfig(), desk_config()):
        assert parse_config(render_config(cfg), env={}) == cfg


@settings(max_examples=100, deadline=None)
@given(
    epochs=st.integers(0, 500),
    lr=st.floats(1e-6, 1.0, allow_nan=False),
    fraction=st.sampled_from([1.0, 0.5, 0.25, 0.1]),
    weighting=st.booleans(),
    weights=st.one_of(st.none(), st.text(st.characters(whitelist_categories=("L", "N")), min_size=1, max_size=12)),
    fractions=st.sampled_from([(0.5, 0.3, 0.2), (0.6, 0.2, 0.2), (0.4, 0.4, 0.2)]),
    widths=st.tuples(st.integers(1, 1024), st.integers(1, 1024)),
)
def test_round_trip_property(epochs, lr, fraction, weighting, weights, fractions, widths):
    if weights is not None and weights.lower() in ("none", ""):
        weights = None
    base = ExperimentConfig()
    cfg = replace(
        base,
        dataset=replace(base.dataset, fractions=fractions),
        encoder=EncoderSection(weights=weights),
        pretrain=PretrainConfig(epochs=epochs, lr=lr),
        train=TrainConfig(data_fraction=fraction, class_weighting=weighting, classifier_widths=widths, lr=lr),
    )
    back = parse_config(render_config(cfg), env={})
    assert back == cfg
    assert back.hash == cfg.hash


def test_env_overrides_and_validation():
    cfg = parse_config("", env={"UCSSL_PRETRAIN__EPOCHS": "2", "UCSSL_TRAIN__CLASS_WEIGHTING": "yes",
                                "UNRELATED": "1"})
    assert cfg.pretrain.epochs == 2 and cfg.train.class_weighting
    with pytest.raises(ValidationError, match="unknown config sections"):
        parse_config("[nope]\na = 1\n", env={})
    with pytest.raises(ValidationError, match="unknown keys"):
        parse_config("[pretrain]\nepoch = 1\n", env={})
    with pytest.raises(ValidationError, match="cannot parse"):
        parse_config("[pretrain]\nepochs = many\n", env={})
    with pytest.raises(ValidationError):
        parse_config("", env={"UCSSL_DATASET__FRACTIONS": "0.5, 0.5, 0.5"})
    with pytest.raises(ValidationError):
        parse_config("[method]\nname = simclr\n", env={})
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/x.ini")


def test_swav_section_takes_multicrop():
    cfg = desk_config()
    assert cfg.method_config("swav").multi_crop == cfg.multicrop
    assert cfg.method_config("supervised") is cfg.supervised


def test_plan_has_forty_runs_with_defaults():
    runs = plan_grid(ExperimentConfig())
    kinds = [r.kind for r in runs]
    assert len(runs) == 40
    assert kinds.count("pretrain") == 8 and kinds.count("supervised") == 4
    assert sum(r.weighted for r in runs) == 5
    names = [r.name for r in runs]
    for r in runs:
        if r.kind == "finetune":
            assert names.index(f"pretrain-{r.method}-p{r.pretrain_fraction:g}") < names.index(r.name)
    small = plan_grid(replace(ExperimentConfig(), benchmark=BenchmarkSection(methods=("spark",),
                                                                              class_weighting_variant=False)))
    assert len(small) == 3 + 2 + 6


# ---------------------------------------------------------------- commands


def test_config_command_prints_effective_config(capsys, monkeypatch):
    monkeypatch.setenv("UCSSL_PRETRAIN__EPOCHS", "3")
    assert main(["config", "--preset", "desk"]) == EXIT_OK
    out = capsys.readouterr().out
    assert parse_config(out, env={}).pretrain.epochs == 3


def test_split_reproduces_published_counts_and_is_stable(tmp_path, capsys):
    ref = reference_counts()
    manifest_from_counts(ref["total"]).to_csv(tmp_path / "manifest.csv")
    ini = tmp_path / "limuc.ini"
    ini.write_text(f"[dataset]\nroot = {tmp_path / 'manifest.csv'}\nlayout = csv_manifest\n")
    outs = []
    for name in ("a.csv", "b.csv"):
        assert main(["split", "--config", str(ini), "--out", str(tmp_path / name)]) == EXIT_OK
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    with open(tmp_path / "a.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for split in ("pretrain", "finetune", "test"):
        got = {c: sum(1 for r in rows if r["split"] == split and int(r["mes_class"]) == c) for c in range(4)}
        assert got == ref[split]
    assert "pretrain,3053,1526,627,433,5639" in capsys.readouterr().out


def test_exit_codes(tmp_path, tiny, monkeypatch):
    _, cfg = tiny
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(tmp_path / "missing.safetensors")]) == EXIT_IO
    assert main(["pretrain", "--config", str(cfg), "--method", "simclr"]) == EXIT_VALIDATION
    assert main(["finetune", "--config", str(cfg), "--scratch", "--fractions", "0,1"]) == EXIT_VALIDATION
    assert main(["finetune", "--config", str(cfg)]) == EXIT_VALIDATION
    assert main(["split", "--config", str(tmp_path / "absent.ini")]) == EXIT_IO
    monkeypatch.setenv("UCSSL_DATASET__FRACTIONS", "0.9, 0.3, 0.2")
    assert main(["split", "--config", str(cfg)]) == EXIT_VALIDATION


def test_dry_run_lists_the_grid(capsys):
    assert main(["benchmark", "--preset", "desk", "--dry-run", "--out", "/nonexistent/runs"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "40 runs" in out
    assert not Path("/nonexistent/runs").exists()


def test_pretrain_resume_and_finetune_sweep(tiny, tmp_path, capsys):
    _, cfg = tiny
    run = tmp_path / "spark"
    ini = write_tiny(tmp_path, epochs=2)
    ini.write_text(ini.read_text().replace(str(tmp_path / "corpus"), str(tiny[0] / "corpus")))
    assert main(["pretrain", "--config", str(ini), "--method", "spark", "--out", str(run)]) == EXIT_OK
    ckpt = run / "checkpoints" / "last.safetensors"
    curve = (run / "curves.csv").read_text().splitlines()
    assert ckpt.exists() and curve[0] == "epoch,loss" and len(curve) == 3
    # resuming a finished run is a no-op that reproduces the same curve
    assert main(["pretrain", "--config", str(ini), "--method", "spark", "--out", str(run), "--resume"]) == EXIT_OK
    assert (run / "curves.csv").read_text().splitlines() == curve
    capsys.readouterr()
    out = tmp_path / "ft"
    assert main(["finetune", "--config", str(ini), "--checkpoint", str(ckpt), "--method", "spark",
                 "--fractions", "1.0,0.5,0.25", "--out", str(out)]) == EXIT_OK
    results = sorted(out.glob("*/result.json"))
    assert len(results) == 3
    assert main(["train-supervised", "--config", str(ini), "--fractions", "0.5", "--out", str(out)]) == EXIT_OK
    assert (out / "supervised-f0.5" / "manifest.json").exists()


def test_benchmark_outputs_and_resume_skip(benchmark, capsys):
    tmp, cfg, conf = benchmark
    root = tmp / "runs" / conf.hash
    assert (root / "config.ini").exists() and (root / "index.json").exists()
    assert len(list(root.glob("*/manifest.json"))) == len(plan_grid(conf))
    for run in root.glob("finetune-*"):
        assert {"checkpoints", "result.json", "manifest.json"} <= {p.name for p in run.iterdir()}
    before = {p: p.stat().st_mtime_ns for p in root.glob("*/result.json")}
    capsys.readouterr()
    assert main(["benchmark", "--config", str(cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "executed 0 runs" in out
    assert before == {p: p.stat().st_mtime_ns for p in root.glob("*/result.json")}


def test_report_is_byte_stable_and_ordered(benchmark, tmp_path, capsys):
    tmp, cfg, conf = benchmark
    root = tmp / "runs" / conf.hash
    texts = []
    for _ in range(2):
        assert main(["report", str(root), "--config", str(cfg), "--csv", "--layout", "table4"]) == EXIT_OK
        texts.append(capsys.readouterr().out)
    assert texts[0] == texts[1]
    lines = texts[0].splitlines()
    assert lines[0] == "method,fraction,accuracy,precision,recall,f1"
    methods = [line.split(",")[0] for line in lines[1:] if line]
    assert methods.index("BYOL") < methods.index("SparK")
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty), "--config", str(cfg), "--csv", "--layout", "table4"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "method,fraction,accuracy,precision,recall,f1"
    assert main(["report", str(root), "--config", str(cfg), "--out", str(tmp_path / "tables")]) == EXIT_OK
    assert (tmp_path / "tables").is_dir() and any((tmp_path / "tables").iterdir())


def test_sigint_interrupts_with_resumable_checkpoint(tiny, tmp_path):
    root, _ = tiny
    ini = tmp_path / "long.ini"
    ini.write_text(TINY.format(root=root / "corpus", out=tmp_path / "runs", epochs=200))
    run = tmp_path / "run"
    cmd = [sys.executable, "-m", "ucssl", "pretrain", "--config", str(ini), "--method", "spark", "--out", str(run)]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    ckpt = run / "checkpoints" / "last.safetensors"
    deadline = time.monotonic() + 120
    while not ckpt.exists() and time.monotonic() < deadline and proc.poll() is None:
        time.sleep(0.2)
    proc.send_signal(signal.SIGINT)
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == EXIT_INTERRUPTED, err
    assert "--resume" in err
    assert ckpt.exists()
