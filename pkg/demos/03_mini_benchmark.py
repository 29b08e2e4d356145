"""Run a scaled-down benchmark through the command line and render its tables.

The grid mirrors the full study: a frozen-backbone supervised baseline, then
each pretext method pretrained and fine-tuned at several label fractions. For
the full desk-scale grid (about 11 minutes on one core) use
``ucssl benchmark --preset desk``.

Run: python demos/03_mini_benchmark.py [--workdir /tmp/ucssl-mini]
"""
import argparse
from pathlib import Path

from ucssl.cli import main as ucssl

CONFIG = """
[dataset]
root = {root}
synthetic_per_class = 60

[swav]
n_prototypes = 16

[multicrop]
n_global = 2
global_side = 64
n_local = 2
local_side = 32

[pretrain]
epochs = 3
batch_size = 16

[train]
epochs = 4
batch_size = 16

[supervised]
mode = supervised
freeze_backbone = true
epochs = 4
batch_size = 16

[benchmark]
methods = spark, byol, moco, swav
pretrain_fractions = 1.0
finetune_fractions = 1.0, 0.25
class_weighting_variant = false

[output]
dir = {out}
"""


def run(*argv: str) -> None:
    print("$ ucssl " + " ".join(argv))
    rc = ucssl(list(argv))
    if rc:
        raise SystemExit(rc)


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--workdir", default="/tmp/ucssl-mini")
    work = Path(p.parse_args().workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "mini.ini"
    cfg.write_text(CONFIG.format(root=work / "corpus", out=work / "runs"))

    run("synth", "--config", str(cfg))
    run("split", "--config", str(cfg), "--dry-run")
    run("benchmark", "--config", str(cfg), "--dry-run")
    # completed runs are skipped, so rerunning after an interruption resumes the grid
    run("benchmark", "--config", str(cfg))
