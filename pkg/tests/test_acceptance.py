"""Acceptance criteria, one test per criterion, each recording a pass/fail line.

The desk-scale criteria (9 to 12) share one benchmark grid built by a session
fixture. Set ``UCSSL_ACCEPTANCE_DIR`` to keep that grid between sessions;
completed runs are then skipped and wall time is read from run manifests.
"""
import json
import math
import os
import statistics
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import pytest
import torch
from torch import nn

import test_pretext as tp
import test_training as tt
from _report import record
from ucssl.backbone import EncoderSpec, build_encoder, ema_update, encode, encode_sparse
from ucssl.config import desk_config
from ucssl.datasets import (
    SyntheticSpec, class_weights, generate_synthetic, imbalanced_counts, manifest_from_counts, reference_counts,
    stratified_split,
)
from ucssl.evaluation import harmonic_f1, load_published_tables
from ucssl.experiment import (
    _ssl_method, dataset_manifest, experiment_dir, plan_grid, run_finetune, run_grid, run_pretrain, ssl_split,
)
from ucssl.pretext import usage_entropy
from ucssl.training import RunResult, _eval_tensor, load_checkpoint

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- exact fixtures


def test_criterion_01_split_exactness():
    ref = reference_counts()
    t0 = time.perf_counter()
    plan = stratified_split(manifest_from_counts(ref["total"]), (0.5, 0.3, 0.2), 0, ("pretrain", "finetune", "test"))
    counts = plan.counts(manifest_from_counts(ref["total"]))
    elapsed = time.perf_counter() - t0
    matches = sum(counts[s][c] == ref[s][c] for s in ("pretrain", "finetune", "test") for c in range(4))
    ok = record("1", "split exactness", matches == 12 and elapsed < 1,
                f"{matches}/12 per-class counts equal the published split, {elapsed * 1000:.0f} ms")
    assert ok


@pytest.mark.xfail(strict=True, reason="published rows are internally inconsistent; see the decisions ledger")
def test_criterion_02_f1_fixture_consistency():
    t0 = time.perf_counter()
    rows = load_published_tables()
    off = []
    for layout, r in rows:
        dev = harmonic_f1(r.precision, r.recall) - r.f1
        if abs(dev) > 0.15:
            off.append(f"{layout}/{r.method}/{r.group or f'{r.fraction:g}'}:{dev:+.3f}")
    elapsed = time.perf_counter() - t0
    ok = record("2", "F1 fixture consistency", not off and elapsed < 1,
                f"{len(rows) - len(off)}/{len(rows)} rows within 0.15; outside: {', '.join(off) or 'none'}")
    assert ok


def test_criterion_03_class_weight_formula():
    total = reference_counts()["total"]
    w = class_weights(total)
    n = sum(total.values())
    worst = max(abs(w.weights[c] - n / (4 * k)) for c, k in total.items())
    mass = sum(k * w.weights[c] for c, k in total.items())
    ok = record("3", "class-weight formula", n == 11276 and worst <= 1e-9 and abs(mass - 11276) <= 1e-6,
                f"max |w - 11276/(4 n_i)| = {worst:.1e}, sum n_i w_i = {mass:.9f}")
    assert ok


# ---------------------------------------------------------------- oracle and property suites


def _run_all(checks) -> list[str]:
    failures = []
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(f"{check.__name__}: {exc}".splitlines()[0])
    return failures


def test_criterion_04_loss_oracle_suite():
    t0 = time.perf_counter()
    checks = [
        tp.test_byol_closed_forms, tp.test_byol_gradient_fd,
        tp.test_info_nce_closed_forms, tp.test_info_nce_gradient_fd,
        tp.test_swav_loss_closed_forms, tp.test_swav_gradient_fd,
        tp.test_masked_l2_examples, tp.test_masked_l2_gradient_fd,
        tt.test_weighted_cross_entropy_examples, tt.test_weighted_cross_entropy_gradient_fd,
    ]
    failures = _run_all(checks)
    elapsed = time.perf_counter() - t0
    ok = record("4", "loss oracle suite", not failures and elapsed < 60,
                f"5 losses x (closed forms + {tp.FD_INSTANCES} FD instances at rel. err <= {tp.FD_TOL:g}), "
                f"{len(checks) - len(failures)}/{len(checks)} groups pass in {elapsed:.1f} s"
                + (f"; {failures}" if failures else ""))
    assert ok


def test_criterion_05_sparse_dense_equivalence():
    spec = EncoderSpec.residual_small(64)
    enc = build_encoder(spec, 0)
    g = torch.Generator().manual_seed(11)
    worst_dense, worst_leak = 0.0, 0.0
    with torch.no_grad():
        for i in range(100):
            enc.train(i % 2 == 0)  # batch statistics and running statistics alike
            x = torch.randn(2, 3, 64, 64, generator=g)
            empty = torch.zeros(2, 2, 2, dtype=torch.bool)
            dense, sparse = encode(x, enc), encode_sparse(x, empty, enc)
            worst_dense = max(worst_dense, max((a - b).abs().max().item() for a, b in zip(dense.levels, sparse.levels)))
            masked = torch.rand(2, 2, 2, generator=g) < 0.5
            masked[:, 0, 0] = True
            pixels = masked.repeat_interleave(32, 1).repeat_interleave(32, 2)[:, None].expand_as(x)
            noisy = x + 5 * torch.randn(x.shape, generator=g) * pixels
            a, b = encode_sparse(x, masked, enc), encode_sparse(noisy, masked, enc)
            for la, lb, v in zip(a.levels, b.levels, a.valid_mask):
                keep = v.bool().expand_as(la)
                if keep.any():
                    worst_leak = max(worst_leak, (la[keep] - lb[keep]).abs().max().item())
    ok = record("5", "sparse/dense equivalence", worst_dense <= 1e-5 and worst_leak <= 1e-5,
                f"100 inputs: empty-mask max diff {worst_dense:.1e}, masked-pixel perturbation leak {worst_leak:.1e}")
    assert ok


def test_criterion_06_moco_queue_properties():
    checks = [tp.test_queue_examples, tp.test_queue_fifo_and_capacity_property,
              tp.test_key_encoder_gradient_isolation_property]
    failures = _run_all(checks)
    ok = record("6", "MoCo queue properties", not failures,
                "FIFO/capacity and key-encoder isolation, 1000 hypothesis cases each"
                + (f"; {failures}" if failures else ""))
    assert ok


def test_criterion_07_sinkhorn():
    failures = _run_all([tp.test_sinkhorn_rows_and_column_balance_on_100_matrices, tp.test_sinkhorn_closed_forms])
    ok = record("7", "SwAV Sinkhorn", not failures,
                "100 random score matrices: row sums within 1e-6, column deviation non-increasing over 1..5 iterations"
                + (f"; {failures}" if failures else ""))
    assert ok


def test_criterion_08_ema_closed_form():
    worst = 0.0
    for m in (0.0, 0.5, 0.9, 0.996):
        for t in (1, 5, 50):
            torch.manual_seed(t)
            target, online = nn.Linear(4, 3).double(), nn.Linear(4, 3).double()
            k0 = {n: p.detach().clone() for n, p in target.named_parameters()}
            q = {n: p.detach().clone() for n, p in online.named_parameters()}
            with torch.no_grad():
                for _ in range(t):
                    ema_update(target, online, m)
            for n, p in target.named_parameters():
                expect = m ** t * k0[n] + (1 - m ** t) * q[n]
                worst = max(worst, (p - expect).abs().max().item())
    ok = record("8", "EMA closed form", worst <= 1e-9, f"t in (1, 5, 50), 4 momenta: max error {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- desk scale


def _manifest_seconds(run_dir: Path) -> float:
    m = json.loads((run_dir / "manifest.json").read_text())
    return (datetime.fromisoformat(m["finished"]) - datetime.fromisoformat(m["started"])).total_seconds()


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    base = Path(os.environ.get("UCSSL_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    corpus = base / "corpus"
    if not corpus.exists():
        generate_synthetic(SyntheticSpec(400, 64, 0), corpus)
    cfg = desk_config(root=str(corpus), output=str(base / "runs"))
    t0 = time.perf_counter()
    run_grid(cfg, resume=True, log=lambda s: None)
    elapsed = time.perf_counter() - t0
    root = experiment_dir(cfg)
    return cfg, root, elapsed, base


@pytest.mark.slow
def test_criterion_09_desk_smoke_benchmark(desk):
    cfg, root, elapsed, _ = desk
    runs = plan_grid(cfg)
    bad_loss, bad_acc, curves = [], [], []
    for r in runs:
        d = root / r.name
        if r.kind == "pretrain":
            rows = (d / "curves.csv").read_text().splitlines()[1:]
            first, last = float(rows[0].split(",")[1]), float(rows[-1].split(",")[1])
            curves.append(f"{r.method}-p{r.pretrain_fraction:g} {first:.3f}->{last:.3f}")
            if not last < first:
                bad_loss.append(r.name)
        else:
            acc = RunResult.from_json((d / "result.json").read_text()).report.accuracy
            if not acc > 25:
                bad_acc.append(f"{r.name}={acc:.1f}")
    grid_seconds = sum(_manifest_seconds(root / r.name) for r in runs)
    accs = [RunResult.from_json((root / r.name / "result.json").read_text()).report.accuracy
            for r in runs if r.kind != "pretrain"]
    ok = record("9", "desk smoke benchmark", not bad_loss and not bad_acc and grid_seconds < 3600,
                f"{len(runs)} runs; pretext curves {'; '.join(curves)}; classifier accuracy "
                f"{min(accs):.1f}..{max(accs):.1f}%; grid wall time {grid_seconds / 60:.1f} min on "
                f"{torch.get_num_threads()} thread(s)"
                + (f"; loss not decreasing: {bad_loss}" if bad_loss else "")
                + (f"; at or below chance: {bad_acc}" if bad_acc else ""))
    assert ok


def _result(path: Path) -> RunResult:
    return RunResult.from_json((path / "result.json").read_text())


def _finetune_cached(cfg, method, ckpt, fraction, run_dir: Path, **kw) -> RunResult:
    if (run_dir / "manifest.json").exists():
        return _result(run_dir)
    return run_finetune(cfg, method, ckpt, fraction, run_dir, **kw)


def _seeded(cfg, seed):
    return replace(cfg, train=replace(cfg.train, seed=seed))


@pytest.fixture(scope="session")
def robustness(desk):
    """Fine-tune F1 at fractions 1.0 and 0.25 over three seeds: best SSL method vs a scratch encoder."""
    cfg, root, _, base = desk
    top = max(cfg.benchmark.pretrain_fractions)
    best = max(cfg.benchmark.methods, key=lambda m: _result(root / f"finetune-{m}-p{top:g}-f1").report.f1)
    ckpt = root / f"pretrain-{best}-p{top:g}" / "checkpoints" / "last.safetensors"
    extra = base / "robustness"
    f1 = {}
    for seed in SEEDS:
        for frac in (1.0, 0.25):
            s_cfg = _seeded(cfg, seed)
            f1[best, frac, seed] = _finetune_cached(s_cfg, best, ckpt, frac, extra / f"{best}-s{seed}-f{frac:g}",
                                                    pretrain_fraction=top).report.f1
            f1["scratch", frac, seed] = _finetune_cached(s_cfg, "scratch", None, frac,
                                                         extra / f"scratch-s{seed}-f{frac:g}").report.f1
    return best, f1


@pytest.mark.slow
def test_criterion_10_ssl_more_robust_to_less_labeled_data(robustness):
    best, f1 = robustness
    drop = {m: statistics.median(f1[m, 1.0, s] - f1[m, 0.25, s] for s in SEEDS) for m in (best, "scratch")}
    per_seed = ", ".join(f"s{s}: {best} {f1[best, 1.0, s]:.1f}->{f1[best, 0.25, s]:.1f}, "
                         f"scratch {f1['scratch', 1.0, s]:.1f}->{f1['scratch', 0.25, s]:.1f}" for s in SEEDS)
    ok = record("10", "SSL drop <= scratch drop (1.0 -> 0.25)", drop[best] <= drop["scratch"],
                f"median F1 drop {best} {drop[best]:.2f} vs scratch {drop['scratch']:.2f} ({per_seed})")
    assert ok


@pytest.mark.slow
def test_criterion_11_class_weighting_helps_smallest_class(desk):
    cfg, _, _, base = desk
    counts = imbalanced_counts(1600)
    corpus = base / "imbalanced"
    if not corpus.exists():
        generate_synthetic(SyntheticSpec(counts, 64, 1), corpus)
    icfg = replace(cfg, dataset=replace(cfg.dataset, root=str(corpus)))
    smallest = min(counts, key=counts.get)
    recall = {}
    for seed in SEEDS:
        for weighted in (False, True):
            r = _finetune_cached(_seeded(icfg, seed), "scratch", None, 1.0,
                                 base / "imbalance" / f"s{seed}-{'w' if weighted else 'u'}", weighted=weighted)
            recall[weighted, seed] = r.report.per_class_recall[smallest]
    med = {w: statistics.median(recall[w, s] for s in SEEDS) for w in (False, True)}
    ok = record("11", "class weighting keeps smallest-class recall", med[True] >= med[False],
                f"corpus {counts}; class {smallest} recall median weighted {med[True]:.1f} vs unweighted "
                f"{med[False]:.1f} (per seed {[round(recall[True, s], 1) for s in SEEDS]} vs "
                f"{[round(recall[False, s], 1) for s in SEEDS]})")
    assert ok


@pytest.mark.slow
def test_criterion_12_reproducibility(desk, tmp_path):
    cfg, root, _, _ = desk
    top = max(cfg.benchmark.pretrain_fractions)
    method = cfg.benchmark.methods[0]
    name = f"finetune-{method}-p{top:g}-f0.25"
    ckpt = root / f"pretrain-{method}-p{top:g}" / "checkpoints" / "last.safetensors"
    again = run_finetune(cfg, method, ckpt, 0.25, tmp_path / name, pretrain_fraction=top)
    same_ft = again.comparable() == _result(root / name).comparable()
    short = replace(cfg, pretrain=replace(cfg.pretrain, epochs=2))
    a = run_pretrain(short, "spark", 0.5, tmp_path / "pa")
    b = run_pretrain(short, "spark", 0.5, tmp_path / "pb")
    sa, sb = load_checkpoint(a.checkpoint).states["method"], load_checkpoint(b.checkpoint).states["method"]
    same_pt = a.step_losses == b.step_losses and all(torch.equal(sa[k], sb[k]) for k in sa)
    ok = record("12", "reproducibility (exact on CPU)", same_ft and same_pt,
                f"{name} rerun history/report identical: {same_ft}; SparK 2-epoch pretext rerun "
                f"losses and weights identical: {same_pt}")
    assert ok


@pytest.mark.slow
def test_swav_prototype_usage_after_desk_training(desk):
    cfg, root, _, _ = desk
    top = max(cfg.benchmark.pretrain_fractions)
    ck = load_checkpoint(root / f"pretrain-swav-p{top:g}" / "checkpoints" / "last.safetensors")
    swav_cfg = cfg.method_config("swav")
    model = _ssl_method(cfg, "swav")
    model.load_state_dict(ck.states["method"])
    model.eval()
    manifest = dataset_manifest(cfg)
    test = ssl_split(cfg, manifest).view(manifest, "test")
    side = cfg.encoder.input_side
    with torch.no_grad():
        z = model.embed(_eval_tensor(test.images(side), side))
    h = usage_entropy(z, model.bank, swav_cfg.temperature)
    k = swav_cfg.n_prototypes
    ok = record("7b", "derived: SwAV prototype usage entropy > 0.5 ln K", h > 0.5 * math.log(k),
                f"{h:.3f} nats on {len(test)} held-out images vs 0.5 ln {k} = {0.5 * math.log(k):.3f}")
    assert ok
