import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from _fd import relative_error
from ucssl import ValidationError
from ucssl.backbone import EncoderSpec, build_encoder
from ucssl.datasets import class_weights, stratified_split, subsample
from ucssl.pretext import MoCo, MocoConfig, SparK, SparkConfig
from ucssl.training import (
    Checkpoint, Interrupted, PretrainConfig, RunResult, TrainConfig, cosine_lr, finetune, finetune_views, fit,
    load_checkpoint, pretrain, save_checkpoint, train_supervised, weighted_cross_entropy,
)

SPEC = EncoderSpec.residual_small(64)
QUICK = TrainConfig(epochs=2, batch_size=16, seed=0, classifier_widths=(32, 16))


@pytest.fixture(scope="module")
def ssl_split(tiny_corpus):
    return stratified_split(tiny_corpus, (0.5, 0.3, 0.2), 0, ("pretrain", "finetune", "test"))


@pytest.fixture(scope="module")
def sup_split(tiny_corpus):
    return stratified_split(tiny_corpus, (0.6, 0.2, 0.2), 0, ("train", "val", "test"))


# ---------------------------------------------------------------- loss


def test_weighted_cross_entropy_examples():
    logits = torch.randn(6, 4, generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([0, 1, 2, 3, 1, 0])
    plain = F.cross_entropy(logits, labels)
    assert weighted_cross_entropy(logits, labels).item() == pytest.approx(plain.item(), abs=1e-7)
    assert weighted_cross_entropy(logits, labels, [2.0] * 4).item() == pytest.approx(plain.item(), abs=1e-7)
    sure = torch.full((2, 4), -1e4)
    sure[0, 2] = sure[1, 0] = 1e4
    assert weighted_cross_entropy(sure, torch.tensor([2, 0])).item() == 0.0
    flat = torch.zeros(2, 4)
    loss = weighted_cross_entropy(flat, torch.tensor([0, 1]), [1.0, 3.0, 1.0, 1.0])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)
    assert loss.item() == pytest.approx(1.3863, abs=1e-4)
    cw = class_weights({0: 10, 1: 30, 2: 10, 3: 10})
    direct = weighted_cross_entropy(logits, labels, cw.as_array())
    assert weighted_cross_entropy(logits, labels, cw).item() == direct.item()
    with pytest.raises(ValidationError):
        weighted_cross_entropy(flat, torch.tensor([0, 4]))
    with pytest.raises(ValidationError):
        weighted_cross_entropy(flat, torch.tensor([0, 1]), [1.0, 1.0])


def test_weighted_cross_entropy_gradient_fd():
    g = torch.Generator().manual_seed(4)
    for _ in range(10):
        labels = torch.randint(0, 4, (5,), generator=g)
        w = torch.rand(4, generator=g, dtype=torch.float64) + 0.2
        err = relative_error(lambda z: weighted_cross_entropy(z, labels, w),
                             [torch.randn(5, 4, generator=g, dtype=torch.float64)])
        assert err <= 1e-4


def test_cosine_schedule_endpoints():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_and_hash_warning(tmp_path):
    enc = build_encoder(SPEC, 0)
    opt = torch.optim.AdamW(enc.parameters(), lr=1e-3)
    enc(torch.randn(2, 3, 64, 64)).top.sum().backward()
    opt.step()
    ck = Checkpoint({"encoder": enc.state_dict()}, opt.state_dict(), step=3, epoch=1,
                    config={"a": 1}, extra={"position": 2})
    path = save_checkpoint(tmp_path / "c.safetensors", ck)
    back = load_checkpoint(path)
    assert back.step == 3 and back.epoch == 1 and back.extra == {"position": 2}
    for k, v in enc.state_dict().items():
        assert torch.equal(back.states["encoder"][k], v)
    restored = torch.optim.AdamW(enc.parameters(), lr=1e-3)
    restored.load_state_dict(back.optimizer)
    for pid, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            assert torch.equal(torch.as_tensor(restored.state_dict()["state"][pid][k]), torch.as_tensor(v))
    with pytest.warns(UserWarning, match="config"):
        load_checkpoint(path, expected_hash="000000000000")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, expected_hash=back.config_hash)


def _moco(seed=0):
    return MoCo(build_encoder(SPEC, seed), MocoConfig(queue_capacity=32, hidden_dim=64, latent_dim=32), seed=seed)


def test_pretrain_resume_mid_epoch_is_exact(tiny_corpus, ssl_split, tmp_path):
    view = ssl_split.view(tiny_corpus, "pretrain", label_visible=False)
    cfg = PretrainConfig(epochs=2, batch_size=16, seed=0)
    full = pretrain(_moco(), view, cfg, tmp_path / "full")
    with pytest.raises(Interrupted):
        pretrain(_moco(), view, cfg, tmp_path / "cut", should_stop=lambda step: step == 7)
    resumed = pretrain(_moco(), view, cfg, tmp_path / "cut", resume=True)
    assert resumed.step_losses == full.step_losses
    assert resumed.epoch_losses == full.epoch_losses
    a, b = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
    for k, v in a.states["method"].items():
        assert torch.equal(v, b.states["method"][k]), k
    assert (tmp_path / "full" / "curves.csv").read_text() == (tmp_path / "cut" / "curves.csv").read_text()
    with pytest.raises(FileNotFoundError):
        pretrain(_moco(), view, cfg, tmp_path / "nothing", resume=True)


# ---------------------------------------------------------------- classifier training


def test_frozen_backbone_is_unchanged(tiny_corpus, sup_split):
    enc = build_encoder(SPEC, 0)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    cfg = replace(QUICK, mode="supervised", freeze_backbone=True)
    result = train_supervised(cfg, tiny_corpus, sup_split, encoder=enc)
    # parameters and batch-norm statistics alike
    assert all(torch.equal(before[k], v) for k, v in enc.state_dict().items())
    assert len(result.history) == 2


def test_subsample_is_nested_per_class(tiny_corpus, ssl_split):
    full, _, _ = finetune_views(tiny_corpus, ssl_split, replace(QUICK, data_fraction=1.0))
    half, _, _ = finetune_views(tiny_corpus, ssl_split, replace(QUICK, data_fraction=0.5))
    assert set(half.indices) <= set(full.indices)
    for c, n in full.class_counts().items():
        assert half.class_counts()[c] == math.floor(n / 2 + 0.5)
    sup = stratified_split(tiny_corpus, (0.6, 0.2, 0.2), 0, ("train", "val", "test")).view(tiny_corpus, "train")
    assert set(subsample(sup, 0.5, 0).indices) <= set(sup.indices)


def test_zero_epoch_pretext_equals_scratch(tiny_corpus, ssl_split, tmp_path):
    view = ssl_split.view(tiny_corpus, "pretrain", label_visible=False)
    method = SparK(build_encoder(SPEC, QUICK.seed), SparkConfig(patch_size=32), seed=0)
    res = pretrain(method, view, PretrainConfig(epochs=0, batch_size=16), tmp_path / "p0")
    a = finetune(res.checkpoint, QUICK, tiny_corpus, ssl_split, method="X")
    b = finetune(None, QUICK, tiny_corpus, ssl_split, spec=SPEC, method="X")
    assert a.comparable() == b.comparable()


def test_zero_backbone_lr_equals_freeze(tiny_corpus, ssl_split):
    a = finetune(None, replace(QUICK, lr_backbone_scale=0.0), tiny_corpus, ssl_split, spec=SPEC)
    b = finetune(None, replace(QUICK, freeze_backbone=True), tiny_corpus, ssl_split, spec=SPEC)
    assert a.history == b.history
    assert a.report.to_dict() == b.report.to_dict()


def test_reproducible_and_val_best_selection(tiny_corpus, ssl_split, tmp_path):
    cfg = replace(QUICK, epochs=3)
    a = finetune(None, cfg, tiny_corpus, ssl_split, spec=SPEC, out_dir=tmp_path / "a")
    b = finetune(None, cfg, tiny_corpus, ssl_split, spec=SPEC, out_dir=tmp_path / "b")
    assert a.history == b.history and a.report.to_dict() == b.report.to_dict()
    f1s = [h["val_f1"] for h in a.history]
    assert a.best_epoch == int(np.argmax(f1s))
    assert a.val_report.f1 == pytest.approx(f1s[a.best_epoch])
    assert load_checkpoint(a.best_checkpoint).epoch == a.best_epoch
    back = RunResult.from_json(a.to_json())
    assert back.comparable() == a.comparable()


def test_split_and_checkpoint_errors(tiny_corpus, ssl_split, sup_split, tmp_path):
    with pytest.raises(ValidationError, match="missing"):
        train_supervised(QUICK, tiny_corpus, ssl_split, spec=SPEC)
    with pytest.raises(ValidationError, match="missing"):
        finetune(None, QUICK, tiny_corpus, sup_split, spec=SPEC)
    foreign = save_checkpoint(tmp_path / "x.safetensors", Checkpoint({"head": {"w": torch.zeros(2)}}))
    with pytest.raises(ValidationError, match="incompatible"):
        finetune(foreign, QUICK, tiny_corpus, ssl_split, spec=SPEC)
    wrong = save_checkpoint(tmp_path / "y.safetensors", Checkpoint({"encoder": {"w": torch.zeros(2)}}))
    with pytest.raises(ValidationError, match="incompatible"):
        finetune(wrong, QUICK, tiny_corpus, ssl_split, spec=SPEC)
    with pytest.raises(ValidationError):
        TrainConfig(data_fraction=0)
    train, val, test = finetune_views(tiny_corpus, ssl_split, QUICK)
    with pytest.raises(ValidationError, match="empty"):
        fit(build_encoder(SPEC, 0), train, val.__class__(val.source, ()), test, QUICK, "X")


def test_weighted_run_records_weights_source(tiny_corpus, ssl_split):
    r = finetune(None, replace(QUICK, class_weighting=True, epochs=1), tiny_corpus, ssl_split, spec=SPEC)
    assert sum(r.train_counts.values()) == len(finetune_views(tiny_corpus, ssl_split, QUICK)[0])
