"""Train each pretext method for a few steps on a small synthetic corpus.

Run: python demos/02_pretext_methods.py [--steps 15] [--workdir /tmp/ucssl-demo]
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from ucssl.augmentations import AugmentConfig, MultiCropConfig
from ucssl.backbone import EncoderSpec, build_encoder
from ucssl.datasets import SyntheticSpec, generate_synthetic, stratified_split
from ucssl.pretext import (
    BYOL, ByolConfig, MoCo, MocoConfig, SparK, SparkConfig, SwAV, SwavConfig, pretext_step, usage_entropy,
)


def build(name: str, spec: EncoderSpec):
    enc = build_encoder(spec, seed=0)
    aug = AugmentConfig(output_side=spec.input_side)
    if name == "byol":
        return BYOL(enc, ByolConfig(hidden_dim=128), aug)
    if name == "moco":
        return MoCo(enc, MocoConfig(hidden_dim=128, queue_capacity=64, temperature=0.2), aug)
    if name == "swav":
        crops = MultiCropConfig(n_global=2, global_side=64, n_local=2, local_side=32)
        return SwAV(enc, SwavConfig(hidden_dim=128, n_prototypes=16, multi_crop=crops), aug)
    return SparK(enc, SparkConfig(patch_size=32))


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=15)
    p.add_argument("--workdir", default="/tmp/ucssl-demo")
    args = p.parse_args()

    corpus = Path(args.workdir) / "corpus"
    manifest = generate_synthetic(SyntheticSpec(16, 64, seed=0), corpus)
    split = stratified_split(manifest, (0.5, 0.3, 0.2), 0, ("pretrain", "finetune", "test"))
    images = split.view(manifest, "pretrain", label_visible=False).images(64)
    spec = EncoderSpec.residual_small(64)

    for name in ("byol", "moco", "swav", "spark"):
        torch.manual_seed(0)
        method = build(name, spec)
        opt = torch.optim.AdamW([q for q in method.parameters() if q.requires_grad], lr=1e-3)
        # the same augmented views every step isolate optimisation from augmentation noise
        views = method.views(images, list(range(len(images))))
        if name == "moco":
            # an empty queue has no negatives; fill it with keys before the first step
            method.train()
            method.warm_queue(views)
            method.warm_queue(views)
        losses = [pretext_step(method, views, opt) for _ in range(args.steps)]
        print(f"{name:>5}: loss {losses[0]:.3f} -> {losses[-1]:.3f} over {args.steps} steps")
        if name == "swav":
            method.eval()
            with torch.no_grad():
                h = usage_entropy(method.embed(views[0]), method.bank, method.cfg.temperature)
            print(f"       prototype usage entropy {h:.2f} nats (uniform = {np.log(16):.2f})")


if __name__ == "__main__":
    main()
