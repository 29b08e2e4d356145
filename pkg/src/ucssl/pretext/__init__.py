"""Self-supervised pretext methods sharing the :class:`PretextMethod` surface."""
from ucssl.pretext.base import PretextMethod, pretext_step
from ucssl.pretext.byol import BYOL, ByolConfig, byol_loss, byol_step
from ucssl.pretext.moco import FeatureQueue, MoCo, MocoConfig, info_nce, moco_step
from ucssl.pretext.spark import (
    PatchTargets, SparK, SparkConfig, SparkDecoder, decode, densify, masked_l2, masked_patch_mse,
    patchify_normalize, spark_step,
)
from ucssl.pretext.swav import (
    PrototypeBank, SwAV, SwavConfig, compute_assignments, normalize_embed, sinkhorn, swapped_loss,
    swav_loss, swav_step, usage_entropy,
)

METHODS = {"byol": BYOL, "moco": MoCo, "swav": SwAV, "spark": SparK}
DISPLAY_NAMES = {"byol": "BYOL", "moco": "MoCo", "swav": "SwAV", "spark": "SparK", "supervised": "Supervised"}

__all__ = [
    "PretextMethod", "pretext_step", "METHODS", "DISPLAY_NAMES",
    "BYOL", "ByolConfig", "byol_loss", "byol_step",
    "MoCo", "MocoConfig", "FeatureQueue", "info_nce", "moco_step",
    "SwAV", "SwavConfig", "PrototypeBank", "normalize_embed", "sinkhorn", "compute_assignments",
    "swapped_loss", "swav_loss", "usage_entropy", "swav_step",
    "SparK", "SparkConfig", "SparkDecoder", "PatchTargets", "patchify_normalize", "densify", "decode",
    "masked_l2", "masked_patch_mse", "spark_step",
]
