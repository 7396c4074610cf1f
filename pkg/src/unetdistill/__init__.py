"""Prune diffusion U-Nets by removing blocks, then retrain them with layer-level distillation."""

__version__ = "0.1.0"

from .backbone import FeatureTapRegistry, UNetModel, build_unet, describe_taps, predict_tap_shapes
from .config import MidBlockConfig, UNetConfig, sdxl_reference_config, toy_config, validate_config
from .diffusion import add_noise, cfg_combine, ddpm_step, make_schedule, sample
from .distill import DistillLossWeights, feat_kd_loss, out_kd_loss, task_loss, total_loss
from .pruning import (
    PruningPlan,
    RemovalDirective,
    RemovalOrder,
    apply_plan,
    canonical_plan,
    count_params,
    estimate_flops,
    inherit_weights,
    progressive_plans,
    validate_plan,
)

__all__ = [
    "DistillLossWeights",
    "FeatureTapRegistry",
    "MidBlockConfig",
    "PruningPlan",
    "RemovalDirective",
    "RemovalOrder",
    "UNetConfig",
    "UNetModel",
    "add_noise",
    "apply_plan",
    "build_unet",
    "canonical_plan",
    "cfg_combine",
    "count_params",
    "ddpm_step",
    "describe_taps",
    "estimate_flops",
    "feat_kd_loss",
    "inherit_weights",
    "make_schedule",
    "out_kd_loss",
    "predict_tap_shapes",
    "progressive_plans",
    "sample",
    "sdxl_reference_config",
    "task_loss",
    "toy_config",
    "total_loss",
    "validate_config",
    "validate_plan",
]
