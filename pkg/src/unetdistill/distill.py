"""Task, output-level KD and feature-level KD losses and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .validation import DimensionError, check_same_shape


@dataclass(frozen=True)
class DistillLossWeights:
    lambda_out_kd: float = 1.0
    lambda_feat_kd: float = 1.0

    def __post_init__(self):
        if self.lambda_out_kd < 0 or self.lambda_feat_kd < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class FeatureLoss:
    total: torch.Tensor
    per_tap: dict[str, torch.Tensor]
    skipped: list[str] = field(default_factory=list)

    @property
    def report(self) -> str:
        msg = f"{len(self.per_tap)} shared taps"
        if self.skipped:
            msg += f", {len(self.skipped)} unmatched skipped"
        return msg


@dataclass
class LossBreakdown:
    task: torch.Tensor
    out_kd: torch.Tensor
    feat_kd: torch.Tensor
    total: torch.Tensor
    per_tap: dict[str, torch.Tensor]
    weights: DistillLossWeights = DistillLossWeights()

    def as_floats(self) -> dict:
        return {
            "task": float(self.task),
            "out_kd": float(self.out_kd),
            "feat_kd": float(self.feat_kd),
            "total": float(self.total),
            "per_tap": {k: float(v) for k, v in sorted(self.per_tap.items())},
        }


def task_loss(eps: torch.Tensor, eps_student: torch.Tensor) -> torch.Tensor:
    check_same_shape(eps, eps_student, "eps", "eps_student")
    return ((eps - eps_student) ** 2).mean()


def out_kd_loss(eps_teacher: torch.Tensor, eps_student: torch.Tensor) -> torch.Tensor:
    check_same_shape(eps_teacher, eps_student, "eps_teacher", "eps_student")
    return ((eps_teacher.detach() - eps_student) ** 2).mean()


def feat_kd_loss(teacher_taps, student_taps) -> FeatureLoss:
    """Sum over shared tap keys of the per-key mean squared feature difference."""
    shared = sorted(set(teacher_taps) & set(student_taps))
    skipped = sorted(set(teacher_taps) ^ set(student_taps))
    per_tap = {}
    for key in shared:
        t, s = teacher_taps[key], student_taps[key]
        if tuple(t.shape) != tuple(s.shape):
            raise DimensionError(
                f"tap {key}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}"
            )
        per_tap[key] = ((t.detach() - s) ** 2).mean()
    if per_tap:
        total = torch.stack(list(per_tap.values())).sum()
    else:
        ref = next(iter(student_taps.values()), None)
        total = torch.zeros((), dtype=ref.dtype if ref is not None else torch.float32)
    return FeatureLoss(total, per_tap, skipped)


def total_loss(eps, eps_teacher, eps_student, teacher_taps, student_taps,
               weights: DistillLossWeights = DistillLossWeights()) -> LossBreakdown:
    task = task_loss(eps, eps_student)
    out = out_kd_loss(eps_teacher, eps_student)
    feat = feat_kd_loss(teacher_taps, student_taps)
    total = task + weights.lambda_out_kd * out + weights.lambda_feat_kd * feat.total
    return LossBreakdown(task, out, feat.total, total, feat.per_tap, weights)
