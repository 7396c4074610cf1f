"""Teacher training, teacher finetuning and layer-level distillation loops."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .backbone import UNetModel, build_unet
from .checkpoint import Checkpoint, as_checkpoint, save_checkpoint, state_hash
from .config import UNetConfig
from .corpus import FrozenEncoders, encode_corpus
from .diffusion import DiffusionSchedule, add_noise
from .distill import DistillLossWeights, LossBreakdown, total_loss
from .pruning import (
    EMPTY_PLAN,
    PlanError,
    PruningPlan,
    RemovalOrder,
    apply_plan,
    check_plan,
    count_params,
    incremental_plan,
    inherit_weights,
    progressive_plans,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_steps: int = 2000
    optimizer: str = "Adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = None
    cond_dropout: float = 0.1
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.optimizer != "Adam":
            raise ValueError("only the Adam optimizer is supported")
        if not 0 <= self.cond_dropout <= 1:
            raise ValueError("cond_dropout must lie in [0, 1]")

    def replace(self, **changes) -> "TrainHyper":
        return TrainHyper(**{**asdict(self), **changes})


# Published full-scale settings; documentation presets, far too large for CPU.
PUBLISHED_PRESETS = {
    "ssd_1b": TrainHyper(learning_rate=1e-5, batch_size=32, max_steps=251_000),
    "vega": TrainHyper(learning_rate=1e-5, batch_size=128, max_steps=540_000),
}


@dataclass
class TeacherSchedule:
    entries: list = field(default_factory=list)   # [(checkpoint ref, start_step)]

    def __post_init__(self):
        starts = [s for _, s in self.entries]
        if not starts or starts[0] != 0:
            raise ValueError("the first teacher must start at step 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("teacher start steps must be strictly increasing")

    @classmethod
    def single(cls, teacher) -> "TeacherSchedule":
        return cls([(teacher, 0)])


@dataclass
class DistillRunConfig:
    plan: PruningPlan
    teachers: TeacherSchedule
    weights: DistillLossWeights = DistillLossWeights()
    hyper: TrainHyper = TrainHyper(max_steps=3000)


@dataclass
class EncodedData:
    latents: torch.Tensor
    contexts: torch.Tensor
    null_context: torch.Tensor

    def __len__(self):
        return self.latents.shape[0]


def encode_data(data, encoders: FrozenEncoders | None) -> EncodedData:
    if isinstance(data, EncodedData):
        return data
    encoders = encoders or FrozenEncoders()
    latents, contexts = encode_corpus(data, encoders)
    return EncodedData(latents, contexts, encoders.null_context(1)[0])


def make_optimizer(params, hyper: TrainHyper) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=hyper.learning_rate, betas=hyper.adam_betas)


class _Batcher:
    """Draws (z0, context, t, eps) batches from one seeded generator."""

    def __init__(self, data: EncodedData, hyper: TrainHyper, schedule: DiffusionSchedule,
                 dtype=torch.float32):
        self.data, self.hyper, self.schedule, self.dtype = data, hyper, schedule, dtype
        self.gen = torch.Generator().manual_seed(hyper.seed)

    def next(self):
        b = self.hyper.batch_size
        idx = torch.randint(0, len(self.data), (b,), generator=self.gen)
        z0 = self.data.latents[idx].to(self.dtype)
        context = self.data.contexts[idx].to(self.dtype)
        drop = torch.rand(b, generator=self.gen) < self.hyper.cond_dropout
        if bool(drop.any()):
            context = context.clone()
            context[drop] = self.data.null_context.to(self.dtype)
        t = torch.randint(0, self.schedule.T, (b,), generator=self.gen)
        eps = torch.randn(z0.shape, generator=self.gen, dtype=self.dtype)
        return z0, context, t, eps


def _check_finite(loss: float, step: int, hyper: TrainHyper, history: list):
    if not math.isfinite(loss):
        recent = [r["loss"] if "loss" in r else r.get("total") for r in history[-5:]]
        raise TrainingDiverged(
            f"non-finite loss at step {step} (lr={hyper.learning_rate}, last losses {recent})"
        )


def _clip(params, hyper):
    if hyper.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, hyper.grad_clip)


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _fit_denoiser(model: UNetModel, data: EncodedData, hyper: TrainHyper,
                  schedule: DiffusionSchedule, steps: int) -> list[dict]:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, hyper)
    batcher = _Batcher(data, hyper, schedule, next(model.parameters()).dtype)
    curve: list[dict] = []
    model.train()
    for step in range(steps):
        z0, context, t, eps = batcher.next()
        z_t = add_noise(z0, eps, t, schedule)
        pred, _ = model(z_t, t, context)
        loss = ((pred - eps) ** 2).mean()
        value = loss.item()
        _check_finite(value, step, hyper, curve)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip(params, hyper)
        opt.step()
        curve.append({"step": step, "loss": value})
        if hyper.eval_every and (step + 1) % hyper.eval_every == 0:
            logger.info("step %d loss %.5f", step + 1, value)
    model.eval()
    return curve


def _finish(model, meta, curve, out_dir) -> Checkpoint:
    meta["metrics"] = {
        "steps": len(curve),
        "initial_loss": curve[0]["loss"] if curve else None,
        "final_loss": curve[-1]["loss"] if curve else None,
    }
    path = None
    if out_dir is not None:
        path = save_checkpoint(out_dir, model, meta)
        _write_jsonl(Path(out_dir) / "metrics.jsonl", curve)
    ckpt = Checkpoint(model, meta, path)
    ckpt.loss_curve = curve
    return ckpt


def train_teacher(corpus, config: UNetConfig, hyper: TrainHyper, schedule: DiffusionSchedule,
                  encoders: FrozenEncoders | None = None, out_dir=None,
                  name: str = "teacher") -> Checkpoint:
    """Plain epsilon-prediction training with condition dropout."""
    data = encode_data(corpus, encoders)
    model = build_unet(config, seed=hyper.seed, num_timesteps=schedule.T)
    curve = _fit_denoiser(model, data, hyper, schedule, hyper.max_steps)
    meta = {"name": name, "kind": "teacher", "hyper": asdict(hyper),
            "diffusion": schedule.to_dict()}
    return _finish(model, meta, curve, out_dir)


def finetune_teacher(checkpoint, corpus_subset, hyper: TrainHyper, schedule: DiffusionSchedule,
                     encoders: FrozenEncoders | None = None, steps: int | None = None,
                     out_dir=None, name: str | None = None) -> Checkpoint:
    """Continue training a teacher on a style-biased subset to get a second expert."""
    base = as_checkpoint(checkpoint)
    steps = hyper.max_steps if steps is None else steps
    model = copy.deepcopy(base.model)
    for p in model.parameters():
        p.requires_grad_(True)
    data = encode_data(corpus_subset, encoders)
    curve = _fit_denoiser(model, data, hyper, schedule, steps)
    meta = {"name": name or f"{base.name}-ft", "kind": "teacher", "parent": base.name,
            "hyper": asdict(hyper), "diffusion": schedule.to_dict()}
    return _finish(model, meta, curve, out_dir)


def _freeze(model: UNetModel) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def _combine(task, out, feat, weights: DistillLossWeights) -> float:
    return task + weights.lambda_out_kd * out + weights.lambda_feat_kd * feat


@torch.no_grad()
def evaluate(student: UNetModel, teacher: UNetModel, heldout, schedule: DiffusionSchedule,
             weights: DistillLossWeights = DistillLossWeights(),
             encoders: FrozenEncoders | None = None, seed: int = 1234,
             batch_size: int = 64) -> dict:
    """Mean loss breakdown over a held-out set with fixed timestep and noise draws."""
    data = encode_data(heldout, encoders)
    dtype = next(student.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    n = len(data)
    t_all = torch.randint(0, schedule.T, (n,), generator=gen)
    eps_all = torch.randn(data.latents.shape, generator=gen, dtype=dtype)
    sums = {"task": 0.0, "out_kd": 0.0, "feat_kd": 0.0}
    per_tap: dict[str, float] = {}
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        z0 = data.latents[sl].to(dtype)
        ctx = data.contexts[sl].to(dtype)
        t, eps = t_all[sl], eps_all[sl]
        z_t = add_noise(z0, eps, t, schedule)
        eps_t, taps_t = teacher(z_t, t, ctx, capture_taps=True)
        eps_s, taps_s = student(z_t, t, ctx, capture_taps=True)
        parts = total_loss(eps, eps_t, eps_s, taps_t, taps_s, weights)
        frac = (sl.stop - sl.start) / n
        sums["task"] += frac * float(parts.task)
        sums["out_kd"] += frac * float(parts.out_kd)
        sums["feat_kd"] += frac * float(parts.feat_kd)
        for k, v in parts.per_tap.items():
            per_tap[k] = per_tap.get(k, 0.0) + frac * float(v)
    sums["total"] = _combine(sums["task"], sums["out_kd"], sums["feat_kd"], weights)
    sums["per_tap"] = dict(sorted(per_tap.items()))
    return sums


@dataclass
class DistillResult:
    checkpoint: Checkpoint
    train_log: list
    eval_log: list

    @property
    def final_eval(self) -> dict:
        return self.eval_log[-1]


def _resolve_teachers(schedule: TeacherSchedule) -> list[tuple[Checkpoint, int]]:
    teachers = [(as_checkpoint(ref), start) for ref, start in schedule.entries]
    first = teachers[0][0].config
    for ckpt, _ in teachers[1:]:
        if ckpt.config != first:
            raise PlanError(f"teacher {ckpt.name} has a different config from {teachers[0][0].name}")
    return teachers


def distill(run: DistillRunConfig, corpus, schedule: DiffusionSchedule,
            encoders: FrozenEncoders | None = None, heldout=None,
            init_student: UNetModel | None = None, out_dir=None,
            name: str = "student") -> DistillResult:
    """Train a pruned student against a (possibly swapped) teacher with the 3-term loss."""
    hyper, weights = run.hyper, run.weights
    teachers = _resolve_teachers(run.teachers)
    teacher_config = teachers[0][0].config
    check_plan(teacher_config, run.plan)
    expected = apply_plan(teacher_config, run.plan)
    for ckpt, _ in teachers:
        _freeze(ckpt.model)
    hashes_before = {ckpt.name: state_hash(ckpt.model) for ckpt, _ in teachers}

    if init_student is None:
        student = inherit_weights(teachers[0][0].model, run.plan)
    else:
        if init_student.config != expected:
            raise PlanError("init_student config does not match the plan applied to the teacher")
        student = init_student
    for p in student.parameters():
        p.requires_grad_(True)
    student.train()

    data = encode_data(corpus, encoders)
    held = encode_data(heldout, encoders) if heldout is not None else None

    def teacher_at(step: int) -> Checkpoint:
        active = teachers[0][0]
        for ckpt, start in teachers:
            if start <= step:
                active = ckpt
        return active

    eval_log: list[dict] = []

    def run_eval(step: int):
        if held is None:
            return
        teacher = teacher_at(step)
        student.eval()
        rec = evaluate(student, teacher.model, held, schedule, weights)
        student.train()
        rec.update(step=step, teacher_id=teacher.name, split="heldout")
        eval_log.append(rec)
        logger.info("eval step %d teacher %s task %.5f out_kd %.5f feat_kd %.5f",
                    step, teacher.name, rec["task"], rec["out_kd"], rec["feat_kd"])

    params = list(student.parameters())
    opt = make_optimizer(params, hyper)
    batcher = _Batcher(data, hyper, schedule, next(student.parameters()).dtype)
    train_log: list[dict] = []
    run_eval(0)
    for step in range(hyper.max_steps):
        teacher = teacher_at(step)
        z0, context, t, eps = batcher.next()
        z_t = add_noise(z0, eps, t, schedule)
        with torch.no_grad():
            eps_t, taps_t = teacher.model(z_t, t, context, capture_taps=True)
        eps_s, taps_s = student(z_t, t, context, capture_taps=True)
        parts: LossBreakdown = total_loss(eps, eps_t, eps_s, taps_t, taps_s, weights)
        task, out, feat = parts.task.item(), parts.out_kd.item(), parts.feat_kd.item()
        rec = {"step": step, "teacher_id": teacher.name, "task": task, "out_kd": out,
               "feat_kd": feat, "total": _combine(task, out, feat, weights)}
        _check_finite(parts.total.item(), step, hyper, train_log)
        train_log.append(rec)
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        _clip(params, hyper)
        opt.step()
        done = step + 1
        if hyper.eval_every and done % hyper.eval_every == 0 and done != hyper.max_steps:
            run_eval(done)
    run_eval(hyper.max_steps)
    student.eval()

    hashes_after = {ckpt.name: state_hash(ckpt.model) for ckpt, _ in teachers}
    if hashes_after != hashes_before:
        raise RuntimeError("teacher weights changed during distillation")

    meta = {
        "name": name,
        "kind": "student",
        "plan": run.plan.to_dict(),
        "teachers": [{"id": c.name, "start_step": s, "hash": hashes_before[c.name]}
                     for c, s in teachers],
        "weights": asdict(weights),
        "hyper": asdict(hyper),
        "diffusion": schedule.to_dict(),
        "params": count_params(student.config),
        "provenance": getattr(student, "provenance", {}),
        "final_eval": eval_log[-1] if eval_log else None,
    }
    path = None
    if out_dir is not None:
        path = save_checkpoint(out_dir, student, meta)
        _write_jsonl(Path(out_dir) / "metrics.jsonl", eval_log)
        _write_jsonl(Path(out_dir) / "train_log.jsonl", train_log)
    return DistillResult(Checkpoint(student, meta, path), train_log, eval_log)


def progressive_distill(corpus, fractions, base_run: DistillRunConfig,
                        schedule: DiffusionSchedule, encoders: FrozenEncoders | None = None,
                        heldout=None, out_dir=None,
                        order: RemovalOrder = RemovalOrder.DEEPEST_FIRST) -> list[DistillResult]:
    """Distill a chain of nested students, each initialized from the previous level."""
    teachers = _resolve_teachers(base_run.teachers)
    config = teachers[0][0].config
    plans = progressive_plans(config, fractions, order)
    results = []
    previous_plan, previous_model = EMPTY_PLAN, teachers[0][0].model
    for plan in plans:
        step_plan = incremental_plan(config, previous_plan, plan)
        init = inherit_weights(previous_model, step_plan)
        run = DistillRunConfig(plan, base_run.teachers, base_run.weights, base_run.hyper)
        level_dir = None if out_dir is None else Path(out_dir) / plan.name
        result = distill(run, corpus, schedule, encoders, heldout, init_student=init,
                         out_dir=level_dir, name=plan.name)
        if level_dir is not None:
            plan.save(level_dir / "plan.json")
        results.append(result)
        previous_plan, previous_model = plan, result.checkpoint.model
    return results
