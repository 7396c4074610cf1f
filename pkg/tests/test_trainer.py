import json
import math

import pytest
import torch

from unetdistill.backbone import build_unet
from unetdistill.checkpoint import load_checkpoint, save_checkpoint, state_bytes, state_hash
from unetdistill.config import MidBlockConfig, UNetConfig
from unetdistill.corpus import FrozenEncoders, generate_toy_corpus, split_corpus
from unetdistill.diffusion import make_schedule
from unetdistill.distill import DistillLossWeights
from unetdistill.pruning import (
    EMPTY_PLAN,
    PlanError,
    PruningPlan,
    apply_plan,
    count_params,
    incremental_plan,
    inherit_weights,
    plan_atoms,
    progressive_plans,
)
from unetdistill.trainer import (
    DistillRunConfig,
    EncodedData,
    TeacherSchedule,
    TrainHyper,
    TrainingDiverged,
    distill,
    encode_data,
    evaluate,
    finetune_teacher,
    make_optimizer,
    progressive_distill,
    train_teacher,
)

SMALL = UNetConfig(12, 12, 16, (1, 2), 1, 2, (1, 1), 64, 16, 32, 0, MidBlockConfig(True, 1, True))
SCHEDULE = make_schedule()
HYPER = TrainHyper(learning_rate=1e-3, batch_size=4, max_steps=6, eval_every=3)


@pytest.fixture(scope="module")
def data():
    corpus = generate_toy_corpus(48, 0)
    train, held = split_corpus(corpus, 0, fraction=0.25)
    return train, held


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(data[0], SMALL, HYPER.replace(max_steps=30), SCHEDULE, name="base")


def test_adam_step_matches_closed_form():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    x = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([x], TrainHyper(learning_rate=lr, adam_betas=(b1, b2)))
    a = 3.0
    loss = 0.5 * a * (x ** 2).sum()
    loss.backward()
    opt.step()
    g = a * 0.7
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = 0.7 - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(x.item() - expected) < 1e-12


def test_hyper_validation():
    with pytest.raises(ValueError):
        TrainHyper(learning_rate=0)
    with pytest.raises(ValueError):
        TrainHyper(optimizer="SGD")
    with pytest.raises(ValueError):
        TrainHyper(cond_dropout=1.5)


def test_training_is_deterministic(data):
    a = train_teacher(data[0], SMALL, HYPER, SCHEDULE)
    b = train_teacher(data[0], SMALL, HYPER, SCHEDULE)
    assert a.loss_curve == b.loss_curve
    assert state_bytes(a.model) == state_bytes(b.model)


def test_single_step_run_writes_checkpoint(data, tmp_path):
    ckpt = train_teacher(data[0], SMALL, HYPER.replace(max_steps=1), SCHEDULE, out_dir=tmp_path)
    assert (tmp_path / "tensors.safetensors").exists() and (tmp_path / "meta.json").exists()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["step"] == 0
    assert ckpt.meta["metrics"]["steps"] == 1


def test_nan_loss_aborts_with_diagnostics(data):
    good = encode_data(data[0], None)
    bad = EncodedData(torch.full_like(good.latents, float("nan")), good.contexts, good.null_context)
    with pytest.raises(TrainingDiverged, match="step 0.*lr="):
        train_teacher(bad, SMALL, HYPER, SCHEDULE)


def test_checkpoint_round_trip_is_bitwise(teacher, tmp_path):
    save_checkpoint(tmp_path / "a", teacher.model, teacher.meta)
    loaded = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", loaded.model, loaded.meta)
    for name in ("tensors.safetensors", "config.json", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert state_hash(loaded.model) == state_hash(teacher.model)


def test_finetune_zero_steps_is_identity(teacher, data):
    same = finetune_teacher(teacher, data[0][:8], HYPER, SCHEDULE, steps=0)
    assert state_bytes(same.model) == state_bytes(teacher.model)


def test_finetune_specializes(teacher, data):
    subset = [x for x in data[0] if x.background == "black"]
    before = state_hash(teacher.model)
    tuned = finetune_teacher(teacher, subset, HYPER, SCHEDULE, steps=30, name="black")
    assert state_hash(teacher.model) == before
    assert state_bytes(tuned.model) != state_bytes(teacher.model)
    assert tuned.meta["parent"] == "base"
    weights = DistillLossWeights(0, 0)
    base_loss = evaluate(teacher.model, teacher.model, subset, SCHEDULE, weights)["task"]
    tuned_loss = evaluate(tuned.model, tuned.model, subset, SCHEDULE, weights)["task"]
    assert tuned_loss <= base_loss


def test_evaluate_self_and_determinism(teacher, data):
    a = evaluate(teacher.model, teacher.model, data[1], SCHEDULE)
    assert a["out_kd"] == 0.0 and a["feat_kd"] == 0.0
    assert a == evaluate(teacher.model, teacher.model, data[1], SCHEDULE)


def test_identity_distillation_starts_at_zero(teacher, data):
    run = DistillRunConfig(EMPTY_PLAN, TeacherSchedule.single(teacher), DistillLossWeights(1, 1),
                           HYPER.replace(learning_rate=1e-4))
    result = distill(run, data[0], SCHEDULE, heldout=data[1])
    first = result.train_log[0]
    assert first["out_kd"] == 0.0 and first["feat_kd"] == 0.0
    assert result.eval_log[0]["out_kd"] == 0.0
    for rec in result.train_log:
        assert rec["out_kd"] <= 1e-3 * rec["task"]


def test_distill_logs_and_provenance(teacher, data, tmp_path):
    plan = progressive_plans(SMALL, [0.3])[0]
    run = DistillRunConfig(plan, TeacherSchedule.single(teacher), DistillLossWeights(1, 1), HYPER)
    before = state_hash(teacher.model)
    enc = FrozenEncoders()
    enc_hash = enc.content_hash()
    result = distill(run, data[0], SCHEDULE, encoders=enc, heldout=data[1], out_dir=tmp_path)
    assert state_hash(teacher.model) == before
    assert enc.content_hash() == enc_hash
    assert [r["step"] for r in result.train_log] == list(range(HYPER.max_steps))
    assert [e["step"] for e in result.eval_log] == [0, 3, 6]
    for rec in result.train_log:
        assert rec["total"] == rec["task"] + 1.0 * rec["out_kd"] + 1.0 * rec["feat_kd"]
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["plan"] == plan.to_dict()
    assert meta["teachers"][0]["hash"] == before
    assert result.checkpoint.config == apply_plan(SMALL, plan)
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == HYPER.max_steps
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3


def test_teacher_swap_at_boundary(teacher, data):
    other = finetune_teacher(teacher, data[0][:10], HYPER, SCHEDULE, steps=3, name="expert")
    schedule = TeacherSchedule([(teacher, 0), (other, 4)])
    run = DistillRunConfig(EMPTY_PLAN, schedule, DistillLossWeights(1, 1), HYPER)
    result = distill(run, data[0], SCHEDULE, heldout=data[1])
    ids = [r["teacher_id"] for r in result.train_log]
    assert ids == ["base"] * 4 + ["expert"] * 2
    assert [e["teacher_id"] for e in result.eval_log] == ["base", "base", "expert"]
    assert [t["id"] for t in result.checkpoint.meta["teachers"]] == ["base", "expert"]


def test_teacher_schedule_checks():
    with pytest.raises(ValueError):
        TeacherSchedule([("a", 1)])
    with pytest.raises(ValueError):
        TeacherSchedule([("a", 0), ("b", 0)])


def test_mismatched_student_or_teacher_rejected(teacher, data):
    plan = progressive_plans(SMALL, [0.3])[0]
    wrong = build_unet(SMALL)
    run = DistillRunConfig(plan, TeacherSchedule.single(teacher), hyper=HYPER)
    with pytest.raises(PlanError):
        distill(run, data[0], SCHEDULE, init_student=wrong)
    other = train_teacher(data[0], apply_plan(SMALL, plan), HYPER.replace(max_steps=1), SCHEDULE)
    mixed = TeacherSchedule([(teacher, 0), (other, 2)])
    with pytest.raises(PlanError):
        distill(DistillRunConfig(EMPTY_PLAN, mixed, hyper=HYPER), data[0], SCHEDULE)


def test_distilled_beats_reinitialized_student(teacher, data):
    plan = progressive_plans(SMALL, [0.3])[0]
    run = DistillRunConfig(plan, TeacherSchedule.single(teacher), DistillLossWeights(1, 1),
                           HYPER.replace(max_steps=20))
    student = distill(run, data[0], SCHEDULE).checkpoint.model
    fresh = build_unet(student.config, seed=11)
    ours = evaluate(student, teacher.model, data[1], SCHEDULE)["out_kd"]
    theirs = evaluate(fresh, teacher.model, data[1], SCHEDULE)["out_kd"]
    assert ours < theirs


def test_progressive_chain(teacher, data, tmp_path):
    base = DistillRunConfig(EMPTY_PLAN, TeacherSchedule.single(teacher), DistillLossWeights(1, 1),
                            HYPER)
    results = progressive_distill(data[0], [0.2, 0.5], base, SCHEDULE, heldout=data[1],
                                  out_dir=tmp_path)
    counts = [count_params(r.checkpoint.config) for r in results]
    assert count_params(SMALL) > counts[0] > counts[1]
    plans = progressive_plans(SMALL, [0.2, 0.5])
    assert plan_atoms(SMALL, plans[0]) <= plan_atoms(SMALL, plans[1])
    step = incremental_plan(SMALL, plans[0], plans[1])
    init = inherit_weights(results[0].checkpoint.model, step)
    assert evaluate(init, teacher.model, data[1], SCHEDULE) == {
        k: v for k, v in results[1].eval_log[0].items() if k not in ("step", "teacher_id", "split")
    }
    assert (tmp_path / plans[1].name / "tensors.safetensors").exists()
    assert PruningPlan.load(tmp_path / plans[1].name / "plan.json") == plans[1]


def test_single_level_progressive_equals_plain_distill(teacher, data):
    base = DistillRunConfig(EMPTY_PLAN, TeacherSchedule.single(teacher), hyper=HYPER)
    chain = progressive_distill(data[0], [0.3], base, SCHEDULE, heldout=data[1])
    plain = distill(DistillRunConfig(progressive_plans(SMALL, [0.3])[0],
                                     TeacherSchedule.single(teacher), hyper=HYPER),
                    data[0], SCHEDULE, heldout=data[1])
    assert chain[0].eval_log == plain.eval_log
    assert state_bytes(chain[0].checkpoint.model) == state_bytes(plain.checkpoint.model)
