"""``unetdistill`` command line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .bench import compare, format_table, published_reports, time_inference
from .checkpoint import load_checkpoint, save_checkpoint
from .config import NAMED_CONFIGS, ConfigError, UNetConfig
from .corpus import (
    BACKGROUNDS,
    FrozenEncoders,
    generate_toy_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .diffusion import make_schedule, sample
from .distill import DistillLossWeights
from .pruning import (
    EMPTY_PLAN,
    PruningPlan,
    RemovalOrder,
    apply_plan,
    canonical_plan,
    count_params,
    estimate_flops,
    inherit_weights,
    load_plan,
    validate_plan,
)
from .render import render_grid
from .runtime import hardware_descriptor, set_deterministic
from .trainer import (
    DistillRunConfig,
    TeacherSchedule,
    TrainHyper,
    distill,
    evaluate,
    finetune_teacher,
    progressive_distill,
    train_teacher,
)

OUTPUT_ROOT_ENV = "UNETDISTILL_OUT"
logger = logging.getLogger("unetdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- run configuration -------------------------------------------------------

DIFFUSION_DEFAULTS = {
    "timesteps": 1000,
    "beta_schedule": "scaled_linear",
    "beta_start": 0.00085,
    "beta_end": 0.012,
    "inference_steps": 25,
    "guidance_scale": 9.0,
}
CORPUS_DEFAULTS = {"n": 2000, "seed": 0, "path": None, "heldout_fraction": 0.1}
RUN_SECTIONS = {"model", "plan", "diffusion", "distill", "hyper", "teachers", "corpus"}


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=NAMED_CONFIGS["toy"])
    plan: PruningPlan = EMPTY_PLAN
    diffusion: dict = field(default_factory=lambda: dict(DIFFUSION_DEFAULTS))
    distill: DistillLossWeights = DistillLossWeights()
    hyper: TrainHyper = TrainHyper()
    teachers: list = field(default_factory=list)
    corpus: dict = field(default_factory=lambda: dict(CORPUS_DEFAULTS))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "plan": self.plan.to_dict(),
            "diffusion": dict(self.diffusion),
            "distill": asdict(self.distill),
            "hyper": asdict(self.hyper),
            "teachers": [dict(t) for t in self.teachers],
            "corpus": dict(self.corpus),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - RUN_SECTIONS
        if unknown:
            raise ConfigError(f"unknown run-config sections: {sorted(unknown)}")
        run = cls()
        if "model" in data:
            run.model = resolve_model_config(data["model"])
        if "plan" in data:
            p = data["plan"]
            run.plan = PruningPlan.from_dict(p) if isinstance(p, dict) else load_plan(p)
        run.diffusion = _merge(DIFFUSION_DEFAULTS, data.get("diffusion", {}), "diffusion")
        run.distill = DistillLossWeights(**data.get("distill", {}))
        hyper = dict(data.get("hyper", {}))
        run.hyper = TrainHyper(**hyper)
        run.teachers = [dict(t) for t in data.get("teachers", [])]
        run.corpus = _merge(CORPUS_DEFAULTS, data.get("corpus", {}), "corpus")
        return run

    def schedule(self):
        d = self.diffusion
        return make_schedule(d["timesteps"], d["beta_schedule"], d["beta_start"], d["beta_end"])


def _merge(defaults, given, section):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return {**defaults, **given}


def resolve_model_config(ref) -> UNetConfig:
    """A UNetConfig from a dict, a named preset, a config file, or a run/manifest file."""
    if isinstance(ref, UNetConfig):
        return ref
    if isinstance(ref, dict):
        return UNetConfig.from_dict(ref)
    if ref in NAMED_CONFIGS:
        return NAMED_CONFIGS[ref]()
    data = json.loads(Path(ref).read_text())
    if "resolved_config" in data:
        data = data["resolved_config"]
    if "model" in data:
        return resolve_model_config(data["model"])
    return UNetConfig.from_dict(data)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if path in NAMED_CONFIGS and not Path(path).exists():
        return RunConfig(model=NAMED_CONFIGS[path]())
    data = json.loads(Path(path).read_text())
    if "resolved_config" in data:
        data = data["resolved_config"]
    if not set(data) & RUN_SECTIONS or "in_channels" in data:
        return RunConfig(model=UNetConfig.from_dict(data))
    return RunConfig.from_dict(data)


def apply_overrides(run: RunConfig, args) -> RunConfig:
    hyper = {}
    for flag, key in (("steps", "max_steps"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("eval_every", "eval_every"),
                      ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            hyper[key] = value
    if hyper:
        run.hyper = run.hyper.replace(**hyper)
    lo, lf = getattr(args, "lambda_out_kd", None), getattr(args, "lambda_feat_kd", None)
    if lo is not None or lf is not None:
        run.distill = DistillLossWeights(
            run.distill.lambda_out_kd if lo is None else lo,
            run.distill.lambda_feat_kd if lf is None else lf,
        )
    if getattr(args, "plan", None):
        run.plan = load_plan(args.plan)
    if getattr(args, "teacher", None):
        run.teachers = [_parse_teacher(t) for t in args.teacher]
    for key in ("inference_steps", "guidance_scale"):
        value = getattr(args, key, None)
        if value is not None:
            run.diffusion[key] = value
    if getattr(args, "corpus", None):
        run.corpus["path"] = str(args.corpus)
    return run


def _parse_teacher(value: str) -> dict:
    path, _, start = value.partition("@")
    return {"checkpoint": path, "start_step": int(start or 0)}


# -- helpers -----------------------------------------------------------------

def output_dir(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def write_manifest(out: Path, args, resolved: dict, artifacts: list) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", []),
        "config_path": getattr(args, "config", None),
        "resolved_config": resolved,
        "seed": getattr(args, "seed", None),
        "deterministic": bool(getattr(args, "deterministic", False)),
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": __version__,
        "hardware": hardware_descriptor(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _corpus(run: RunConfig):
    if run.corpus.get("path"):
        items, meta = load_corpus(run.corpus["path"])
        seed = meta["seed"]
    else:
        seed = run.corpus["seed"]
        items = generate_toy_corpus(run.corpus["n"], seed)
    return split_corpus(items, seed, run.corpus["heldout_fraction"])


def _encoders(config: UNetConfig) -> FrozenEncoders:
    return FrozenEncoders(context_dim=config.context_dim)


def _teacher_schedule(run: RunConfig) -> TeacherSchedule:
    if not run.teachers:
        raise UsageError("at least one --teacher checkpoint is required")
    return TeacherSchedule([(load_checkpoint(t["checkpoint"]), t["start_step"])
                            for t in run.teachers])


def _print_violations(violations) -> None:
    for v in violations:
        print(f"violation: {v}", file=sys.stderr)


# -- commands ----------------------------------------------------------------

def cmd_config_show(args) -> int:
    print(NAMED_CONFIGS[args.name]().to_json())
    return 0


def cmd_plan_show(args) -> int:
    plan = load_plan(args.plan) if args.plan else canonical_plan(args.name)
    print(plan.to_json())
    return 0


def cmd_plan_validate(args) -> int:
    config = resolve_model_config(args.config)
    violations = validate_plan(config, load_plan(args.plan))
    if violations:
        _print_violations(violations)
        return 1
    print("OK")
    return 0


def cmd_prune(args) -> int:
    config = resolve_model_config(args.config)
    plan = load_plan(args.plan)
    violations = validate_plan(config, plan)
    if violations:
        _print_violations(violations)
        return 1
    pruned = apply_plan(config, plan)
    before, after = count_params(config), count_params(pruned)
    print(pruned.to_json())
    print(f"params: {before} -> {after} ({1 - after / before:.2%} removed)", file=sys.stderr)
    if args.checkpoint:
        teacher = load_checkpoint(args.checkpoint)
        if teacher.config != config:
            raise UsageError("--checkpoint config differs from --config")
        student = inherit_weights(teacher.model, plan)
        out = output_dir(args, "prune")
        save_checkpoint(out / "student", student, {
            "name": f"{teacher.name}-{plan.name}", "kind": "pruned", "plan": plan.to_dict(),
            "parent": teacher.name, "provenance": student.provenance,
        })
        write_manifest(out, args, {"model": config.to_dict(), "plan": plan.to_dict()},
                       [out / "student"])
    return 0


def cmd_count_params(args) -> int:
    config = resolve_model_config(args.config)
    if args.plan:
        config = apply_plan(config, load_plan(args.plan))
    print(count_params(config))
    return 0


def cmd_estimate_flops(args) -> int:
    config = resolve_model_config(args.config)
    if args.plan:
        config = apply_plan(config, load_plan(args.plan))
    total, parts = estimate_flops(config, args.height, args.width, args.context_tokens,
                                  breakdown=True)
    print(total)
    if args.breakdown:
        print(json.dumps(parts, indent=2), file=sys.stderr)
    return 0


def cmd_gen_corpus(args) -> int:
    seed = 0 if args.seed is None else args.seed
    corpus = generate_toy_corpus(args.n, seed)
    out = output_dir(args, "corpus")
    save_corpus(out, corpus, seed)
    write_manifest(out, args, {"corpus": {"n": args.n, "seed": seed}}, [out / "tensors.safetensors"])
    print(out)
    return 0


def cmd_train_teacher(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    train, _ = _corpus(run)
    out = output_dir(args, "teacher")
    ckpt = train_teacher(train, run.model, run.hyper, run.schedule(), _encoders(run.model),
                         out_dir=out / "checkpoint", name=args.name)
    write_manifest(out, args, run.to_dict(), [ckpt.path])
    print(json.dumps(ckpt.meta["metrics"]))
    return 0


def cmd_finetune_teacher(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    base = load_checkpoint(args.checkpoint)
    train, _ = _corpus(run)
    subset = [x for x in train if x.background == args.background]
    out = output_dir(args, "finetuned")
    # without a config or --steps, finetune for a quarter of a default teacher run
    steps = run.hyper.max_steps if (args.steps is not None or args.config) else 500
    ckpt = finetune_teacher(base, subset, run.hyper, run.schedule(), _encoders(base.config),
                            steps=steps, out_dir=out / "checkpoint", name=args.name)
    resolved = run.to_dict()
    resolved["finetune"] = {"base": str(args.checkpoint), "background": args.background}
    write_manifest(out, args, resolved, [ckpt.path])
    print(json.dumps(ckpt.meta["metrics"]))
    return 0


def cmd_distill(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    teachers = _teacher_schedule(run)
    train, heldout = _corpus(run)
    out = output_dir(args, "distill")
    result = distill(DistillRunConfig(run.plan, teachers, run.distill, run.hyper), train,
                     run.schedule(), _encoders(run.model), heldout=heldout,
                     out_dir=out / "checkpoint", name=args.name)
    write_manifest(out, args, run.to_dict(), [result.checkpoint.path])
    print(json.dumps({k: v for k, v in result.final_eval.items() if k != "per_tap"}))
    return 0


def cmd_progressive(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    teachers = _teacher_schedule(run)
    train, heldout = _corpus(run)
    fractions = [float(f) for f in args.fractions.split(",")]
    out = output_dir(args, "progressive")
    results = progressive_distill(train, fractions,
                                  DistillRunConfig(EMPTY_PLAN, teachers, run.distill, run.hyper),
                                  run.schedule(), _encoders(run.model), heldout=heldout,
                                  out_dir=out, order=RemovalOrder(args.order))
    resolved = run.to_dict()
    resolved["fractions"] = fractions
    resolved["order"] = args.order
    write_manifest(out, args, resolved, [r.checkpoint.path for r in results])
    for r in results:
        print(json.dumps({"level": r.checkpoint.name, "params": r.checkpoint.meta["params"],
                          "out_kd": r.final_eval["out_kd"]}))
    return 0


def cmd_sample(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    encoders = _encoders(ckpts[0].config)
    seeds = [int(s) for s in args.seeds.split(",")]
    schedule = run.schedule()
    prompts = args.prompt or ["large red circle on white"]
    rows = []
    for ckpt in ckpts:
        row = []
        for prompt in prompts:
            ctx = encoders.encode_text(prompt)[None]
            for seed in seeds:
                gen = torch.Generator().manual_seed(seed)
                c = ckpt.config
                shape = (1, c.in_channels, args.latent_size, args.latent_size)
                z = sample(ckpt.model, ctx, None, run.diffusion["inference_steps"],
                           run.diffusion["guidance_scale"], schedule, gen, shape,
                           null_context=encoders.null_context(1))
                row.append(z[0])
        rows.append(row)
    out = output_dir(args, "samples")
    path = render_grid(rows, encoders, out / "grid.png", scale=args.scale)
    resolved = run.to_dict()
    resolved["sample"] = {"checkpoints": [str(p) for p in args.checkpoint], "prompts": prompts,
                          "seeds": seeds}
    write_manifest(out, args, resolved, [path])
    print(path)
    return 0


def cmd_evaluate(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    student, teacher = load_checkpoint(args.student), load_checkpoint(args.teacher)
    _, heldout = _corpus(run)
    metrics = evaluate(student.model, teacher.model, heldout, run.schedule(), run.distill,
                       _encoders(teacher.config))
    print(json.dumps(metrics, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.json").write_text(json.dumps(metrics, indent=2) + "\n")
        write_manifest(out, args, run.to_dict(), [out / "evaluation.json"])
    return 0


def cmd_bench(args) -> int:
    run = apply_overrides(load_run_config(args.config), args)
    reports = []
    if args.published:
        reports += published_reports()
    for ref in args.checkpoint or []:
        ckpt = load_checkpoint(ref)
        encoders = _encoders(ckpt.config)
        reports.append(time_inference(
            ckpt.model, steps=run.diffusion["inference_steps"],
            guidance_scale=run.diffusion["guidance_scale"], batch=args.batch,
            warmup=args.warmup, reps=args.reps, schedule=run.schedule(),
            context=encoders.encode_text("large red circle on white")[None].expand(args.batch, -1, -1),
            null_context=encoders.null_context(args.batch), name=ckpt.name,
            height=args.latent_size, width=args.latent_size,
        ))
    if not reports:
        raise UsageError("nothing to benchmark: pass --checkpoint and/or --published")
    baseline = args.baseline or reports[0].model_name
    rows = compare(reports, baseline)
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(
            {"reports": [r.to_dict() for r in reports], "comparison": rows}, indent=2) + "\n")
        (out / "bench.txt").write_text(format_table(rows) + "\n")
        write_manifest(out, args, run.to_dict(), [out / "bench.json", out / "bench.txt"])
    return 0


# -- parser ------------------------------------------------------------------

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="config JSON (UNetConfig, run config, or manifest)")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--deterministic", action="store_true",
                   help="pin threads and use deterministic kernels")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")


def _train_flags(p):
    p.add_argument("--steps", type=int, help="override hyper.max_steps")
    p.add_argument("--lr", type=float, help="override hyper.learning_rate")
    p.add_argument("--batch-size", type=int, help="override hyper.batch_size")
    p.add_argument("--eval-every", type=int, help="override hyper.eval_every")
    p.add_argument("--corpus", help="corpus directory from gen-corpus")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unetdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("config", help="print a named UNetConfig")
    csub = p.add_subparsers(dest="action", parser_class=_Parser, required=True)
    q = csub.add_parser("show", help="print a preset config as JSON")
    q.add_argument("--name", choices=sorted(NAMED_CONFIGS), default="toy")
    q.set_defaults(func=cmd_config_show)

    p = sub.add_parser("plan", help="show or validate pruning plans")
    psub = p.add_subparsers(dest="action", parser_class=_Parser, required=True)
    q = psub.add_parser("show", help="print a plan as JSON")
    q.add_argument("--name", default="SSD_1B", help="canonical plan: SSD_1B or VEGA")
    q.add_argument("--plan", help="plan file to pretty-print instead")
    q.set_defaults(func=cmd_plan_show)
    q = psub.add_parser("validate", help="check a plan against a config")
    q.add_argument("--plan", required=True, help="plan file or canonical name")
    q.add_argument("--config", required=True, help="UNetConfig JSON or preset name")
    q.set_defaults(func=cmd_plan_validate)

    p = sub.add_parser("prune", help="apply a plan to a config (and optionally a checkpoint)")
    _common(p)
    p.add_argument("--plan", required=True, help="plan file or canonical name")
    p.add_argument("--checkpoint", help="teacher checkpoint to inherit weights from")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("count-params", help="analytic parameter count")
    p.add_argument("--config", required=True, help="UNetConfig JSON or preset name")
    p.add_argument("--plan", help="apply this plan first")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("estimate-flops", help="analytic multiply-accumulates per forward pass")
    p.add_argument("--config", required=True, help="UNetConfig JSON or preset name")
    p.add_argument("--plan", help="apply this plan first")
    p.add_argument("--height", type=int, default=128, help="latent height")
    p.add_argument("--width", type=int, default=128, help="latent width")
    p.add_argument("--context-tokens", type=int, default=77, help="cross-attention tokens")
    p.add_argument("--breakdown", action="store_true", help="print a per-category breakdown")
    p.set_defaults(func=cmd_estimate_flops)

    p = sub.add_parser("gen-corpus", help="render the toy captioned-shape corpus")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=2000, help="number of images")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-teacher", help="train a toy teacher denoiser")
    _common(p)
    _train_flags(p)
    p.add_argument("--name", default="teacher", help="teacher id recorded in the checkpoint")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("finetune-teacher", help="finetune a teacher on a style subset")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint", required=True, help="base teacher checkpoint")
    p.add_argument("--background", choices=sorted(BACKGROUNDS), default="black",
                   help="background colour selecting the style subset")
    p.add_argument("--name", default="finetuned", help="teacher id of the result")
    p.set_defaults(func=cmd_finetune_teacher)

    for name, func, helptext in (("distill", cmd_distill, "distill a pruned student"),
                                 ("progressive", cmd_progressive,
                                  "nested progressive pruning + distillation")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _train_flags(p)
        p.add_argument("--teacher", action="append",
                       help="teacher checkpoint, optionally PATH@START_STEP; repeat to swap")
        p.add_argument("--lambda-out-kd", type=float, help="output-level KD weight")
        p.add_argument("--lambda-feat-kd", type=float, help="feature-level KD weight")
        if name == "distill":
            p.add_argument("--plan", help="plan file or canonical name")
            p.add_argument("--name", default="student", help="student id")
        else:
            p.add_argument("--fractions", default="0.2,0.4,0.5",
                           help="comma-separated parameter-reduction targets")
            p.add_argument("--order", default=RemovalOrder.DEEPEST_FIRST.value,
                           choices=[o.value for o in RemovalOrder],
                           help="block removal heuristic")
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="guided DDPM sampling to a PNG grid")
    _common(p)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="model checkpoint; repeat for one grid row per model")
    p.add_argument("--prompt", action="append", help="caption; repeatable")
    p.add_argument("--seeds", default="0", help="comma-separated sampling seeds")
    p.add_argument("--inference-steps", type=int, help="DDPM steps (default 25)")
    p.add_argument("--guidance-scale", type=float, help="CFG scale (default 9)")
    p.add_argument("--latent-size", type=int, default=8, help="latent height and width")
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbour PNG upscale")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="held-out loss breakdown of student vs teacher")
    _common(p)
    p.add_argument("--student", required=True, help="student checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--corpus", help="corpus directory from gen-corpus")
    p.add_argument("--lambda-out-kd", type=float, help="output-level KD weight")
    p.add_argument("--lambda-feat-kd", type=float, help="feature-level KD weight")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="sampling latency and throughput table")
    _common(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint to time; repeatable")
    p.add_argument("--published", action="store_true", help="include the published A100 rows")
    p.add_argument("--baseline", help="model name used as the speedup baseline")
    p.add_argument("--inference-steps", type=int, help="DDPM steps (default 25)")
    p.add_argument("--guidance-scale", type=float, help="CFG scale (default 9)")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--warmup", type=int, default=2, help="untimed warmup runs")
    p.add_argument("--reps", type=int, default=5, help="timed runs")
    p.add_argument("--latent-size", type=int, default=8, help="latent height and width")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "deterministic", False):
        set_deterministic(args.seed or 0)
    try:
        return args.func(args)
    except (ValueError, UsageError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
