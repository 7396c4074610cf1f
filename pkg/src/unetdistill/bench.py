"""Wall-clock sampling latency and throughput, plus Table-1-style comparisons."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import torch

from .diffusion import DiffusionSchedule, make_schedule, sample
from .pruning import count_params, estimate_flops
from .runtime import hardware_descriptor


@dataclass
class BenchReport:
    model_name: str
    steps: int
    guidance_scale: float
    batch: int
    warmup: int
    reps: int
    seconds_per_image: float
    iterations_per_second: float
    params: int = 0
    flops_per_step: int = 0
    hardware: str = ""
    timings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))


def time_inference(model, steps: int = 25, guidance_scale: float = 9.0, batch: int = 1,
                   warmup: int = 2, reps: int = 5, schedule: DiffusionSchedule | None = None,
                   seed: int = 0, context=None, null_context=None, pooled=None, shape=None,
                   name: str = "model", height: int | None = None, width: int | None = None,
                   clock=time.perf_counter) -> BenchReport:
    """Median end-to-end latency of ``reps`` timed sampling runs after ``warmup`` runs."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if reps < 3:
        raise ValueError("reps must be >= 3")
    schedule = schedule or make_schedule()
    config = getattr(model, "config", None)
    if shape is None:
        if config is None:
            raise ValueError("shape is required for models without a config")
        size = 2 ** (config.num_stages - 1)
        shape = (batch, config.in_channels, height or max(8, size), width or max(8, size))
    if config is not None and context is None and _uses_context(config):
        context = torch.zeros(batch, 8, config.context_dim)
    if null_context is None and context is not None:
        null_context = torch.zeros_like(context)

    def run(i):
        gen = torch.Generator().manual_seed(seed + i)
        return sample(model, context, pooled, steps, guidance_scale, schedule, gen, shape,
                      null_context=null_context)

    for i in range(warmup):
        run(i)
    timings = []
    for i in range(reps):
        start = clock()
        run(warmup + i)
        timings.append(clock() - start)
    median = statistics.median(timings)
    params = flops = 0
    if config is not None:
        params = count_params(config)
        passes = 2 if guidance_scale != 1 else 1
        flops = estimate_flops(config, shape[2], shape[3], context_tokens=8) * passes * batch
    return BenchReport(
        model_name=name, steps=steps, guidance_scale=guidance_scale, batch=batch,
        warmup=warmup, reps=reps, seconds_per_image=median / batch,
        iterations_per_second=steps / median, params=params, flops_per_step=flops,
        hardware=hardware_descriptor(), timings=timings,
    )


def _uses_context(config) -> bool:
    return config.mid_block.has_attention or any(
        config.layer_blocks(*site) for site in config.attention_sites()
    )


class MissingBaselineError(KeyError):
    pass


def compare(reports: list[BenchReport], baseline: str) -> list[dict]:
    """Speedup, throughput and parameter ratios of every report against ``baseline``."""
    by_name = {r.model_name: r for r in reports}
    if baseline not in by_name:
        raise MissingBaselineError(f"baseline {baseline!r} not among {sorted(by_name)}")
    base = by_name[baseline]
    rows = []
    for r in reports:
        rows.append({
            "model": r.model_name,
            "seconds_per_image": r.seconds_per_image,
            "iterations_per_second": r.iterations_per_second,
            "speedup": base.seconds_per_image / r.seconds_per_image,
            "throughput_ratio": r.iterations_per_second / base.iterations_per_second,
            "params_ratio": (r.params / base.params) if base.params and r.params else None,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    header = ("Model", "Inference Time (s)", "Iteration/s", "Speedup")
    body = [
        (row["model"], f"{row['seconds_per_image']:.3f}", f"{row['iterations_per_second']:.2f}",
         f"{row['speedup']:.2f}x")
        for row in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = [header, tuple("-" * w for w in widths), *body]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip()
                     for line in lines)


def published_reports() -> list[BenchReport]:
    """Published A100 rows (25 DDPM steps, guidance 9, batch 1); SD1.5 is at 768x768."""
    from .config import sdxl_reference_config
    from .pruning import apply_plan, canonical_plan

    sdxl = sdxl_reference_config()
    params = {
        "SDXL": count_params(sdxl),
        "SSD-1B": count_params(apply_plan(sdxl, canonical_plan("SSD_1B"))),
        "Vega": count_params(apply_plan(sdxl, canonical_plan("VEGA"))),
    }
    rows = [("SD1.5", 1.699, 16.79), ("SDXL", 3.135, 8.80), ("SSD-1B", 2.169, 13.37),
            ("Vega", 1.616, 18.95)]
    return [
        BenchReport(name, 25, 9.0, 1, 0, 0, secs, its, params=params.get(name, 0),
                    hardware="A100 (published)")
        for name, secs, its in rows
    ]
