import itertools

import pytest
import torch

from unetdistill.backbone import build_unet
from unetdistill.bench import (
    BenchReport,
    MissingBaselineError,
    compare,
    format_table,
    published_reports,
    time_inference,
)
from unetdistill.config import MidBlockConfig, UNetConfig

TINY = UNetConfig(12, 12, 16, (1, 2), 1, 2, (1, 1), 64, 16, 32, 0, MidBlockConfig(True, 1, True))


class StubModel:
    """Noise predictor that advances a virtual clock by ``d`` per call."""

    def __init__(self, d):
        self.d, self.now, self.calls = d, 0.0, 0

    def __call__(self, z, t, context, pooled):
        self.now += self.d
        self.calls += 1
        return torch.zeros_like(z)

    def clock(self):
        return self.now


def test_stub_clock_gives_steps_times_d():
    stub = StubModel(0.125)
    report = time_inference(stub, steps=25, guidance_scale=9.0, reps=3, warmup=2,
                            shape=(1, 4, 2, 2), clock=stub.clock)
    assert report.seconds_per_image == 25 * 0.125
    assert report.iterations_per_second == 25 / (25 * 0.125)
    assert stub.calls == 5 * 25
    assert report.timings == [25 * 0.125] * 3


def test_median_is_permutation_invariant():
    durations = [0.3, 0.1, 0.9, 0.2, 0.5]
    results = set()
    for perm in itertools.permutations(durations):
        ticks = iter(itertools.chain.from_iterable((0.0, d) for d in perm))
        report = time_inference(StubModel(0), steps=2, reps=5, warmup=1, shape=(1, 4, 2, 2),
                                clock=lambda: next(ticks))
        results.add(report.seconds_per_image)
    assert results == {0.3}


def test_argument_checks():
    with pytest.raises(ValueError):
        time_inference(StubModel(0), warmup=0, shape=(1, 4, 2, 2))
    with pytest.raises(ValueError):
        time_inference(StubModel(0), reps=2, shape=(1, 4, 2, 2))
    with pytest.raises(ValueError):
        time_inference(StubModel(0))


def test_report_round_trip():
    report = BenchReport("m", 25, 9.0, 1, 2, 5, 0.5, 50.0, params=7, timings=[0.5])
    assert BenchReport.from_json(report.to_json()) == report


def test_real_model_report_fields_and_step_monotonicity():
    model = build_unet(TINY)
    few = time_inference(model, steps=5, reps=3, warmup=1, name="tiny")
    many = time_inference(model, steps=25, reps=3, warmup=1, name="tiny")
    assert few.params == sum(p.numel() for p in model.parameters())
    assert few.flops_per_step > 0 and few.hardware
    assert many.seconds_per_image >= few.seconds_per_image


def test_compare_identity_and_published_ratios():
    reports = published_reports()
    rows = {r["model"]: r for r in compare(reports, "SDXL")}
    assert rows["SDXL"]["speedup"] == 1.0
    assert rows["Vega"]["speedup"] == pytest.approx(3.135 / 1.616)
    assert abs(rows["Vega"]["speedup"] - 1.94) <= 0.01
    assert abs(rows["SSD-1B"]["throughput_ratio"] - 1.52) <= 0.01
    assert rows["Vega"]["params_ratio"] < rows["SSD-1B"]["params_ratio"] < 1
    assert rows["SD1.5"]["params_ratio"] is None


def test_compare_missing_baseline():
    with pytest.raises(MissingBaselineError):
        compare(published_reports(), "SDXL-Turbo")


def test_format_table():
    text = format_table(compare(published_reports(), "SDXL"))
    lines = text.splitlines()
    assert lines[0].startswith("Model")
    assert any(line.startswith("Vega") and line.endswith("1.94x") for line in lines)
    assert all(line == line.rstrip() for line in lines)
