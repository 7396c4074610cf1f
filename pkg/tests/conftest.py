import random

import pytest
import torch

from unetdistill.config import MidBlockConfig, UNetConfig
from unetdistill.pruning import plan_from_atoms, removal_candidates


def random_config(rng: random.Random) -> UNetConfig:
    """A small valid config; widths are multiples of the head dim."""
    stages = rng.randint(1, 3)
    down = rng.randint(0, 2)
    has_attn = rng.random() < 0.5
    channels = rng.choice([4, 12])
    return UNetConfig(
        in_channels=channels,
        out_channels=channels,
        base_channels=rng.choice([8, 16]),
        channel_multipliers=tuple(rng.choice([1, 2]) for _ in range(stages)),
        resnets_per_down_stage=down,
        resnets_per_up_stage=down + 1,
        transformer_depths=tuple(rng.randint(0, 2) for _ in range(stages)),
        context_dim=rng.choice([8, 16]),
        attention_head_dim=8,
        time_embed_dim=rng.choice([16, 32]),
        pooled_embed_dim=rng.choice([0, 0, 6]),
        mid_block=MidBlockConfig(has_attn, rng.randint(1, 2) if has_attn else 0,
                                 rng.random() < 0.5),
    )


def make_random_config(seed: int) -> UNetConfig:
    return random_config(random.Random(seed))


def random_plan(config: UNetConfig, rng: random.Random):
    atoms = removal_candidates(config)
    chosen = [a for a in atoms if rng.random() < 0.5]
    return plan_from_atoms(config, chosen, "random")


def micro_grad_config() -> UNetConfig:
    """7172 parameters: one stage, one up attention layer, mid attention."""
    return UNetConfig(4, 4, 8, (1,), 0, 1, (1,), 8, 8, 8, 0, MidBlockConfig(True, 1, False))


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def grad_rel_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """Relative error with an absolute floor so vanishing gradients compare sanely."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(objective, params, count=20, seed=0, h=1e-5):
    """Compare autodiff against central differences at ``count`` random scalar entries."""
    named = [(n, p) for n, p in params if p.requires_grad]
    for _, p in named:
        p.grad = None
    objective().backward()
    rng = random.Random(seed)
    worst = 0.0
    for _ in range(count):
        name, p = rng.choice(named)
        i = rng.randrange(p.numel())
        analytic = p.grad.reshape(-1)[i].item()
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = objective().item()
            flat[i] = orig - h
            down = objective().item()
            flat[i] = orig
        err = grad_rel_error(analytic, (up - down) / (2 * h))
        assert err < 1e-4, (name, i, analytic, (up - down) / (2 * h))
        worst = max(worst, err)
    return worst


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
