"""Discrete-time DDPM: noise schedule, forward noising, guided ancestral sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .validation import TimestepRangeError, as_timesteps, check_same_shape


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012

    def to_dict(self) -> dict:
        return {"timesteps": self.T, "beta_schedule": self.kind,
                "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 1000, kind: str = "scaled_linear", beta_start: float = 0.00085,
                  beta_end: float = 0.012) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown beta schedule {kind!r}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas), kind, beta_start, beta_end)


def _per_sample(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = torch.from_numpy(values)[t.cpu()].to(device=like.device, dtype=like.dtype)
    return coef.view(-1, *([1] * (like.dim() - 1)))


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    check_same_shape(z0, eps, "z0", "eps")
    t = as_timesteps(t, z0.shape[0], schedule.T)
    ab = schedule.alpha_bars
    return _per_sample(np.sqrt(ab), t, z0) * z0 + _per_sample(np.sqrt(1.0 - ab), t, z0) * eps


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance_scale: float
                ) -> torch.Tensor:
    check_same_shape(eps_cond, eps_uncond, "eps_cond", "eps_uncond")
    if guidance_scale == 1:
        return eps_cond.clone()
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def inference_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced indices from high to low, ending at 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in 1..{T}")
    stride = T // steps
    return [i * stride for i in reversed(range(steps))]


def ddpm_step(eps_hat: torch.Tensor, z_t: torch.Tensor, t: int, schedule: DiffusionSchedule,
              generator: torch.Generator | None = None, prev_t: int | None = None) -> torch.Tensor:
    """One ancestral step from ``t`` to ``prev_t`` (default ``t - 1``).

    With a stride, the step uses the effective beta ``1 - abar_t / abar_prev``;
    for ``prev_t == t - 1`` this is exactly ``beta_t``.  No noise is added when
    stepping to the data end (``prev_t < 0``).
    """
    check_same_shape(eps_hat, z_t, "eps_hat", "z_t")
    if not 0 <= t < schedule.T:
        raise TimestepRangeError(f"t={t} outside [0, {schedule.T})")
    prev_t = t - 1 if prev_t is None else prev_t
    if not -1 <= prev_t < t:
        raise TimestepRangeError(f"prev_t={prev_t} must lie in [-1, {t})")
    abar_t = float(schedule.alpha_bars[t])
    abar_prev = float(schedule.alpha_bars[prev_t]) if prev_t >= 0 else 1.0
    if prev_t == t - 1:
        beta, alpha = float(schedule.betas[t]), float(schedule.alphas[t])
    else:
        alpha = abar_t / abar_prev
        beta = 1.0 - alpha
    mean = (z_t - (beta / np.sqrt(1.0 - abar_t)) * eps_hat) / np.sqrt(alpha)
    if prev_t < 0:
        return mean
    variance = (1.0 - abar_prev) / (1.0 - abar_t) * beta
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device)
    return mean + float(np.sqrt(variance)) * noise


def _predict(model, z, t, context, pooled):
    out = model(z, t, context, pooled)
    return out[0] if isinstance(out, tuple) else out


@torch.no_grad()
def sample(model, context: torch.Tensor | None, pooled, steps: int, guidance_scale: float,
           schedule: DiffusionSchedule, generator: torch.Generator | None, shape,
           null_context: torch.Tensor | None = None, null_pooled=None) -> torch.Tensor:
    """Guided DDPM sampling from pure noise over an evenly strided subsequence.

    ``model(z, t, context, pooled)`` returns the noise prediction (or a tuple
    whose first element is).  Conditional and unconditional branches share one
    batched call; ``guidance_scale == 1`` skips the unconditional branch.
    """
    dtype = torch.float32
    params = getattr(model, "parameters", None)
    if params is not None:
        first = next(params(), None)
        if first is not None:
            dtype = first.dtype
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    batch = z.shape[0]
    guided = guidance_scale != 1
    if guided and context is not None and null_context is None:
        raise ValueError("null_context is required for guidance_scale != 1")
    if guided:
        both_ctx = None if context is None else torch.cat([context, null_context]).to(dtype)
        both_pooled = None
        if pooled is not None:
            null_pooled = torch.zeros_like(pooled) if null_pooled is None else null_pooled
            both_pooled = torch.cat([pooled, null_pooled]).to(dtype)
    timesteps = inference_timesteps(schedule.T, steps)
    for i, t in enumerate(timesteps):
        prev_t = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        if guided:
            t_batch = torch.full((2 * batch,), t, dtype=torch.long)
            eps = _predict(model, torch.cat([z, z]), t_batch, both_ctx, both_pooled)
            eps = cfg_combine(eps[:batch], eps[batch:], guidance_scale)
        else:
            t_batch = torch.full((batch,), t, dtype=torch.long)
            ctx = None if context is None else context.to(dtype)
            eps = _predict(model, z, t_batch, ctx, pooled)
        z = ddpm_step(eps, z, t, schedule, generator, prev_t=prev_t)
    return z
