"""Input checks shared by the model, diffusion and loss code."""
from __future__ import annotations

import numpy as np
import torch


class DimensionError(ValueError):
    pass


class TimestepRangeError(ValueError):
    pass


def check_same_shape(a: torch.Tensor, b: torch.Tensor, name_a: str = "a", name_b: str = "b"):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(
            f"{name_a} has shape {tuple(a.shape)} but {name_b} has shape {tuple(b.shape)}"
        )


def check_latent(z: torch.Tensor, channels: int, multiple: int = 1, name: str = "z_t"):
    if z.dim() != 4:
        raise DimensionError(f"{name} must be batch x channels x height x width, got {tuple(z.shape)}")
    if z.shape[1] != channels:
        raise DimensionError(f"{name} has {z.shape[1]} channels, expected {channels}")
    if z.shape[2] % multiple or z.shape[3] % multiple:
        raise DimensionError(
            f"{name} spatial size {tuple(z.shape[2:])} must be divisible by {multiple}"
        )


def as_timesteps(t, batch: int, num_timesteps: int, device=None) -> torch.Tensor:
    """Broadcast ``t`` to a (batch,) long tensor and range-check it."""
    t = torch.as_tensor(t, device=device)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise DimensionError(f"t must be a scalar or have shape ({batch},), got {tuple(t.shape)}")
    if t.is_floating_point():
        if not torch.equal(t, t.round()):
            raise TimestepRangeError("timesteps must be integers")
        t = t.long()
    if bool((t < 0).any()) or bool((t >= num_timesteps).any()):
        raise TimestepRangeError(
            f"timesteps must lie in [0, {num_timesteps}), got min {int(t.min())} max {int(t.max())}"
        )
    return t


def check_images(X, size: int | None = None) -> np.ndarray:
    """``X`` as a float32 N x 3 x H x W array with values in [-1, 1] and even H, W."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise DimensionError(f"images must be N x 3 x H x W, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if X.shape[2] % 2 or X.shape[3] % 2:
        raise DimensionError(f"image height and width must be even, got {X.shape[2:]}")
    if size is not None and X.shape[2:] != (size, size):
        raise DimensionError(f"images must be {size} x {size}, got {X.shape[2:]}")
    if not np.isfinite(X).all() or X.min() < -1 or X.max() > 1:
        raise ValueError("image values must be finite and lie in [-1, 1]")
    return X


def check_captions(y, n: int | None = None) -> list:
    """Captions as a list of strings or token-id sequences, optionally of length ``n``."""
    if isinstance(y, str):
        raise ValueError("captions must be a sequence of captions, not a single string")
    y = list(y)
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} captions for {n} images")
    for c in y:
        if not isinstance(c, str):
            if not all(hasattr(i, "__index__") for i in c):
                raise ValueError(f"caption {c!r} is neither text nor token ids")
    return y
