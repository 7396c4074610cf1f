"""Decode latents and tile them into a lossless PNG grid (row per model)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .corpus import FrozenEncoders


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """C x H x W in [-1, 1] -> H x W x C uint8."""
    x = image.detach().float().clamp(-1, 1)
    x = ((x + 1) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).cpu().numpy()


def render_grid(latents, encoders: FrozenEncoders | None, path, scale: int = 1) -> Path:
    """``latents`` is a list of rows, each a list (or batch tensor) of C x h x w latents."""
    if isinstance(latents, torch.Tensor):
        latents = [list(latents)] if latents.dim() == 4 else [[latents]]
    rows = [list(row) for row in latents]
    if not rows or not rows[0]:
        raise ValueError("nothing to render")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise ValueError("every row needs the same number of latents")
    decode = (encoders or FrozenEncoders).decode_latent
    tiles = [[to_uint8(decode(z)) for z in row] for row in rows]
    h, w, c = tiles[0][0].shape
    grid = np.zeros((len(rows) * h, ncols * w, c), dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            grid[i * h:(i + 1) * h, j * w:(j + 1) * w] = tile
    image = Image.fromarray(grid)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG", optimize=False)
    return path
