"""Procedural captioned-shape corpus plus frozen text/image encoder stand-ins."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_archive, write_archive

COLORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle", "diamond")
BACKGROUNDS = {"white": (1.0, 1.0, 1.0), "black": (-1.0, -1.0, -1.0), "gray": (0.0, 0.0, 0.0)}
SIZES = ("small", "large")

NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"
VOCAB_SIZE = 32
MAX_TOKENS = 8
IMAGE_SIZE = 16


def _build_vocab() -> tuple[str, ...]:
    words = [NULL_TOKEN, PAD_TOKEN, "on", *SIZES, *COLORS, *SHAPES, *BACKGROUNDS]
    words += [f"<unused{i}>" for i in range(VOCAB_SIZE - len(words))]
    return tuple(words)


VOCAB = _build_vocab()
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
NULL_ID = TOKEN_ID[NULL_TOKEN]
PAD_ID = TOKEN_ID[PAD_TOKEN]


class UnknownTokenError(KeyError):
    pass


def tokenize(text: str) -> tuple[int, ...]:
    ids = []
    for word in text.split():
        if word not in TOKEN_ID:
            raise UnknownTokenError(word)
        ids.append(TOKEN_ID[word])
    if len(ids) > MAX_TOKENS:
        raise ValueError(f"caption longer than {MAX_TOKENS} tokens: {text!r}")
    return tuple(ids)


def pad_tokens(ids, length: int = MAX_TOKENS) -> tuple[int, ...]:
    return tuple(ids) + (PAD_ID,) * (length - len(ids))


@dataclass(frozen=True)
class CaptionedImage:
    image: np.ndarray            # 3 x H x W, values in [-1, 1]
    caption: tuple[int, ...]
    color: str
    shape: str
    background: str

    @property
    def text(self) -> str:
        return " ".join(VOCAB[i] for i in self.caption)


def render_shape(shape: str, color, background, size: int, cx: float, cy: float,
                 radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        mask = dx ** 2 + dy ** 2 <= radius ** 2
    elif shape == "square":
        mask = (np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)
    elif shape == "diamond":
        mask = np.abs(dx) + np.abs(dy) <= radius
    elif shape == "triangle":
        mask = (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    image = np.empty((3, size, size), dtype=np.float32)
    for ch in range(3):
        image[ch] = np.where(mask, color[ch], background[ch])
    return image


def generate_toy_corpus(n: int, seed: int, image_size: int = IMAGE_SIZE) -> list[CaptionedImage]:
    """Deterministic corpus; every (color, shape) pair appears n/pairs +- 1 times."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = [(c, s) for c in COLORS for s in SHAPES]
    order: list[tuple[str, str]] = []
    while len(order) < n:
        order.extend(pairs[i] for i in rng.permutation(len(pairs)))
    items = []
    bg_names = list(BACKGROUNDS)
    for color, shape in order[:n]:
        background = bg_names[rng.integers(len(bg_names))]
        large = bool(rng.integers(2))
        radius = image_size * (0.36 if large else 0.22)
        margin = radius
        cx = rng.uniform(margin, image_size - margin)
        cy = rng.uniform(margin, image_size - margin)
        image = render_shape(shape, COLORS[color], BACKGROUNDS[background], image_size,
                             cx, cy, radius)
        caption = tokenize(f"{SIZES[int(large)]} {color} {shape} on {background}")
        items.append(CaptionedImage(image, caption, color, shape, background))
    return items


def heldout_mask(n: int, seed: int, fraction: float = 0.1) -> np.ndarray:
    """Seed-stable hash split; True marks held-out items."""
    buckets = np.array([
        int.from_bytes(hashlib.sha256(f"{seed}:{i}".encode()).digest()[:4], "little") % 1000
        for i in range(n)
    ])
    return buckets < int(round(fraction * 1000))


def split_corpus(corpus, seed: int, fraction: float = 0.1):
    mask = heldout_mask(len(corpus), seed, fraction)
    train = [x for x, m in zip(corpus, mask) if not m]
    heldout = [x for x, m in zip(corpus, mask) if m]
    return train, heldout


def manifest(corpus, seed: int) -> dict:
    size = corpus[0].image.shape[-1]
    return {
        "n": len(corpus),
        "seed": seed,
        "image_size": [3, size, size],
        "latent_size": [12, size // 2, size // 2],
        "vocab_size": VOCAB_SIZE,
        "max_tokens": MAX_TOKENS,
        "vocabulary": list(VOCAB),
        "null_token": NULL_TOKEN,
        "pad_token": PAD_TOKEN,
    }


def save_corpus(directory, corpus, seed: int) -> Path:
    directory = Path(directory)
    write_archive(directory, {
        "images": np.stack([x.image for x in corpus]),
        "captions": np.array([pad_tokens(x.caption) for x in corpus], dtype=np.int64),
    })
    meta = manifest(corpus, seed)
    meta["items"] = [
        {"caption": x.text, "color": x.color, "shape": x.shape, "background": x.background}
        for x in corpus
    ]
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory


def load_corpus(directory) -> tuple[list[CaptionedImage], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "corpus.json").read_text())
    tensors = read_archive(directory)
    items = []
    for image, caption, info in zip(tensors["images"], tensors["captions"], meta["items"]):
        ids = tuple(int(i) for i in caption if i != PAD_ID)
        items.append(CaptionedImage(image, ids, info["color"], info["shape"], info["background"]))
    return items, meta


class FrozenEncoders:
    """Fixed text-embedding table and a pooling latent map; nothing here trains."""

    def __init__(self, context_dim: int = 64, seed: int = 0, vocab_size: int = VOCAB_SIZE):
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(vocab_size, context_dim, generator=gen, dtype=torch.float64)
        self.text_table = table.float().requires_grad_(False)
        self.context_dim = context_dim
        self.seed = seed

    def content_hash(self) -> str:
        h = hashlib.sha256(self.text_table.numpy().tobytes())
        h.update(b"haar2x2-mean-decode")
        return h.hexdigest()

    def encode_text(self, caption) -> torch.Tensor:
        if isinstance(caption, str):
            caption = tokenize(caption)
        ids = list(caption)
        if any(not 0 <= i < self.text_table.shape[0] for i in ids):
            raise UnknownTokenError(f"token id outside vocabulary in {ids}")
        if len(ids) > MAX_TOKENS:
            raise ValueError(f"caption longer than {MAX_TOKENS} tokens")
        return self.text_table[torch.tensor(pad_tokens(ids), dtype=torch.long)].clone()

    def encode_texts(self, captions) -> torch.Tensor:
        return torch.stack([self.encode_text(c) for c in captions])

    def null_context(self, batch: int = 1) -> torch.Tensor:
        """Unconditional context: the encoding of the null-token-only caption."""
        return self.encode_text((NULL_ID,)).expand(batch, -1, -1).clone()

    @staticmethod
    def encode_image(image) -> torch.Tensor:
        """2x2 block mean plus three Haar detail maps: C x H x W -> 4C x H/2 x W/2."""
        x = torch.as_tensor(image)
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        if x.dim() != 4 or x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"image must be (B,)C x H x W with even H, W; got {tuple(x.shape)}")
        a = x[..., 0::2, 0::2]
        b = x[..., 0::2, 1::2]
        c = x[..., 1::2, 0::2]
        d = x[..., 1::2, 1::2]
        mean = (a + b + c + d) / 4
        horiz = (a - b + c - d) / 4
        vert = (a + b - c - d) / 4
        diag = (a - b - c + d) / 4
        z = torch.cat([mean, horiz, vert, diag], dim=-3)
        return z[0] if squeeze else z

    @staticmethod
    def decode_latent(latent) -> torch.Tensor:
        """Nearest-upsample the block-mean channels back to image resolution."""
        z = torch.as_tensor(latent)
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None]
        if z.dim() != 4 or z.shape[-3] % 4:
            raise ValueError(f"latent must have a multiple of 4 channels; got {tuple(z.shape)}")
        mean = z[:, : z.shape[1] // 4]
        image = mean.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
        return image[0] if squeeze else image


def encode_corpus(corpus, encoders: FrozenEncoders) -> tuple[torch.Tensor, torch.Tensor]:
    """Latents (N x 4C x H/2 x W/2) and contexts (N x tokens x context_dim)."""
    images = torch.from_numpy(np.stack([x.image for x in corpus]))
    latents = FrozenEncoders.encode_image(images)
    contexts = encoders.encode_texts([x.caption for x in corpus])
    return latents, contexts
