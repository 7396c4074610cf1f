"""SDXL-style conditional U-Net denoiser with named feature taps.

Every submodule is registered under 1-based names so parameter paths read the
same way plans and tap keys do, e.g. ``down.3.attn.1.blocks.4.attn2.to_k.weight``.
"""
from __future__ import annotations

import math
from collections.abc import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .config import UNetConfig, check_config
from .validation import DimensionError, as_timesteps, check_latent

NUM_TRAIN_TIMESTEPS = 1000


def norm_groups(channels: int) -> int:
    return math.gcd(32, channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    exponent = -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    freqs = torch.exp(exponent).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class FeatureTapRegistry(Mapping):
    """Captured intermediate features keyed by tap path, iterated in sorted order."""

    def __init__(self, entries=None):
        self._entries = dict(entries or {})

    def record(self, key: str, value: torch.Tensor):
        if key in self._entries:
            raise KeyError(f"duplicate tap key {key}")
        self._entries[key] = value

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(sorted(self._entries))

    def __len__(self):
        return len(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(self._entries[k].shape) for k in self}

    def __repr__(self):
        return f"FeatureTapRegistry({list(self)})"


class ResnetBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_channels), in_channels, eps=1e-5)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_emb_proj = nn.Linear(temb_channels, out_channels)
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels, eps=1e-5)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.conv_shortcut = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None
        )

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.conv_shortcut is not None:
            x = self.conv_shortcut(x)
        return x + h


class Attention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int | None, head_dim: int):
        super().__init__()
        kv_dim = context_dim or query_dim
        self.heads = query_dim // head_dim
        self.head_dim = head_dim
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, c = x.shape
        q = self.to_q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        out = scores.softmax(dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, c))


class GEGLUFeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.proj = nn.Linear(dim, 2 * mult * dim)
        self.out = nn.Linear(mult * dim, dim)

    def forward(self, x):
        h, gate = self.proj(x).chunk(2, dim=-1)
        return self.out(h * F.gelu(gate))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention, cross-attention, gated feed-forward."""

    def __init__(self, dim: int, context_dim: int, head_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, None, head_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, context_dim, head_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = GEGLUFeedForward(dim)

    def forward(self, x, context):
        x = x + self.attn1(self.norm1(x))
        x = x + self.attn2(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


class AttentionLayer(nn.Module):
    """proj_in -> stack of transformer blocks -> proj_out, with a residual."""

    def __init__(self, dim: int, context_dim: int, head_dim: int, depth: int):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(dim), dim, eps=1e-6)
        self.proj_in = nn.Linear(dim, dim)
        self.blocks = nn.ModuleDict(
            {str(i): TransformerBlock(dim, context_dim, head_dim) for i in range(1, depth + 1)}
        )
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.proj_in(self.norm(x).permute(0, 2, 3, 1).reshape(b, h * w, c))
        for block in self.blocks.values():
            tokens = block(tokens, context)
        out = self.proj_out(tokens).reshape(b, h, w, c).permute(0, 3, 1, 2)
        return out + x


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Stage(nn.Module):
    def __init__(self):
        super().__init__()
        self.resnet = nn.ModuleDict()
        self.attn = nn.ModuleDict()


def skip_channel_stack(config: UNetConfig) -> list[int]:
    """Channel widths pushed onto the skip stack by the down path, in push order."""
    stack = [config.base_channels]
    prev = config.base_channels
    for stage in range(1, config.num_stages + 1):
        if config.resnets_per_down_stage:
            prev = config.stage_channels("down", stage)
        stack.extend([prev] * config.resnets_per_down_stage)
        if stage < config.num_stages:
            stack.append(prev)
    return stack


def up_resnet_channels(config: UNetConfig) -> dict[tuple[int, int], tuple[int, int]]:
    """(stage, position) -> (input channels incl. skip, output channels) for up resnets."""
    skips = skip_channel_stack(config)
    prev = config.stage_channels("mid", 1)
    out = {}
    for stage in range(1, config.num_stages + 1):
        channels = config.stage_channels("up", stage)
        for pos in range(1, config.resnets_per_up_stage + 1):
            skip = skips.pop()
            out[(stage, pos)] = (prev + skip, channels)
            prev = channels
    return out


class UNetModel(nn.Module):
    def __init__(self, config: UNetConfig, num_timesteps: int = NUM_TRAIN_TIMESTEPS):
        super().__init__()
        check_config(config)
        self.config = config
        self.num_timesteps = num_timesteps
        c = config
        temb = c.time_embed_dim

        self.conv_in = nn.Conv2d(c.in_channels, c.base_channels, 3, padding=1)
        self.time_embedding = nn.ModuleDict({
            "linear_1": nn.Linear(c.base_channels, temb),
            "linear_2": nn.Linear(temb, temb),
        })
        if c.pooled_embed_dim:
            self.add_embedding = nn.ModuleDict({
                "linear_1": nn.Linear(c.pooled_embed_dim, temb),
                "linear_2": nn.Linear(temb, temb),
            })

        self.down = nn.ModuleDict()
        prev = c.base_channels
        for stage in range(1, c.num_stages + 1):
            block = Stage()
            channels = c.stage_channels("down", stage)
            for pos in range(1, c.resnets_per_down_stage + 1):
                block.resnet[str(pos)] = ResnetBlock(prev, channels, temb)
                prev = channels
                self._maybe_attention(block, "down", stage, pos, channels)
            if stage < c.num_stages:
                block.downsample = Downsample(prev)
            self.down[str(stage)] = block

        mid_channels = c.stage_channels("mid", 1)
        self.mid = Stage()
        self.mid.resnet["1"] = ResnetBlock(prev, mid_channels, temb)
        if c.mid_block.has_attention:
            self.mid.attn["1"] = AttentionLayer(
                mid_channels, c.context_dim, c.attention_head_dim, c.mid_block.attention_depth
            )
        if c.mid_block.has_second_resnet:
            self.mid.resnet["2"] = ResnetBlock(mid_channels, mid_channels, temb)

        self.up = nn.ModuleDict()
        io = up_resnet_channels(c)
        for stage in range(1, c.num_stages + 1):
            block = Stage()
            channels = c.stage_channels("up", stage)
            for pos in range(1, c.resnets_per_up_stage + 1):
                block.resnet[str(pos)] = ResnetBlock(io[(stage, pos)][0], channels, temb)
                self._maybe_attention(block, "up", stage, pos, channels)
            if stage < c.num_stages:
                block.upsample = Upsample(channels)
            self.up[str(stage)] = block

        top = c.stage_channels("up", c.num_stages)
        self.norm_out = nn.GroupNorm(norm_groups(top), top, eps=1e-5)
        self.conv_out = nn.Conv2d(top, c.out_channels, 3, padding=1)

    def _maybe_attention(self, block, section, stage, pos, channels):
        depth = len(self.config.layer_blocks(section, stage, pos))
        if depth:
            block.attn[str(pos)] = AttentionLayer(
                channels, self.config.context_dim, self.config.attention_head_dim, depth
            )

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.config.num_stages - 1)

    def _check_context(self, context, batch):
        needs = any(len(self.config.layer_blocks(*s)) for s in self.config.attention_sites())
        needs = needs or self.config.mid_block.has_attention
        if context is None:
            if needs:
                raise DimensionError("context is required for a model with attention layers")
            return
        if context.dim() != 3 or context.shape[0] != batch or context.shape[2] != self.config.context_dim:
            raise DimensionError(
                f"context must be ({batch}, tokens, {self.config.context_dim}), "
                f"got {tuple(context.shape)}"
            )

    def forward(self, z_t, t, context=None, pooled=None, capture_taps: bool = False):
        """Predict the noise in ``z_t``; optionally also return a tap registry."""
        c = self.config
        check_latent(z_t, c.in_channels, self.spatial_multiple)
        batch = z_t.shape[0]
        t = as_timesteps(t, batch, self.num_timesteps, device=z_t.device)
        self._check_context(context, batch)
        taps = FeatureTapRegistry() if capture_taps else None

        def tap(key, value):
            if taps is not None:
                taps.record(key, value)

        emb = timestep_embedding(t, c.base_channels).to(z_t.dtype)
        temb = self.time_embedding["linear_2"](F.silu(self.time_embedding["linear_1"](emb)))
        if c.pooled_embed_dim:
            if pooled is None:
                pooled = z_t.new_zeros(batch, c.pooled_embed_dim)
            if tuple(pooled.shape) != (batch, c.pooled_embed_dim):
                raise DimensionError(
                    f"pooled must be ({batch}, {c.pooled_embed_dim}), got {tuple(pooled.shape)}"
                )
            temb = temb + self.add_embedding["linear_2"](
                F.silu(self.add_embedding["linear_1"](pooled))
            )

        h = self.conv_in(z_t)
        skips = [h]
        for stage, block in self.down.items():
            for pos, resnet in block.resnet.items():
                h = resnet(h, temb)
                tap(f"down.{stage}.resnet.{pos}", h)
                if pos in block.attn:
                    h = block.attn[pos](h, context)
                    tap(f"down.{stage}.attn.{pos}", h)
                skips.append(h)
            if hasattr(block, "downsample"):
                h = block.downsample(h)
                skips.append(h)

        h = self.mid.resnet["1"](h, temb)
        tap("mid.1.resnet.1", h)
        if "1" in self.mid.attn:
            h = self.mid.attn["1"](h, context)
            tap("mid.1.attn.1", h)
        if "2" in self.mid.resnet:
            h = self.mid.resnet["2"](h, temb)
            tap("mid.1.resnet.2", h)
        tap("mid.1.out.1", h)

        for stage, block in self.up.items():
            for pos, resnet in block.resnet.items():
                h = resnet(torch.cat([h, skips.pop()], dim=1), temb)
                tap(f"up.{stage}.resnet.{pos}", h)
                if pos in block.attn:
                    h = block.attn[pos](h, context)
                    tap(f"up.{stage}.attn.{pos}", h)
            if hasattr(block, "upsample"):
                h = block.upsample(h)

        eps = self.conv_out(F.silu(self.norm_out(h)))
        return eps, taps


def build_unet(config: UNetConfig, seed: int = 0, num_timesteps: int = NUM_TRAIN_TIMESTEPS,
               dtype: torch.dtype = torch.float32) -> UNetModel:
    """Construct a model whose initial weights depend only on (config, seed)."""
    check_config(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNetModel(config, num_timesteps=num_timesteps)
    return model.to(dtype)


def describe_taps(config: UNetConfig) -> list[str]:
    """Tap keys a forward pass with ``capture_taps`` records, sorted by path."""
    return sorted(predict_tap_shapes(config, 1, 2 ** (config.num_stages - 1),
                                     2 ** (config.num_stages - 1)))


def predict_tap_shapes(config: UNetConfig, batch: int, height: int, width: int
                       ) -> dict[str, tuple[int, int, int, int]]:
    """Analytic feature shape of every tap for a given input size."""
    c = check_config(config)
    out = {}
    h, w = height, width
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("down", stage)
        for pos in range(1, c.resnets_per_down_stage + 1):
            out[f"down.{stage}.resnet.{pos}"] = (batch, ch, h, w)
            if c.has_attention_layer("down", stage, pos):
                out[f"down.{stage}.attn.{pos}"] = (batch, ch, h, w)
        if stage < c.num_stages:
            h, w = (h + 1) // 2, (w + 1) // 2
    ch = c.stage_channels("mid", 1)
    out["mid.1.resnet.1"] = (batch, ch, h, w)
    if c.mid_block.has_attention:
        out["mid.1.attn.1"] = (batch, ch, h, w)
    if c.mid_block.has_second_resnet:
        out["mid.1.resnet.2"] = (batch, ch, h, w)
    out["mid.1.out.1"] = (batch, ch, h, w)
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("up", stage)
        for pos in range(1, c.resnets_per_up_stage + 1):
            out[f"up.{stage}.resnet.{pos}"] = (batch, ch, h, w)
            if c.has_attention_layer("up", stage, pos):
                out[f"up.{stage}.attn.{pos}"] = (batch, ch, h, w)
        if stage < c.num_stages:
            h, w = h * 2, w * 2
    return dict(sorted(out.items()))
