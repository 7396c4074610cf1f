"""U-Net architecture description, validation and JSON round-tripping.

A :class:`UNetConfig` fully determines a denoiser build.  Stages are numbered
from 1.  Down stage ``d`` uses ``channel_multipliers[d - 1]`` while up stage
``u`` mirrors it in reverse, so up stage 1 is the deepest one.

Attention layers are addressed as ``"{down|up}.{stage}.attn.{position}"``.
A pristine config derives every layer's transformer stack from
``transformer_depths``; once pruning makes a layer diverge, the layer gets an
entry in ``attention_layer_blocks`` listing the *original* (1-based) block ids
that survive, in order.  An empty list means the whole layer is gone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator


class ConfigError(ValueError):
    """Raised for configs that cannot be built or parsed."""

    def __init__(self, message: str, violations: list | None = None):
        super().__init__(message)
        self.violations = list(violations or [])


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


@dataclass(frozen=True)
class MidBlockConfig:
    has_attention: bool = True
    attention_depth: int = 1
    has_second_resnet: bool = True

    def __post_init__(self):
        if not self.has_attention:
            object.__setattr__(self, "attention_depth", 0)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    base_channels: int
    channel_multipliers: tuple[int, ...]
    resnets_per_down_stage: int
    resnets_per_up_stage: int
    transformer_depths: tuple[int, ...]
    context_dim: int
    attention_head_dim: int
    time_embed_dim: int
    pooled_embed_dim: int = 0
    mid_block: MidBlockConfig = field(default_factory=MidBlockConfig)
    attention_layer_blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "transformer_depths", tuple(self.transformer_depths))
        object.__setattr__(self, "pooled_embed_dim", int(self.pooled_embed_dim or 0))
        blocks = {k: tuple(v) for k, v in sorted(dict(self.attention_layer_blocks).items())}
        object.__setattr__(self, "attention_layer_blocks", blocks)

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    # -- structure helpers ------------------------------------------------

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    def stage_level(self, section: str, stage: int) -> int:
        """0-based index into the per-stage tables for a (section, stage)."""
        if section == "down":
            return stage - 1
        if section == "up":
            return self.num_stages - stage
        raise ValueError(f"no stage levels for section {section!r}")

    def stage_channels(self, section: str, stage: int) -> int:
        if section == "mid":
            return self.base_channels * self.channel_multipliers[-1]
        return self.base_channels * self.channel_multipliers[self.stage_level(section, stage)]

    def stage_depth(self, section: str, stage: int) -> int:
        if section == "mid":
            return self.mid_block.attention_depth
        return self.transformer_depths[self.stage_level(section, stage)]

    def layers_per_stage(self, section: str) -> int:
        return self.resnets_per_down_stage if section == "down" else self.resnets_per_up_stage

    def attention_sites(self) -> Iterator[tuple[str, int, int]]:
        """All attention-layer positions of the unpruned layout, down then up."""
        for section in ("down", "up"):
            for stage in range(1, self.num_stages + 1):
                if self.stage_depth(section, stage) == 0:
                    continue
                for pos in range(1, self.layers_per_stage(section) + 1):
                    yield section, stage, pos

    def layer_blocks(self, section: str, stage: int, position: int) -> tuple[int, ...]:
        """Original ids of the transformer blocks present in one attention layer."""
        key = attn_key(section, stage, position)
        if key in self.attention_layer_blocks:
            return self.attention_layer_blocks[key]
        return tuple(range(1, self.stage_depth(section, stage) + 1))

    def has_attention_layer(self, section: str, stage: int, position: int) -> bool:
        return len(self.layer_blocks(section, stage, position)) > 0

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "resnets_per_down_stage": self.resnets_per_down_stage,
            "resnets_per_up_stage": self.resnets_per_up_stage,
            "transformer_depths": list(self.transformer_depths),
            "context_dim": self.context_dim,
            "attention_head_dim": self.attention_head_dim,
            "time_embed_dim": self.time_embed_dim,
            "pooled_embed_dim": self.pooled_embed_dim,
            "mid_block": dataclasses.asdict(self.mid_block),
        }
        if self.attention_layer_blocks:
            out["attention_layer_blocks"] = {
                k: list(v) for k, v in self.attention_layer_blocks.items()
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {', '.join(unknown)}")
        required = known - {"pooled_embed_dim", "mid_block", "attention_layer_blocks"}
        missing = sorted(required - set(data))
        if missing:
            raise ConfigError(f"missing UNetConfig keys: {', '.join(missing)}")
        kwargs = dict(data)
        if "mid_block" in kwargs:
            mid = kwargs["mid_block"]
            mid_known = {f.name for f in dataclasses.fields(MidBlockConfig)}
            bad = sorted(set(mid) - mid_known)
            if bad:
                raise ConfigError(f"unknown mid_block keys: {', '.join(bad)}")
            kwargs["mid_block"] = MidBlockConfig(**mid)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UNetConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "UNetConfig":
        return cls.from_json(Path(path).read_text())


def attn_key(section: str, stage: int, position: int) -> str:
    return f"{section}.{stage}.attn.{position}"


def parse_attn_key(key: str) -> tuple[str, int, int]:
    section, stage, kind, position = key.split(".")
    if kind != "attn" or section not in ("down", "up"):
        raise ValueError(f"not an attention-layer key: {key!r}")
    return section, int(stage), int(position)


def validate_config(config: UNetConfig) -> list[Violation]:
    """Every reason ``config`` cannot be built; an empty list means buildable."""
    v: list[Violation] = []

    def positive(name):
        value = getattr(config, name)
        if not isinstance(value, int) or value <= 0:
            v.append(Violation(name, f"must be a positive integer, got {value!r}"))

    for name in ("in_channels", "out_channels", "base_channels", "time_embed_dim"):
        positive(name)
    if config.out_channels != config.in_channels:
        v.append(Violation("out_channels", "must equal in_channels"))
    if len(config.channel_multipliers) == 0:
        v.append(Violation("channel_multipliers", "needs at least one stage"))
    if any(not isinstance(m, int) or m <= 0 for m in config.channel_multipliers):
        v.append(Violation("channel_multipliers", "entries must be positive integers"))
    if len(config.channel_multipliers) != len(config.transformer_depths):
        v.append(Violation(
            "channel_multipliers/transformer_depths",
            f"lengths differ ({len(config.channel_multipliers)} vs {len(config.transformer_depths)})",
        ))
        return v
    if any(not isinstance(d, int) or d < 0 for d in config.transformer_depths):
        v.append(Violation("transformer_depths", "entries must be integers >= 0"))
        return v
    if config.resnets_per_down_stage < 0:
        v.append(Violation("resnets_per_down_stage", "must be >= 0"))
    if config.resnets_per_up_stage != config.resnets_per_down_stage + 1:
        v.append(Violation(
            "resnets_per_up_stage",
            "must equal resnets_per_down_stage + 1 so every skip connection is consumed",
        ))
    if config.pooled_embed_dim < 0:
        v.append(Violation("pooled_embed_dim", "must be >= 0"))
    mid = config.mid_block
    if mid.has_attention and mid.attention_depth < 1:
        v.append(Violation("mid_block.attention_depth", "must be >= 1 when has_attention"))

    uses_attention = any(d > 0 for d in config.transformer_depths) or mid.has_attention
    if uses_attention:
        if not isinstance(config.context_dim, int) or config.context_dim <= 0:
            v.append(Violation("context_dim", "must be positive when attention is present"))
        if not isinstance(config.attention_head_dim, int) or config.attention_head_dim <= 0:
            v.append(Violation("attention_head_dim", "must be positive when attention is present"))
            return v
        for level, depth in enumerate(config.transformer_depths):
            channels = config.base_channels * config.channel_multipliers[level]
            if depth > 0 and channels % config.attention_head_dim:
                v.append(Violation(
                    "base_channels/attention_head_dim",
                    f"stage {level + 1} width {channels} not divisible by head dim "
                    f"{config.attention_head_dim}",
                ))
        if mid.has_attention and config.stage_channels("mid", 1) % config.attention_head_dim:
            v.append(Violation("mid_block", "mid width not divisible by attention_head_dim"))

    for key, blocks in config.attention_layer_blocks.items():
        try:
            section, stage, pos = parse_attn_key(key)
        except ValueError as exc:
            v.append(Violation("attention_layer_blocks", str(exc)))
            continue
        if not 1 <= stage <= config.num_stages or not 1 <= pos <= config.layers_per_stage(section):
            v.append(Violation("attention_layer_blocks", f"{key} does not exist"))
            continue
        depth = config.stage_depth(section, stage)
        if list(blocks) != sorted(set(blocks)) or any(not 1 <= b <= depth for b in blocks):
            v.append(Violation(
                "attention_layer_blocks",
                f"{key} must list increasing block ids within 1..{depth}",
            ))
    return v


def check_config(config: UNetConfig) -> UNetConfig:
    violations = validate_config(config)
    if violations:
        raise ConfigError(
            "invalid UNetConfig: " + "; ".join(map(str, violations)), violations
        )
    return config


def sdxl_reference_config() -> UNetConfig:
    """Full-scale SDXL-base layout (about 2.57B parameters)."""
    return UNetConfig(
        in_channels=4,
        out_channels=4,
        base_channels=320,
        channel_multipliers=(1, 2, 4),
        resnets_per_down_stage=2,
        resnets_per_up_stage=3,
        transformer_depths=(0, 2, 10),
        context_dim=2048,
        attention_head_dim=64,
        time_embed_dim=1280,
        pooled_embed_dim=2816,
        mid_block=MidBlockConfig(has_attention=True, attention_depth=10, has_second_resnet=True),
    )


def toy_config(in_channels: int = 12) -> UNetConfig:
    """Desk-scale layout exercising every structural feature the plans touch."""
    return UNetConfig(
        in_channels=in_channels,
        out_channels=in_channels,
        base_channels=32,
        channel_multipliers=(1, 2, 4),
        resnets_per_down_stage=2,
        resnets_per_up_stage=3,
        transformer_depths=(0, 1, 2),
        context_dim=64,
        attention_head_dim=16,
        time_embed_dim=128,
        pooled_embed_dim=0,
        mid_block=MidBlockConfig(has_attention=True, attention_depth=2, has_second_resnet=True),
    )


NAMED_CONFIGS = {"sdxl": sdxl_reference_config, "toy": toy_config}
