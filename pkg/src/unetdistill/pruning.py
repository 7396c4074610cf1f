"""Block-removal plans: validation, application, weight inheritance and accounting."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import UNetModel, build_unet, up_resnet_channels
from .config import (
    ConfigError,
    MidBlockConfig,
    UNetConfig,
    Violation,
    attn_key,
    check_config,
)


class Kind(str, enum.Enum):
    TRANSFORMER_BLOCKS = "TransformerBlocks"
    MID_ATTENTION = "MidAttention"
    MID_SECOND_RESNET = "MidSecondResnet"
    WHOLE_ATTENTION_LAYER = "WholeAttentionLayer"


MID_KINDS = (Kind.MID_ATTENTION, Kind.MID_SECOND_RESNET)


class PlanError(ConfigError):
    pass


class CapacityError(ValueError):
    def __init__(self, requested: float, achievable: float):
        super().__init__(
            f"cannot remove {requested:.1%} of parameters; the candidate set tops out at "
            f"{achievable:.4%}"
        )
        self.requested = requested
        self.achievable = achievable


@dataclass(frozen=True)
class RemovalDirective:
    kind: Kind
    section: str = "mid"
    stage: int = 1
    attn_layer: int = 1
    blocks: frozenset = frozenset()

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "blocks", frozenset(int(b) for b in self.blocks))
        if kind in MID_KINDS:
            object.__setattr__(self, "stage", 1)
            object.__setattr__(self, "attn_layer", 1)

    @property
    def site(self) -> tuple[str, int, int]:
        return self.section, self.stage, self.attn_layer

    @property
    def layer_key(self) -> str:
        return attn_key(*self.site)

    def describe(self) -> str:
        if self.kind in MID_KINDS:
            return self.kind.value
        if self.kind == Kind.WHOLE_ATTENTION_LAYER:
            return f"{self.kind.value}({self.layer_key})"
        return f"{self.kind.value}({self.layer_key}, blocks={sorted(self.blocks)})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "section": self.section,
            "stage": self.stage,
            "attn_layer": self.attn_layer,
            "blocks": sorted(self.blocks),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RemovalDirective":
        unknown = set(data) - {"kind", "section", "stage", "attn_layer", "blocks"}
        if unknown:
            raise PlanError(f"unknown directive keys: {sorted(unknown)}")
        return cls(
            kind=Kind(data["kind"]),
            section=data.get("section", "mid"),
            stage=int(data.get("stage", 1)),
            attn_layer=int(data.get("attn_layer", 1)),
            blocks=frozenset(data.get("blocks", ())),
        )


def transformer_blocks(section, stage, layer, blocks) -> RemovalDirective:
    return RemovalDirective(Kind.TRANSFORMER_BLOCKS, section, stage, layer, frozenset(blocks))


@dataclass(frozen=True)
class PruningPlan:
    name: str
    directives: tuple[RemovalDirective, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "directives", tuple(self.directives))

    def to_dict(self) -> dict:
        return {"name": self.name, "directives": [d.to_dict() for d in self.directives]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "PruningPlan":
        unknown = set(data) - {"name", "directives"}
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        return cls(
            name=str(data.get("name", "")),
            directives=tuple(RemovalDirective.from_dict(d) for d in data.get("directives", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_json(Path(path).read_text())


EMPTY_PLAN = PruningPlan("empty")


# -- canonical plans -------------------------------------------------------

def canonical_plan(name: str) -> PruningPlan:
    """The SSD-1B and Vega removal lists, addressed against the SDXL layout."""
    key = name.upper().replace("-", "_")
    mid = [RemovalDirective(Kind.MID_ATTENTION), RemovalDirective(Kind.MID_SECOND_RESNET)]
    if key in ("SSD_1B", "SSD1B"):
        deep = {4, 5, 7, 8, 9, 10}
        return PruningPlan("SSD_1B", tuple(mid + [
            transformer_blocks("down", 3, 1, deep),
            transformer_blocks("down", 3, 2, deep),
            transformer_blocks("up", 1, 1, deep),
            transformer_blocks("up", 1, 2, deep),
            transformer_blocks("up", 2, 2, {2}),
            transformer_blocks("up", 2, 3, {2}),
        ]))
    if key == "VEGA":
        keep_two = set(range(3, 11))
        keep_one_three = {2, 4, 5, 6, 7, 8, 9, 10}
        return PruningPlan("VEGA", tuple(mid + [
            transformer_blocks("down", 3, 1, keep_two),
            transformer_blocks("down", 3, 2, keep_one_three),
            transformer_blocks("up", 1, 1, keep_two),
            transformer_blocks("up", 1, 2, keep_two),
            transformer_blocks("up", 1, 3, keep_two),
            transformer_blocks("down", 2, 1, {2}),
            transformer_blocks("down", 2, 2, {2}),
            transformer_blocks("up", 2, 1, {2}),
            transformer_blocks("up", 2, 2, {2}),
            transformer_blocks("up", 2, 3, {2}),
        ]))
    raise KeyError(f"unknown canonical plan {name!r}; expected SSD_1B or VEGA")


def load_plan(ref: str) -> PruningPlan:
    """A plan from a JSON file path or a canonical plan name."""
    path = Path(ref)
    if path.exists():
        return PruningPlan.load(path)
    return canonical_plan(ref)


# -- validation and application -------------------------------------------

def validate_plan(config: UNetConfig, plan: PruningPlan) -> list[Violation]:
    check_config(config)
    out: list[Violation] = []
    seen_sites: dict[tuple, RemovalDirective] = {}
    for i, d in enumerate(plan.directives, start=1):
        where = f"directive {i} ({d.describe()})"
        if d.kind in MID_KINDS:
            if d.section != "mid":
                out.append(Violation(where, "mid-block directives must use section 'mid'"))
                continue
            if d.kind in seen_sites:
                out.append(Violation(where, "duplicate mid-block directive"))
            seen_sites[d.kind] = d
            if d.kind == Kind.MID_ATTENTION and not config.mid_block.has_attention:
                out.append(Violation(where, "mid block has no attention layer to remove"))
            if d.kind == Kind.MID_SECOND_RESNET and not config.mid_block.has_second_resnet:
                out.append(Violation(where, "mid block has no second resnet to remove"))
            continue

        if d.section not in ("down", "up"):
            out.append(Violation(where, f"section must be down or up, got {d.section!r}"))
            continue
        if not 1 <= d.stage <= config.num_stages:
            out.append(Violation(where, f"stage {d.stage} outside 1..{config.num_stages}"))
            continue
        layers = config.layers_per_stage(d.section)
        if not 1 <= d.attn_layer <= layers:
            out.append(Violation(where, f"attention layer {d.attn_layer} outside 1..{layers}"))
            continue
        depth = config.stage_depth(d.section, d.stage)
        if depth == 0:
            out.append(Violation(where, f"{d.section} stage {d.stage} has transformer depth 0"))
            continue
        if d.site in seen_sites:
            out.append(Violation(where, f"duplicate directive for {d.layer_key}"))
        seen_sites[d.site] = d
        present = config.layer_blocks(*d.site)
        if not present:
            out.append(Violation(where, f"{d.layer_key} was already removed"))
            continue
        if d.kind == Kind.TRANSFORMER_BLOCKS:
            if not d.blocks:
                out.append(Violation(where, "block set must be non-empty"))
            out_of_range = sorted(b for b in d.blocks if not 1 <= b <= depth)
            gone = sorted(b for b in d.blocks if 1 <= b <= depth and b not in present)
            if out_of_range:
                out.append(Violation(
                    where, f"blocks {out_of_range} outside transformer depth 1..{depth}"
                ))
            if gone:
                out.append(Violation(where, f"blocks {gone} were already removed"))
        elif d.blocks:
            out.append(Violation(where, "WholeAttentionLayer takes no block list"))
    return out


def check_plan(config: UNetConfig, plan: PruningPlan) -> None:
    violations = validate_plan(config, plan)
    if violations:
        raise PlanError(
            f"plan {plan.name!r} is invalid: " + "; ".join(map(str, violations)), violations
        )


def apply_plan(config: UNetConfig, plan: PruningPlan) -> UNetConfig:
    check_plan(config, plan)
    table = {k: tuple(v) for k, v in config.attention_layer_blocks.items()}
    mid = config.mid_block
    for d in plan.directives:
        if d.kind == Kind.MID_ATTENTION:
            mid = MidBlockConfig(False, 0, mid.has_second_resnet)
        elif d.kind == Kind.MID_SECOND_RESNET:
            mid = MidBlockConfig(mid.has_attention, mid.attention_depth, False)
        elif d.kind == Kind.WHOLE_ATTENTION_LAYER:
            table[d.layer_key] = ()
        else:
            present = config.layer_blocks(*d.site)
            table[d.layer_key] = tuple(b for b in present if b not in d.blocks)
    return UNetConfig(**{
        **{f: getattr(config, f) for f in config.__dataclass_fields__},
        "mid_block": mid,
        "attention_layer_blocks": table,
    })


_BLOCK_PATH = re.compile(r"^(down|up)\.(\d+)\.attn\.(\d+)\.blocks\.(\d+)\.(.*)$")


def block_provenance(teacher_config: UNetConfig, student_config: UNetConfig
                     ) -> dict[str, str]:
    """Student transformer-block prefix -> teacher prefix, by original block id."""
    out = {}
    for site in student_config.attention_sites():
        student_ids = student_config.layer_blocks(*site)
        teacher_ids = teacher_config.layer_blocks(*site)
        key = attn_key(*site)
        for pos, original in enumerate(student_ids, start=1):
            out[f"{key}.blocks.{pos}"] = f"{key}.blocks.{teacher_ids.index(original) + 1}"
    return out


def teacher_path(student_path: str, provenance: dict[str, str]) -> str:
    m = _BLOCK_PATH.match(student_path)
    if not m:
        return student_path
    section, stage, layer, pos, rest = m.groups()
    prefix = f"{section}.{stage}.attn.{layer}.blocks.{pos}"
    return f"{provenance[prefix]}.{rest}"


def inherit_weights(teacher: UNetModel, plan: PruningPlan) -> UNetModel:
    """Build the pruned student and copy every surviving tensor from ``teacher``."""
    student_config = apply_plan(teacher.config, plan)
    dtype = next(teacher.parameters()).dtype
    student = build_unet(student_config, seed=0, num_timesteps=teacher.num_timesteps, dtype=dtype)
    provenance = block_provenance(teacher.config, student_config)
    source = dict(teacher.named_parameters())
    with torch.no_grad():
        for path, param in student.named_parameters():
            origin = teacher_path(path, provenance)
            param.copy_(source[origin])
    student.provenance = {k: v for k, v in provenance.items() if k != v}
    return student


# -- accounting --------------------------------------------------------------

def _conv(k, cin, cout):
    return k * k * cin * cout + cout


def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _resnet(cin, cout, temb):
    n = 2 * cin + _conv(3, cin, cout) + _linear(temb, cout) + 2 * cout + _conv(3, cout, cout)
    if cin != cout:
        n += _conv(1, cin, cout)
    return n


def _transformer_block(c, ctx):
    self_attn = 3 * c * c + _linear(c, c)
    cross_attn = c * c + 2 * ctx * c + _linear(c, c)
    ff = _linear(c, 8 * c) + _linear(4 * c, c)
    return 3 * 2 * c + self_attn + cross_attn + ff


def _attention_layer(c, ctx, depth):
    if depth == 0:
        return 0
    return 2 * c + 2 * _linear(c, c) + depth * _transformer_block(c, ctx)


def count_params(config: UNetConfig) -> int:
    """Exact scalar parameter count of ``build_unet(config)``, without building it."""
    c = check_config(config)
    temb = c.time_embed_dim
    total = _conv(3, c.in_channels, c.base_channels)
    total += _linear(c.base_channels, temb) + _linear(temb, temb)
    if c.pooled_embed_dim:
        total += _linear(c.pooled_embed_dim, temb) + _linear(temb, temb)
    prev = c.base_channels
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("down", stage)
        for pos in range(1, c.resnets_per_down_stage + 1):
            total += _resnet(prev, ch, temb)
            prev = ch
            total += _attention_layer(ch, c.context_dim, len(c.layer_blocks("down", stage, pos)))
        if stage < c.num_stages:
            total += _conv(3, prev, prev)
    mid = c.stage_channels("mid", 1)
    total += _resnet(prev, mid, temb)
    if c.mid_block.has_attention:
        total += _attention_layer(mid, c.context_dim, c.mid_block.attention_depth)
    if c.mid_block.has_second_resnet:
        total += _resnet(mid, mid, temb)
    io = up_resnet_channels(c)
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("up", stage)
        for pos in range(1, c.resnets_per_up_stage + 1):
            total += _resnet(io[(stage, pos)][0], ch, temb)
            total += _attention_layer(ch, c.context_dim, len(c.layer_blocks("up", stage, pos)))
        if stage < c.num_stages:
            total += _conv(3, ch, ch)
    top = c.stage_channels("up", c.num_stages)
    total += 2 * top + _conv(3, top, c.out_channels)
    return total


def conv_macs(k: int, cin: int, cout: int, height: int, width: int) -> int:
    return k * k * cin * cout * height * width


def _attention_layer_macs(c, ctx, depth, n, m):
    if depth == 0:
        return {}
    per_block_attn = (
        4 * n * c * c + 2 * n * n * c            # self: qkv + out, scores + values
        + 2 * n * c * c + 2 * m * ctx * c + 2 * n * m * c  # cross
    )
    return {
        "linear": 2 * n * c * c,
        "attention": depth * per_block_attn,
        "feedforward": depth * (n * c * 8 * c + n * 4 * c * c),
    }


def estimate_flops(config: UNetConfig, height: int, width: int, context_tokens: int = 77,
                   breakdown: bool = False):
    """Multiply-accumulate count of one forward pass at batch 1; norms are ignored."""
    c = check_config(config)
    mult = 2 ** (c.num_stages - 1)
    if height % mult or width % mult:
        raise ValueError(f"height and width must be divisible by {mult}")
    parts = {"conv": 0, "linear": 0, "attention": 0, "feedforward": 0, "embedding": 0}

    def add(d):
        for k, v in d.items():
            parts[k] += v

    temb = c.time_embed_dim
    parts["embedding"] += c.base_channels * temb + temb * temb
    if c.pooled_embed_dim:
        parts["embedding"] += c.pooled_embed_dim * temb + temb * temb

    def resnet(cin, cout, h, w):
        macs = conv_macs(3, cin, cout, h, w) + conv_macs(3, cout, cout, h, w)
        if cin != cout:
            macs += conv_macs(1, cin, cout, h, w)
        parts["conv"] += macs
        parts["embedding"] += temb * cout

    h, w = height, width
    parts["conv"] += conv_macs(3, c.in_channels, c.base_channels, h, w)
    prev = c.base_channels
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("down", stage)
        for pos in range(1, c.resnets_per_down_stage + 1):
            resnet(prev, ch, h, w)
            prev = ch
            depth = len(c.layer_blocks("down", stage, pos))
            add(_attention_layer_macs(ch, c.context_dim, depth, h * w, context_tokens))
        if stage < c.num_stages:
            h, w = h // 2, w // 2
            parts["conv"] += conv_macs(3, prev, prev, h, w)
    mid = c.stage_channels("mid", 1)
    resnet(prev, mid, h, w)
    if c.mid_block.has_attention:
        add(_attention_layer_macs(mid, c.context_dim, c.mid_block.attention_depth, h * w,
                                  context_tokens))
    if c.mid_block.has_second_resnet:
        resnet(mid, mid, h, w)
    io = up_resnet_channels(c)
    for stage in range(1, c.num_stages + 1):
        ch = c.stage_channels("up", stage)
        for pos in range(1, c.resnets_per_up_stage + 1):
            resnet(io[(stage, pos)][0], ch, h, w)
            depth = len(c.layer_blocks("up", stage, pos))
            add(_attention_layer_macs(ch, c.context_dim, depth, h * w, context_tokens))
        if stage < c.num_stages:
            h, w = h * 2, w * 2
            parts["conv"] += conv_macs(3, ch, ch, h, w)
    parts["conv"] += conv_macs(3, c.stage_channels("up", c.num_stages), c.out_channels, h, w)
    total = sum(parts.values())
    return (total, parts) if breakdown else total


# -- progressive plans -------------------------------------------------------

class RemovalOrder(str, enum.Enum):
    DEEPEST_FIRST = "deepest_first"
    ROUND_ROBIN = "round_robin"


def _attention_sites(config: UNetConfig, level: int) -> list[tuple]:
    """Attention layers at one resolution level, alternating down and up."""
    down_stage, up_stage = level + 1, config.num_stages - level
    downs = [("down", down_stage, p) for p in range(1, config.resnets_per_down_stage + 1)]
    ups = [("up", up_stage, p) for p in range(1, config.resnets_per_up_stage + 1)]
    sites = []
    for i in range(max(len(downs), len(ups))):
        sites.extend(x[i] for x in (downs, ups) if i < len(x))
    return sites


def removal_candidates(config: UNetConfig, order: RemovalOrder = RemovalOrder.DEEPEST_FIRST):
    """Atomic removals in heuristic order.

    An atom is ``(kind,)`` for the mid block or ``(section, stage, layer, block)``.
    Both orders start with the mid block.  DEEPEST_FIRST then empties the lowest
    resolution level before touching the next one.  ROUND_ROBIN takes the last
    block of every attention layer per round, deepest level first, so every
    level is trimmed before any layer is emptied.
    """
    order = RemovalOrder(order)
    atoms: list[tuple] = []
    if config.mid_block.has_attention:
        atoms.append((Kind.MID_ATTENTION,))
    if config.mid_block.has_second_resnet:
        atoms.append((Kind.MID_SECOND_RESNET,))
    depths = config.transformer_depths
    levels = [lv for lv in reversed(range(config.num_stages)) if depths[lv] > 0]
    if order is RemovalOrder.DEEPEST_FIRST:
        rounds = [[(lv, b)] for lv in levels for b in range(depths[lv], 0, -1)]
    else:
        rounds = [[(lv, depths[lv] - r) for lv in levels if depths[lv] > r]
                  for r in range(max(depths, default=0))]
    for level, block in (x for rnd in rounds for x in rnd):
        for site in _attention_sites(config, level):
            if block in config.layer_blocks(*site):
                atoms.append((*site, block))
    return atoms


def plan_from_atoms(config: UNetConfig, atoms, name: str) -> PruningPlan:
    directives = []
    per_site: dict[tuple, set] = {}
    for atom in atoms:
        if len(atom) == 1:
            directives.append(RemovalDirective(atom[0]))
        else:
            site = atom[:3]
            if site not in per_site:
                per_site[site] = set()
                directives.append(site)
            per_site[site].add(atom[3])
    out = []
    for d in directives:
        if isinstance(d, RemovalDirective):
            out.append(d)
        elif per_site[d] == set(config.layer_blocks(*d)):
            out.append(RemovalDirective(Kind.WHOLE_ATTENTION_LAYER, *d))
        else:
            out.append(transformer_blocks(*d, per_site[d]))
    return PruningPlan(name, tuple(out))


def plan_atoms(config: UNetConfig, plan: PruningPlan) -> set[tuple]:
    """The set of atomic removals a plan performs (WholeAttentionLayer expanded)."""
    atoms = set()
    for d in plan.directives:
        if d.kind in MID_KINDS:
            atoms.add((d.kind,))
        elif d.kind == Kind.WHOLE_ATTENTION_LAYER:
            atoms.update((*d.site, b) for b in config.layer_blocks(*d.site))
        else:
            atoms.update((*d.site, b) for b in d.blocks)
    return atoms


def incremental_plan(config: UNetConfig, previous: PruningPlan, nxt: PruningPlan,
                     name: str | None = None) -> PruningPlan:
    """Plan taking ``apply_plan(config, previous)`` to ``apply_plan(config, nxt)``."""
    before, after = plan_atoms(config, previous), plan_atoms(config, nxt)
    if not before <= after:
        raise PlanError(f"plan {nxt.name!r} does not contain plan {previous.name!r}")
    ordered = [a for a in removal_candidates(config) if a in after - before]
    leftover = sorted(after - before - set(ordered), key=str)
    pruned = apply_plan(config, previous)
    return plan_from_atoms(pruned, ordered + leftover, name or f"{previous.name}->{nxt.name}")


def progressive_plans(config: UNetConfig, fractions, order: RemovalOrder = RemovalOrder.DEEPEST_FIRST
                      ) -> list[PruningPlan]:
    """Nested plans whose parameter reductions reach each requested fraction."""
    fractions = [float(f) for f in fractions]
    if any(not 0 < f < 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1)")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly increasing")
    base = count_params(config)
    atoms = removal_candidates(config, order)
    plans = []
    pending = list(fractions)
    chosen: list[tuple] = []
    reduction = 0.0
    for atom in atoms:
        if not pending:
            break
        chosen.append(atom)
        plan = plan_from_atoms(config, chosen, "")
        reduction = 1 - count_params(apply_plan(config, plan)) / base
        while pending and reduction >= pending[0]:
            frac = pending.pop(0)
            plans.append(PruningPlan(f"progressive-{round(frac * 100)}", plan.directives))
    if pending:
        raise CapacityError(pending[0], reduction)
    return plans
