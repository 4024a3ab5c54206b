"""Architecture choices, search-space configurations and the JSON interchange format."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ParseError


class AttentionKind(str, enum.Enum):
    DOT = "Dot_Attn"
    EP = "EP_Attn"
    BILINEAR = "Bilinear_Attn"
    CONCAT = "Concat_Attn"
    MINUS = "Minus_Attn"


class ActivationKind(str, enum.Enum):
    RELU = "ReLU"
    LEAKY_RELU = "Leaky_ReLU"
    ELU = "ELU"
    SWISH = "SWISH"
    GELU = "GeLU"


class EncodingKind(str, enum.Enum):
    NULL = "Null"
    SKIP = "Skip"
    CONV_1 = "Conv_1"
    CONV_3 = "Conv_3"
    CONV_5 = "Conv_5"


WIDTH_FACTORS = (0.5, 1.0, 2.0, 4.0)

# Slot order inside a block; also the node discretization order.
SLOTS = ("enc_attn", "attn", "enc_ffn", "act", "k")

_SLOT_VALUES = {
    "enc_attn": tuple(EncodingKind),
    "attn": tuple(AttentionKind),
    "enc_ffn": tuple(EncodingKind),
    "act": tuple(ActivationKind),
    "k": WIDTH_FACTORS,
}


def slot_values(slot: str) -> tuple:
    return _SLOT_VALUES[slot]


def ffn_width(d_model: int, k: float) -> int:
    width = k * d_model
    if width <= 0 or not float(width).is_integer():
        raise ConfigError(f"d_ffn = {k} * {d_model} is not a positive integer")
    return int(width)


@dataclass(frozen=True)
class BlockSpec:
    enc_attn: EncodingKind
    enc_ffn: EncodingKind
    attn: AttentionKind
    act: ActivationKind
    k: float

    def __post_init__(self):
        object.__setattr__(self, "enc_attn", EncodingKind(self.enc_attn))
        object.__setattr__(self, "enc_ffn", EncodingKind(self.enc_ffn))
        object.__setattr__(self, "attn", AttentionKind(self.attn))
        object.__setattr__(self, "act", ActivationKind(self.act))
        if float(self.k) not in WIDTH_FACTORS:
            raise ConfigError(f"width factor {self.k} not in {WIDTH_FACTORS}")
        object.__setattr__(self, "k", float(self.k))

    def get(self, slot: str):
        return getattr(self, slot)

    def to_dict(self) -> dict:
        return {
            "enc_attn": self.enc_attn.value,
            "enc_ffn": self.enc_ffn.value,
            "attn": self.attn.value,
            "act": self.act.value,
            "k": self.k,
        }


VANILLA_BLOCK = BlockSpec(EncodingKind.SKIP, EncodingKind.SKIP, AttentionKind.DOT, ActivationKind.RELU, 4.0)


@dataclass(frozen=True)
class ArchitectureSpec:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ConfigError("an architecture needs at least one block")
        object.__setattr__(self, "blocks", blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {"blocks": [b.to_dict() for b in self.blocks]}

    def to_json(self) -> str:
        return serialize_spec(self)


def vanilla_spec(num_blocks: int = 3) -> ArchitectureSpec:
    """Pre-residual PatchTST-style Transformer: Skip/Skip, dot attention, ReLU, k=4."""
    return ArchitectureSpec((VANILLA_BLOCK,) * num_blocks)


def serialize_spec(spec: ArchitectureSpec) -> str:
    return json.dumps(spec.to_dict(), separators=(",", ":"))


_ENUMS = {"enc_attn": EncodingKind, "enc_ffn": EncodingKind, "attn": AttentionKind, "act": ActivationKind}
_BLOCK_KEYS = ("enc_attn", "enc_ffn", "attn", "act", "k")


def _parse_block(obj, path: str) -> BlockSpec:
    if not isinstance(obj, dict):
        raise ParseError(path, "block must be an object")
    unknown = sorted(set(obj) - set(_BLOCK_KEYS))
    if unknown:
        raise ParseError(f"{path}.{unknown[0]}", "unknown field")
    values = {}
    for key in _BLOCK_KEYS:
        if key not in obj:
            raise ParseError(f"{path}.{key}", "missing field")
        raw = obj[key]
        if key == "k":
            if isinstance(raw, bool) or not isinstance(raw, (int, float)) or float(raw) not in WIDTH_FACTORS:
                raise ParseError(f"{path}.k", f"{raw!r} is not one of {WIDTH_FACTORS}")
            values[key] = float(raw)
        else:
            try:
                values[key] = _ENUMS[key](raw)
            except ValueError:
                choices = ", ".join(e.value for e in _ENUMS[key])
                raise ParseError(f"{path}.{key}", f"unknown value {raw!r} (expected one of {choices})") from None
    return BlockSpec(**values)


def parse_spec(text: str) -> ArchitectureSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("$", "top level must be an object")
    extra = sorted(set(obj) - {"blocks"})
    if extra:
        raise ParseError(f"$.{extra[0]}", "unknown field")
    blocks = obj.get("blocks")
    if not isinstance(blocks, list) or not blocks:
        raise ParseError("$.blocks", "must be a non-empty list")
    return ArchitectureSpec(tuple(_parse_block(b, f"$.blocks[{i}]") for i, b in enumerate(blocks)))


FIXTURE_TASKS = ("ETTh1", "ETTh2", "ETTm1", "ETTm2", "M4-yearly")


def load_fixture(task: str) -> ArchitectureSpec:
    """Learned architecture shipped for one of :data:`FIXTURE_TASKS`."""
    if task not in FIXTURE_TASKS:
        raise ConfigError(f"no fixture for {task!r}; available: {FIXTURE_TASKS}")
    text = resources.files("tsnas.fixtures").joinpath(f"{task}.json").read_text()
    return parse_spec(text)


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Allowed candidates per slot; ``macro`` gives each block its own choices."""

    macro: bool = True
    allowed: dict = field(default_factory=lambda: {s: slot_values(s) for s in SLOTS})

    def __post_init__(self):
        normalized = {}
        for slot in SLOTS:
            values = self.allowed.get(slot)
            if values is None:
                values = slot_values(slot)
            universe = slot_values(slot)
            if slot == "k":
                vals = tuple(float(v) for v in values)
            else:
                enum_cls = type(universe[0])
                vals = tuple(enum_cls(v) for v in values)
            if not vals:
                raise ConfigError(f"allowed set for {slot!r} is empty")
            for v in vals:
                if v not in universe:
                    raise ConfigError(f"{v!r} is not a valid choice for {slot!r}")
            # keep canonical candidate order so candidate indices are stable
            normalized[slot] = tuple(v for v in universe if v in vals)
        object.__setattr__(self, "allowed", normalized)
        extra = set(self.allowed) - set(SLOTS)
        if extra:
            raise ConfigError(f"unknown slots {sorted(extra)}")

    def per_block_count(self) -> int:
        return math.prod(len(self.allowed[s]) for s in SLOTS)

    def contains(self, spec: ArchitectureSpec) -> bool:
        for block in spec.blocks:
            if any(block.get(s) not in self.allowed[s] for s in SLOTS):
                return False
        return self.macro or len(set(spec.blocks)) <= 1

    def to_dict(self) -> dict:
        return {
            "macro": self.macro,
            "allowed": {s: [v if s == "k" else v.value for v in self.allowed[s]] for s in SLOTS},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> SearchSpaceConfig:
        return cls(macro=bool(obj.get("macro", True)), allowed=dict(obj.get("allowed", {})))


def cardinality(cfg: SearchSpaceConfig, num_blocks: int) -> int:
    """Exact number of distinct architectures (Python integers, no overflow)."""
    if num_blocks < 1:
        raise ConfigError("num_blocks must be >= 1")
    for slot in SLOTS:
        if not cfg.allowed[slot]:
            raise ConfigError(f"allowed set for {slot!r} is empty")
    per_block = cfg.per_block_count()
    return per_block ** num_blocks if cfg.macro else per_block


def full_space() -> SearchSpaceConfig:
    return SearchSpaceConfig()


def reduced_space(name: str) -> SearchSpaceConfig:
    """Nested reductions: s1 micro, s2 +ReLU only, s3 +Skip only, s4 +k=4 and dot attention."""
    name = name.lower()
    if name in ("s", "full"):
        return full_space()
    order = ("s1", "s2", "s3", "s4")
    if name not in order:
        raise ConfigError(f"unknown search space {name!r}; expected full, s1, s2, s3 or s4")
    level = order.index(name) + 1
    allowed = {s: slot_values(s) for s in SLOTS}
    if level >= 2:
        allowed["act"] = (ActivationKind.RELU,)
    if level >= 3:
        allowed["enc_attn"] = (EncodingKind.SKIP,)
        allowed["enc_ffn"] = (EncodingKind.SKIP,)
    if level >= 4:
        allowed["k"] = (4.0,)
        allowed["attn"] = (AttentionKind.DOT,)
    return SearchSpaceConfig(macro=False, allowed=allowed)


def enumerate_blocks(cfg: SearchSpaceConfig):
    import itertools

    for combo in itertools.product(*(cfg.allowed[s] for s in SLOTS)):
        yield BlockSpec(**dict(zip(SLOTS, combo)))


def sample_spec(cfg: SearchSpaceConfig, num_blocks: int, rng: np.random.Generator) -> ArchitectureSpec:
    def one():
        return BlockSpec(**{s: cfg.allowed[s][rng.integers(len(cfg.allowed[s]))] for s in SLOTS})

    if cfg.macro:
        return ArchitectureSpec(tuple(one() for _ in range(num_blocks)))
    return ArchitectureSpec((one(),) * num_blocks)
