"""Declarative MobileNetV3-like search space and its decision points."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

ROLES = ("layers", "kernel", "expansion", "filters", "se")
EXPANSION_RANGE = range(1, 7)


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    layer_choices: tuple[int, ...]
    kernel_choices: tuple[int, ...]
    expansion_choices: tuple[int, ...]
    filter_choices: tuple[int, ...]
    se_choices: tuple[bool, ...] = (False, True)
    stride: int = 1

    def choices(self, role: str) -> tuple:
        return {
            "layers": self.layer_choices,
            "kernel": self.kernel_choices,
            "expansion": self.expansion_choices,
            "filters": self.filter_choices,
            "se": self.se_choices,
        }[role]

    @property
    def max_layers(self) -> int:
        return max(self.layer_choices)


@dataclass(frozen=True)
class SearchSpaceSpec:
    blocks: tuple[BlockSpec, ...]
    stem_channels: int = 8
    head_hidden: int = 32

    def validate(self) -> "SearchSpaceSpec":
        if not self.blocks:
            raise SpaceError("search space needs at least one block")
        if self.stem_channels <= 0 or self.head_hidden <= 0:
            raise SpaceError("stem_channels and head_hidden must be positive")
        for b, block in enumerate(self.blocks):
            for role in ROLES:
                opts = block.choices(role)
                if not opts:
                    raise SpaceError(f"blocks[{b}].{role} choices are empty")
                if len(set(opts)) != len(opts):
                    raise SpaceError(f"blocks[{b}].{role} choices contain duplicates")
            if block.stride not in (1, 2):
                raise SpaceError(f"blocks[{b}].stride must be 1 or 2")
            for n in block.layer_choices:
                if n < 0:
                    raise SpaceError(f"blocks[{b}].layer_choices must be non-negative")
                if n == 0 and block.stride != 1:
                    raise SpaceError(f"blocks[{b}]: layer count 0 is only allowed with stride 1")
            for k in block.kernel_choices:
                if k <= 0 or k % 2 == 0:
                    raise SpaceError(f"blocks[{b}].kernel_choices must be odd positive, got {k}")
            for e in block.expansion_choices:
                if e not in EXPANSION_RANGE:
                    raise SpaceError(f"blocks[{b}].expansion_choices must lie in 1..6, got {e}")
            if any(f <= 0 for f in block.filter_choices):
                raise SpaceError(f"blocks[{b}].filter_choices must be positive")
            if list(block.filter_choices) != sorted(block.filter_choices):
                raise SpaceError(f"blocks[{b}].filter_choices must be sorted ascending")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["blocks"] = [
            {
                "layer_choices": list(b.layer_choices),
                "kernel_choices": list(b.kernel_choices),
                "expansion_choices": list(b.expansion_choices),
                "filter_choices": list(b.filter_choices),
                "se_choices": list(b.se_choices),
                "stride": b.stride,
            }
            for b in self.blocks
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SearchSpaceSpec":
        try:
            blocks = tuple(
                BlockSpec(
                    layer_choices=tuple(int(v) for v in b["layer_choices"]),
                    kernel_choices=tuple(int(v) for v in b["kernel_choices"]),
                    expansion_choices=tuple(int(v) for v in b["expansion_choices"]),
                    filter_choices=tuple(int(v) for v in b["filter_choices"]),
                    se_choices=tuple(bool(v) for v in b.get("se_choices", (False, True))),
                    stride=int(b.get("stride", 1)),
                )
                for b in d["blocks"]
            )
        except (KeyError, TypeError) as exc:
            raise SpaceError(f"malformed search space: {exc}") from exc
        return cls(
            blocks=blocks,
            stem_channels=int(d.get("stem_channels", 8)),
            head_hidden=int(d.get("head_hidden", 32)),
        ).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class DecisionPoint:
    id: str
    arity: int
    block: int
    role: str
    options: tuple = field(default=(), compare=False)


def default_space() -> SearchSpaceSpec:
    """Four blocks, up to two layers each, kernels {3,5}, expansions {1,3,6}."""
    common = dict(kernel_choices=(3, 5), expansion_choices=(1, 3, 6), se_choices=(False, True))
    return SearchSpaceSpec(
        blocks=(
            BlockSpec(layer_choices=(1, 2), filter_choices=(8, 12), stride=2, **common),
            BlockSpec(layer_choices=(1, 2), filter_choices=(12, 16), stride=1, **common),
            BlockSpec(layer_choices=(1, 2), filter_choices=(16, 24), stride=2, **common),
            BlockSpec(layer_choices=(0, 1), filter_choices=(24, 32), stride=1, **common),
        ),
        stem_channels=8,
        head_hidden=32,
    ).validate()


def compile_space(spec: SearchSpaceSpec) -> list[DecisionPoint]:
    """Enumerate decision points in block order, roles in ``ROLES`` order."""
    spec.validate()
    points = []
    for b, block in enumerate(spec.blocks):
        for role in ROLES:
            opts = tuple(block.choices(role))
            points.append(DecisionPoint(f"b{b}.{role}", len(opts), b, role, opts))
    return points


def path_count(spec: SearchSpaceSpec) -> int:
    return math.prod(p.arity for p in compile_space(spec))
