"""Parameter, FLOPs and latency accounting, and the search reward.

FLOPs convention: one multiply-accumulate counts as 2 FLOPs. Squeeze-excite
pooling and gating multiplies are counted, activations and residual adds are
not. Depthwise convolutions count the full kernel at every output pixel.
Backbone figures exclude the per-domain stem and head unless asked for.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .space import SearchSpaceSpec, compile_space
from .supernet import (LayerPlan, PathSelection, head_tensor_extents, layer_tensor_extents,
                       plan_path)


@dataclass(frozen=True)
class RewardConfig:
    target_latency: float = 84.0
    beta: float = -0.07

    def __post_init__(self):
        if not self.target_latency > 0:
            raise ValueError("target_latency must be positive")
        if not self.beta < 0:
            raise ValueError("beta must be negative")


@dataclass(frozen=True)
class LatencyCalibration:
    """Affine latency proxy: base + T0 * sum_kind(coef[kind] * flops[kind]) / flops_ref."""

    flops_ref: float
    target_latency: float = 84.0
    base_ms: float = 0.0
    coefficients: Mapping[str, float] = field(default_factory=lambda: {"conv": 1.0, "se": 1.0})


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    latency: float


def layer_params(plan: LayerPlan) -> int:
    return sum(math.prod(ext) for ext in layer_tensor_extents(plan).values())


def head_params(spec: SearchSpaceSpec, path: PathSelection, classes: int, in_channels: int = 1) -> int:
    return sum(math.prod(e) for e in head_tensor_extents(spec, path, classes, in_channels).values())


def params(spec: SearchSpaceSpec, path: PathSelection, head_classes: int | None = None,
           in_channels: int = 1) -> int:
    """Weights allocated by the path; the domain's stem and head only if ``head_classes`` is given."""
    total = 0
    for plan in plan_path(spec, path):
        h, k = plan.hidden, plan.kernel
        if plan.expansion > 1:
            total += plan.cin * h
        total += h * k * k
        if plan.se:
            r = plan.se_reduce
            total += 2 * h * r + r + h
        total += h * plan.cout
    if head_classes is not None:
        total += head_params(spec, path, head_classes, in_channels)
    return total


def layer_macs(plan: LayerPlan) -> dict[str, int]:
    """Per-example multiply-accumulates of one layer, split into conv and se."""
    hi, wi = plan.in_hw
    ho, wo = plan.out_hw
    h = plan.hidden
    conv = 0
    if plan.expansion > 1:
        conv += hi * wi * plan.cin * h
    conv += ho * wo * h * plan.kernel ** 2
    conv += ho * wo * h * plan.cout
    se = 0
    if plan.se:
        se = 2 * ho * wo * h + 2 * h * plan.se_reduce
    return {"conv": conv, "se": se}


def flops_by_kind(spec: SearchSpaceSpec, path: PathSelection, resolution: int = 16) -> dict[str, int]:
    out = {"conv": 0, "se": 0}
    for plan in plan_path(spec, path, resolution):
        for kind, m in layer_macs(plan).items():
            out[kind] += 2 * m
    return out


def flops(spec: SearchSpaceSpec, path: PathSelection, resolution: int = 16,
          head_classes: int | None = None, in_channels: int = 1) -> int:
    total = sum(flops_by_kind(spec, path, resolution).values())
    if head_classes is not None:
        total += head_flops(spec, path, resolution, head_classes, in_channels)
    return total


def head_flops(spec: SearchSpaceSpec, path: PathSelection, resolution: int, classes: int,
               in_channels: int = 1) -> int:
    plans = plan_path(spec, path, resolution)
    hw = plans[-1].out_hw if plans else (resolution, resolution)
    fw = plans[-1].cout if plans else spec.stem_channels
    macs = resolution * resolution * in_channels * spec.stem_channels
    macs += hw[0] * hw[1] * fw  # global pooling
    macs += fw * spec.head_hidden + spec.head_hidden * classes
    return 2 * macs


def reference_path(spec: SearchSpaceSpec) -> PathSelection:
    """Widest option at every decision: the default latency reference."""
    points = compile_space(spec)
    idx = []
    for p in points:
        if p.role in ("layers", "kernel", "expansion", "filters"):
            idx.append(int(np.argmax(p.options)))
        else:
            idx.append(p.options.index(True) if True in p.options else 0)
    return PathSelection.from_indices(points, idx)


def default_calibration(spec: SearchSpaceSpec, resolution: int = 16,
                        target_latency: float = 84.0) -> LatencyCalibration:
    ref = flops(spec, reference_path(spec), resolution)
    return LatencyCalibration(flops_ref=float(ref), target_latency=target_latency)


def latency_estimate(spec: SearchSpaceSpec, path: PathSelection, calibration: LatencyCalibration,
                     resolution: int = 16) -> float:
    by_kind = flops_by_kind(spec, path, resolution)
    weighted = 0.0
    for kind, f in by_kind.items():
        if f == 0:
            continue
        if kind not in calibration.coefficients:
            raise KeyError(f"calibration has no coefficient for layer kind {kind!r}")
        weighted += calibration.coefficients[kind] * f
    return calibration.base_ms + calibration.target_latency * weighted / calibration.flops_ref


def reward(quality: float, latency: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Q * (T / T0) ** beta."""
    if not latency > 0:
        raise ValueError("latency must be positive")
    if not 0.0 <= quality <= 1.0:
        raise ValueError("quality must lie in [0, 1]")
    return quality * (latency / cfg.target_latency) ** cfg.beta


def cost_report(spec: SearchSpaceSpec, path: PathSelection, calibration: LatencyCalibration,
                resolution: int = 16) -> CostReport:
    return CostReport(params(spec, path), flops(spec, path, resolution),
                      latency_estimate(spec, path, calibration, resolution))


def joint_params(spec: SearchSpaceSpec, paths: Sequence[PathSelection],
                 head_classes: Sequence[int] | None = None,
                 in_channels: Sequence[int] | None = None) -> int:
    """Distinct weights of the merged model: shared prefixes are counted once."""
    boxes: dict[str, list[tuple[int, ...]]] = {}
    for path in paths:
        for plan in plan_path(spec, path):
            for t, ext in layer_tensor_extents(plan).items():
                boxes.setdefault(f"{plan.store_key}/{t}", []).append(ext)
    total = 0
    for exts in boxes.values():
        bound = tuple(max(d) for d in zip(*exts))
        mask = np.zeros(bound, dtype=bool)
        for ext in exts:
            mask[tuple(slice(0, d) for d in ext)] = True
        total += int(mask.sum())
    if head_classes is not None:
        chans = in_channels or [1] * len(paths)
        total += sum(head_params(spec, p, c, ch) for p, c, ch in zip(paths, head_classes, chans))
    return total


def joint_flops(spec: SearchSpaceSpec, paths: Sequence[PathSelection], resolution: int = 16) -> int:
    """Each domain runs its own path on its own input, so FLOPs add up."""
    return sum(flops(spec, p, resolution) for p in paths)


def reduction(joint_value: float, bundle_value: float) -> float:
    if bundle_value <= 0:
        raise ValueError("bundle cost must be positive")
    return 1.0 - joint_value / bundle_value
