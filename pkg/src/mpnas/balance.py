"""Adaptive balanced domain prioritization.

Per-domain losses are passed through a monotone boosting function ``h``;
``h'(L_i)`` is the weight domain ``i`` receives in the joint gradient. The
exponential kind uses a coefficient ``w`` that can follow a linear schedule
over training progress.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

from .nn import Scalar

log = logging.getLogger(__name__)

KINDS = ("identity", "quadratic", "exponential", "empirical")
DIRECTIONS = ("constant", "decay", "increase")

# CLI shorthands -> (kind, direction)
PRESETS = {
    "identity": ("identity", "constant"),
    "quadratic": ("quadratic", "constant"),
    "exp-const": ("exponential", "constant"),
    "exp-decay": ("exponential", "decay"),
    "exp-increase": ("exponential", "increase"),
    "empirical": ("empirical", "constant"),
}


@dataclass(frozen=True)
class BoostingSchedule:
    kind: str = "exponential"
    direction: str = "decay"
    w_max: float = 2.0
    w_min: float = 1.0
    weights: tuple[float, ...] = field(default_factory=tuple)
    loss_cap: float = 20.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown balance kind {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown balance direction {self.direction!r}")
        if not self.w_max >= self.w_min > 0:
            raise ValueError("need w_max >= w_min > 0")
        if self.kind == "empirical" and (not self.weights or min(self.weights) <= 0):
            raise ValueError("empirical balancing needs strictly positive weights")
        if self.loss_cap <= 0:
            raise ValueError("loss_cap must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "BoostingSchedule":
        if name not in PRESETS:
            raise ValueError(f"unknown balance preset {name!r}")
        kind, direction = PRESETS[name]
        return cls(kind=kind, direction=direction, **kw)


def coefficient(schedule: BoostingSchedule, progress: float) -> float:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    lo, hi = schedule.w_min, schedule.w_max
    if schedule.direction == "decay":
        return hi + progress * (lo - hi)
    if schedule.direction == "increase":
        return lo + progress * (hi - lo)
    return hi


def _check_losses(losses: Sequence[float]) -> list[float]:
    out = [float(v) for v in losses]
    for v in out:
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"domain losses must be finite and non-negative, got {v}")
    return out


def _capped(schedule: BoostingSchedule, losses: list[float]) -> list[float]:
    if schedule.kind != "exponential":
        return losses
    capped = [min(v, schedule.loss_cap) for v in losses]
    if capped != losses:
        log.warning("exponential boosting: losses clamped at %.3g", schedule.loss_cap)
    return capped


def boost_derivative(schedule: BoostingSchedule, losses: Sequence[float], progress: float) -> list[float]:
    """Closed-form h'(L_i) for every domain."""
    losses = _capped(schedule, _check_losses(losses))
    if schedule.kind == "identity":
        return [1.0] * len(losses)
    if schedule.kind == "quadratic":
        return [2.0 * v for v in losses]
    if schedule.kind == "empirical":
        _check_weights(schedule.weights, losses)
        return [float(w) for w in schedule.weights]
    w = coefficient(schedule, progress)
    return [math.exp(v / w) / w for v in losses]


def _check_weights(weights, losses):
    if len(weights) != len(losses):
        raise ValueError(f"expected {len(losses)} domain weights, got {len(weights)}")


def transform_losses(losses: Sequence[float], schedule: BoostingSchedule,
                     progress: float) -> tuple[float, list[float]]:
    """Total boosted loss and d(total)/dL_i, obtained by reverse-mode differentiation.

    Losses above ``loss_cap`` are clamped for the exponential kind; the
    clamp passes gradients straight through so a capped domain keeps the
    weight of the cap instead of dropping to zero.
    """
    raw = _check_losses(losses)
    values = _capped(schedule, raw)
    nodes = [Scalar(v) for v in values]
    if schedule.kind == "identity":
        terms = nodes
    elif schedule.kind == "quadratic":
        terms = [n.square() for n in nodes]
    elif schedule.kind == "empirical":
        _check_weights(schedule.weights, nodes)
        terms = [n * float(w) for n, w in zip(nodes, schedule.weights)]
    else:
        w = coefficient(schedule, progress)
        terms = [(n / w).exp() for n in nodes]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total.backward()
    return total.value, [n.grad for n in nodes]


def empirical_weighted_loss(losses: Sequence[float], weights: Sequence[float]) -> float:
    losses = _check_losses(losses)
    _check_weights(weights, losses)
    return float(sum(w * v for w, v in zip(weights, losses)))
