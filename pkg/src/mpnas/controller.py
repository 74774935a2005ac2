"""Per-domain REINFORCE controller over independent categorical decisions."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .space import DecisionPoint
from .supernet import PathSelection


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max()
    return s - np.log(np.exp(s).sum())


class Adam:
    """Adam over a list of 1-D float64 arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


class DomainController:
    """Logits per decision point, an EMA reward baseline and an Adam optimizer.

    ``baseline_momentum=None`` disables the baseline (plain REINFORCE).
    """

    def __init__(self, points: Sequence[DecisionPoint], lr: float = 0.165,
                 baseline_momentum: float | None = 0.9):
        self.points = list(points)
        self.logits = [np.zeros(p.arity) for p in self.points]
        self.baseline_momentum = baseline_momentum
        self.baseline = 0.0
        self.optimizer = Adam(self.logits, lr)

    def probabilities(self) -> list[np.ndarray]:
        return [softmax(z) for z in self.logits]

    def log_prob(self, path: PathSelection) -> float:
        return float(sum(log_softmax(z)[i] for z, i in zip(self.logits, path.indices)))

    def sample_path(self, rng: np.random.Generator) -> tuple[PathSelection, float]:
        probs = self.probabilities()
        idx = []
        logp = 0.0
        for z, p in zip(self.logits, probs):
            # inverse-CDF draw, one uniform per decision
            i = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            i = min(i, len(p) - 1)
            idx.append(i)
            logp += float(log_softmax(z)[i])
        return PathSelection.from_indices(self.points, idx), logp

    def most_likely_path(self) -> PathSelection:
        # np.argmax returns the lowest index among ties
        return PathSelection.from_indices(self.points, [int(np.argmax(z)) for z in self.logits])

    def entropy(self) -> float:
        return float(sum(-(p * np.log(p)).sum() for p in self.probabilities()))

    def score_function(self, path: PathSelection) -> list[np.ndarray]:
        """Gradient of log p(path) w.r.t. each logit vector: onehot - softmax."""
        out = []
        for p, i in zip(self.probabilities(), path.indices):
            g = -p.copy()
            g[i] += 1.0
            out.append(g)
        return out

    def advantage(self, reward: float) -> float:
        if self.baseline_momentum is None:
            return reward
        return reward - self.baseline

    def reinforce_update(self, path: PathSelection, reward: float) -> float:
        """One REINFORCE step on -(reward - baseline) * log p(path); returns the advantage."""
        if not math.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        path.validate(self.points)
        adv = self.advantage(reward)
        if adv != 0.0:
            grads = [-adv * g for g in self.score_function(path)]
            self.optimizer.step(grads)
            for z in self.logits:
                if not np.all(np.isfinite(z)):
                    raise FloatingPointError("controller logits became non-finite")
        self.observe(reward)
        return adv

    def observe(self, reward: float) -> None:
        """Fold a reward into the baseline without touching the logits."""
        if self.baseline_momentum is not None:
            mu = self.baseline_momentum
            self.baseline = mu * self.baseline + (1 - mu) * reward

    def state_dict(self) -> dict:
        return {
            "logits": {p.id: z.tolist() for p, z in zip(self.points, self.logits)},
            "baseline": self.baseline,
            "optimizer": self.optimizer.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        for p, z in zip(self.points, self.logits):
            z[...] = state["logits"][p.id]
        self.baseline = float(state["baseline"])
        self.optimizer.load_state_dict(state["optimizer"])

    def dump_probabilities(self) -> dict[str, list[float]]:
        return {p.id: [round(float(v), 6) for v in q] for p, q in zip(self.points, self.probabilities())}
