"""Multi-path architecture search, joint training and the baseline modes.

Search step, for every domain in order: sample a path, score it on one
validation batch (reward = accuracy scaled by the latency penalty), then
compute its loss on one training batch. The boosted joint loss is
back-propagated once into the shared weights, and afterwards each
controller takes a REINFORCE step on its reward (skipped during warm-up).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import cost, nn
from .balance import BoostingSchedule, coefficient, transform_losses
from .controller import DomainController
from .data import BatchStream, DomainDataset
from .space import SearchSpaceSpec, compile_space
from .supernet import (DomainInfo, JointModel, PathSelection, SuperNetwork, merge,
                       uniform_random_path)

log = logging.getLogger(__name__)

MODES = ("mpnas", "mdsp", "sp", "mrp", "sdnas")


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    mode: str = "mpnas"
    seed: int = 0
    # search phase
    epochs: int = 8
    steps_per_epoch: int = 50
    search_batch: int = 32
    validation_batch: int = 64
    search_lr: float = 1e-2
    warmup_fraction: float = 0.125
    controller_lr: float = 0.165
    baseline_momentum: float = 0.9
    # final training phase
    train_epochs: int = 6
    train_steps_per_epoch: int = 50
    train_batch: int = 32
    train_lr: float = 3e-2
    # optimizer shared by both phases
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-2
    weight_decay: float = 1e-5
    reward: cost.RewardConfig = field(default_factory=cost.RewardConfig)
    balance: BoostingSchedule = field(default_factory=BoostingSchedule)
    mrp_trials: int = 10
    sp_path: dict | None = None
    resolution: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        for name in ("epochs", "steps_per_epoch", "search_batch", "validation_batch",
                     "train_epochs", "train_steps_per_epoch", "train_batch", "mrp_trials"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def search_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def train_steps(self) -> int:
        return self.train_epochs * self.train_steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.search_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["balance"]["weights"] = list(self.balance.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "reward" in d:
            d["reward"] = cost.RewardConfig(**d["reward"])
        if "balance" in d:
            b = dict(d["balance"])
            b["weights"] = tuple(b.get("weights") or ())
            d["balance"] = BoostingSchedule(**b)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


def derive_seed(seed: int, *parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in (seed, *parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFF


def derive_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *parts))


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


class RMSProp:
    """Momentum-free RMSProp over a weight store; only listed tensors move."""

    def __init__(self, store: nn.WeightStore, decay: float = 0.9, eps: float = 1e-2):
        self.store, self.decay, self.eps = store, decay, eps
        self.ms: dict[str, np.ndarray] = {}

    def step(self, lr: float, keys: Sequence[str]) -> None:
        for k in keys:
            g = self.store.grad[k]
            ms = self.ms.get(k)
            if ms is None:
                ms = self.ms[k] = np.zeros_like(g)
            ms *= self.decay
            ms += (1 - self.decay) * g * g
            self.store.data[k] -= (lr * g / (np.sqrt(ms) + self.eps)).astype(self.store.dtype)
        self.store.bump()


def _touched(graphs) -> dict[str, np.ndarray]:
    masks: dict[str, np.ndarray] = {}
    for g in graphs:
        for p in g.parameters().values():
            m = masks.get(p.key)
            if m is None:
                m = masks[p.key] = np.zeros(p.store.data[p.key].shape, dtype=bool)
            m[p.index] = True
    return masks


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def joint_update(graphs, batches_xy, balance: BoostingSchedule, progress: float,
                 optimizer: RMSProp, lr: float, weight_decay: float):
    """Boosted joint loss over the domains, one backward in domain order, one step.

    ``graphs`` must already hold the forward pass of their training batch;
    ``batches_xy`` carries (logits, labels) per domain.
    """
    losses, grads = [], []
    for logits, labels in batches_xy:
        loss, dlogits = nn.softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss):
            raise SearchError(f"non-finite training loss {loss}")
        losses.append(loss)
        grads.append(dlogits)
    total, weights = transform_losses(losses, balance, progress)
    masks = _touched(graphs)
    store = optimizer.store
    for k in masks:
        store.grad[k].fill(0)
    for g, dl, wgt in zip(graphs, grads, weights):
        g.backward(dl * np.asarray(wgt, dtype=dl.dtype))
    if weight_decay:
        for k, m in masks.items():
            store.grad[k] += (weight_decay * store.data[k] * m).astype(store.dtype)
    optimizer.step(lr, sorted(masks))
    return losses, weights, total


@dataclass
class SearchResult:
    paths: list[PathSelection]
    supernet: SuperNetwork
    controllers: list[DomainController]
    metrics: list[dict]
    forward_passes: int = 0
    trials: list[list[PathSelection]] = field(default_factory=list)


class SearchState:
    """Super-network, controllers and data streams of one search run."""

    def __init__(self, datasets: Sequence[DomainDataset], spec: SearchSpaceSpec, cfg: SearchConfig,
                 controller_keys: Sequence | None = None, shared_controller: bool = False,
                 reward_fn: Callable | None = None, domain_keys: Sequence | None = None):
        if not datasets:
            raise SearchError("search needs at least one domain")
        self.datasets = list(datasets)
        self.spec = spec
        self.cfg = cfg
        self.points = compile_space(spec)
        self.supernet = SuperNetwork(spec, derive_seed(cfg.seed, "weights"), cfg.resolution)
        self.calibration = cost.default_calibration(spec, cfg.resolution, cfg.reward.target_latency)
        n_ctrl = 1 if shared_controller else len(datasets)
        keys = list(controller_keys) if controller_keys is not None else list(range(n_ctrl))
        self.controllers = [DomainController(self.points, cfg.controller_lr, cfg.baseline_momentum)
                            for _ in range(n_ctrl)]
        self.controller_rngs = [derive_rng(cfg.seed, "controller", k) for k in keys]
        self.shared = shared_controller
        # batch order is keyed by domain name unless explicit keys are given
        dkeys = list(domain_keys) if domain_keys is not None else [d.name for d in datasets]
        self.train_streams = [BatchStream(d, "train", cfg.search_batch, derive_rng(cfg.seed, "search-train", k))
                              for d, k in zip(datasets, dkeys)]
        self.val_streams = [BatchStream(d, "validation", cfg.validation_batch,
                                        derive_rng(cfg.seed, "search-val", k)) for d, k in zip(datasets, dkeys)]
        self.optimizer = RMSProp(self.supernet.store, cfg.rmsprop_decay, cfg.rmsprop_eps)
        self.step = 0
        self.forward_passes = 0
        self.metrics: list[dict] = []
        # test hook: replaces the accuracy-based reward with reward_fn(domain, path)
        self.reward_fn = reward_fn

    def latency(self, path: PathSelection) -> float:
        return cost.latency_estimate(self.spec, path, self.calibration, self.cfg.resolution)


def search_step(state: SearchState) -> list[dict]:
    cfg = state.cfg
    total = cfg.search_steps
    progress = state.step / max(total - 1, 1)
    sampled = [c.sample_path(r) for c, r in zip(state.controllers, state.controller_rngs)]
    graphs, outs, qualities, rewards, latencies = [], [], [], [], []
    for i, ds in enumerate(state.datasets):
        path = sampled[0 if state.shared else i][0]
        g = state.supernet.instantiate(path, ds.class_count, ds.name, ds.channels)
        xv, yv = state.val_streams[i].next()
        q = _accuracy(g.forward(xv), yv)
        xt, yt = state.train_streams[i].next()
        logits = g.forward(xt)
        state.forward_passes += 2
        t = state.latency(path)
        r = state.reward_fn(i, path) if state.reward_fn else cost.reward(q, t, cfg.reward)
        graphs.append(g)
        outs.append((logits, yt))
        qualities.append(q)
        latencies.append(t)
        rewards.append(r)
    lr = cosine_lr(cfg.search_lr, state.step, total)
    losses, weights, _ = joint_update(graphs, outs, cfg.balance, progress, state.optimizer, lr,
                                      cfg.weight_decay)
    if state.shared:
        if state.reward_fn:
            ctrl_rewards = [float(np.mean(rewards))]
        else:
            ctrl_rewards = [cost.reward(float(np.mean(qualities)), latencies[0], cfg.reward)]
    else:
        ctrl_rewards = rewards
    frozen = state.step < cfg.warmup_steps
    for c, (path, _), r in zip(state.controllers, sampled, ctrl_rewards):
        if frozen:
            c.observe(r)
        else:
            c.reinforce_update(path, r)
    w = coefficient(cfg.balance, progress) if cfg.balance.kind == "exponential" else None
    records = []
    for i, ds in enumerate(state.datasets):
        c = state.controllers[0 if state.shared else i]
        path = sampled[0 if state.shared else i][0]
        records.append({
            "phase": "search",
            "epoch": state.step // cfg.steps_per_epoch,
            "step": state.step,
            "domain": ds.name,
            "loss": losses[i],
            "quality": qualities[i],
            "reward": rewards[i],
            "latency": latencies[i],
            "w": w,
            "domain_weight": weights[i],
            "path": path.digest(),
            "entropy": c.entropy(),
            "controller_frozen": frozen,
        })
    state.metrics.extend(records)
    state.step += 1
    return records


def finalize_search(state: SearchState) -> tuple[list[PathSelection], JointModel]:
    if state.shared:
        paths = [state.controllers[0].most_likely_path()] * len(state.datasets)
    else:
        paths = [c.most_likely_path() for c in state.controllers]
    return paths, merge_for(state.supernet, paths, state.datasets)


def merge_for(supernet: SuperNetwork, paths, datasets) -> JointModel:
    return merge(supernet, paths, [d.class_count for d in datasets], [d.name for d in datasets],
                 [d.channels for d in datasets])


def _run_controller_search(datasets, spec, cfg, shared=False, on_step=None, **kw) -> SearchResult:
    state = SearchState(datasets, spec, cfg, shared_controller=shared, **kw)
    for _ in range(cfg.search_steps):
        recs = search_step(state)
        if on_step:
            on_step(recs)
    paths, _ = finalize_search(state)
    return SearchResult(paths, state.supernet, state.controllers, state.metrics, state.forward_passes)


def sp_reference_path(datasets, spec, cfg) -> PathSelection:
    """Backbone for the single-path baseline: configured, else searched on the first domain."""
    points = compile_space(spec)
    if cfg.sp_path is not None:
        return PathSelection.from_mapping(points, cfg.sp_path)
    res = _run_controller_search(datasets[:1], spec, replace(cfg, mode="mpnas"))
    return res.paths[0]


def mrp_paths(spec, n_domains: int, seed: int, trials: int) -> list[list[PathSelection]]:
    points = compile_space(spec)
    out = []
    for t in range(trials):
        rng = derive_rng(seed, "mrp", t)
        out.append([uniform_random_path(points, rng) for _ in range(n_domains)])
    return out


def search(datasets: Sequence[DomainDataset], spec: SearchSpaceSpec, cfg: SearchConfig,
           on_step=None) -> SearchResult:
    """Run the configured mode's search phase and return one path per domain."""
    datasets = list(datasets)
    if cfg.mode == "mpnas":
        return _run_controller_search(datasets, spec, cfg, on_step=on_step)
    if cfg.mode == "mdsp":
        return _run_controller_search(datasets, spec, cfg, shared=True, on_step=on_step)
    if cfg.mode == "sdnas":
        paths, metrics, ctrls, passes = [], [], [], 0
        for i, ds in enumerate(datasets):
            sub = replace(cfg, seed=derive_seed(cfg.seed, "sdnas", ds.name))
            res = _run_controller_search([ds], spec, sub, on_step=on_step)
            paths += res.paths
            metrics += res.metrics
            ctrls += res.controllers
            passes += res.forward_passes
        supernet = SuperNetwork(spec, derive_seed(cfg.seed, "weights"), cfg.resolution)
        return SearchResult(paths, supernet, ctrls, metrics, passes)
    supernet = SuperNetwork(spec, derive_seed(cfg.seed, "weights"), cfg.resolution)
    if cfg.mode == "sp":
        path = sp_reference_path(datasets, spec, cfg)
        return SearchResult([path] * len(datasets), supernet, [], [])
    trials = mrp_paths(spec, len(datasets), cfg.seed, cfg.mrp_trials)
    return SearchResult(list(trials[0]), supernet, [], [], trials=trials)


# ---------------------------------------------------------------------------
# Final training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    joint: JointModel
    metrics: list[dict]
    validation: list[float]
    test: list[float]

    @property
    def mean_validation(self) -> float:
        return float(np.mean(self.validation))

    @property
    def mean_test(self) -> float:
        return float(np.mean(self.test))


def evaluate(joint: JointModel, datasets: Sequence[DomainDataset], split: str,
             batch: int = 256) -> list[float]:
    accs = []
    for i, ds in enumerate(datasets):
        x, y = ds.split(split)
        if len(y) == 0:
            accs.append(float("nan"))
            continue
        correct = 0
        for s in range(0, len(y), batch):
            logits = joint.domain_forward(i, x[s:s + batch])
            correct += int(np.sum(np.argmax(logits, axis=1) == y[s:s + batch]))
        accs.append(correct / len(y))
    return accs


def train_joint(joint: JointModel, datasets: Sequence[DomainDataset], cfg: SearchConfig,
                fresh: bool = True, on_step=None) -> TrainResult:
    """Train the merged model on all domains with the boosted joint loss."""
    datasets = list(datasets)
    if len(datasets) != len(joint.graphs):
        raise SearchError("one dataset per joint-model domain is required")
    if fresh:
        joint.reinitialize(derive_seed(cfg.seed, "train-weights"))
    streams = [BatchStream(d, "train", cfg.train_batch, derive_rng(cfg.seed, "final-train", d.name))
               for d in datasets]
    opt = RMSProp(joint.store, cfg.rmsprop_decay, cfg.rmsprop_eps)
    total = cfg.train_steps
    metrics = []
    for step in range(total):
        progress = step / max(total - 1, 1)
        outs = []
        for g, s in zip(joint.graphs, streams):
            x, y = s.next()
            outs.append((g.forward(x), y))
        lr = cosine_lr(cfg.train_lr, step, total)
        losses, weights, _ = joint_update(joint.graphs, outs, cfg.balance, progress, opt, lr,
                                          cfg.weight_decay)
        w = coefficient(cfg.balance, progress) if cfg.balance.kind == "exponential" else None
        recs = [{"phase": "train", "epoch": step // cfg.train_steps_per_epoch, "step": step,
                 "domain": d.name, "loss": l, "w": w, "domain_weight": dw}
                for d, l, dw in zip(datasets, losses, weights)]
        metrics.extend(recs)
        if on_step:
            on_step(recs)
    return TrainResult(joint, metrics, evaluate(joint, datasets, "validation"),
                       evaluate(joint, datasets, "test"))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineResult:
    mode: str
    paths: list[list[PathSelection]]  # one list per trial
    validation: list[list[float]]
    test: list[list[float]]
    params: list[int]
    flops: list[int]

    @property
    def mean_validation(self) -> float:
        return float(np.mean([np.mean(v) for v in self.validation]))

    @property
    def mean_test(self) -> float:
        return float(np.mean([np.mean(v) for v in self.test]))

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "trials": len(self.paths),
            "mean_validation": self.mean_validation,
            "mean_test": self.mean_test,
            "params": float(np.mean(self.params)),
            "flops": float(np.mean(self.flops)),
        }


def bundle_train(paths, datasets, spec, cfg) -> tuple[list[float], list[float], int]:
    """Train every domain as its own single-domain model (no sharing)."""
    val, test, params = [], [], 0
    for path, ds in zip(paths, datasets):
        sub = replace(cfg, seed=derive_seed(cfg.seed, "bundle", ds.name))
        sn = SuperNetwork(spec, derive_seed(sub.seed, "weights"), cfg.resolution)
        joint = merge_for(sn, [path], [ds])
        res = train_joint(joint, [ds], sub)
        val += res.validation
        test += res.test
        params += joint.param_count()
    return val, test, params


def run_baseline(mode: str, datasets: Sequence[DomainDataset], spec: SearchSpaceSpec,
                 cfg: SearchConfig) -> BaselineResult:
    """Search (if the mode has a search) and train, returning accuracy and cost."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    datasets = list(datasets)
    cfg = replace(cfg, mode=mode)
    res = search(datasets, spec, cfg)
    trials = res.trials or [res.paths]
    out = BaselineResult(mode, [], [], [], [], [])
    for t, paths in enumerate(trials):
        flops = cost.joint_flops(spec, paths, cfg.resolution)
        if mode == "sdnas":
            val, test, params = bundle_train(paths, datasets, spec, cfg)
        else:
            sub = cfg if len(trials) == 1 else replace(cfg, seed=derive_seed(cfg.seed, "trial", t))
            joint = merge_for(res.supernet, paths, datasets)
            tr = train_joint(joint, datasets, sub)
            val, test, params = tr.validation, tr.test, joint.param_count()
        out.paths.append(list(paths))
        out.validation.append(val)
        out.test.append(test)
        out.params.append(params)
        out.flops.append(flops)
    return out


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
