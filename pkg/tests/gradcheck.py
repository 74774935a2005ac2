"""Central finite-difference checks for layers over a float64 weight store."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mpnas import nn

EPS = 1e-3
TOL = 1e-3
# relative error denominator floor: below this magnitude both values are treated as zero-ish
FLOOR = 1e-4


def rel_error(a: float, n: float, floor: float = FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def param(store: nn.WeightStore, name: str, arr: np.ndarray) -> nn.Param:
    store.data[name] = np.array(arr, dtype=np.float64)
    store.grad[name] = np.zeros_like(store.data[name])
    return nn.Param(store, name)


@dataclass
class CheckResult:
    errors: list[tuple[str, tuple, float]] = field(default_factory=list)
    checked: int = 0

    @property
    def worst(self) -> float:
        return max((e for _, _, e in self.errors), default=0.0)


def _coords(shape, rng, limit):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(limit, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_layer(layer: nn.Layer, store: nn.WeightStore, x: np.ndarray, rng: np.random.Generator,
                eps: float = EPS, max_coords: int = 10) -> CheckResult:
    """Compare backward() against central differences of L = sum(forward(x) * R)."""
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x)
    r = rng.standard_normal(out.shape)
    store.zero_grad()
    layer.forward(x)
    dx = layer.backward(r)

    def loss_x(xv):
        return float(np.sum(layer.forward(xv) * r))

    res = CheckResult()

    def numeric(arr, idx, h):
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_x(x)
        arr[idx] = old - h
        lm = loss_x(x)
        arr[idx] = old
        return (lp - lm) / (2 * h)

    targets = [("input", x, dx)]
    for name in sorted(store.data):
        targets.append((name, store.data[name], store.grad[name].copy()))
    for name, arr, analytic in targets:
        for idx in _coords(arr.shape, rng, max_coords):
            n1 = numeric(arr, idx, eps)
            res.checked += 1
            res.errors.append((name, idx, rel_error(float(analytic[idx]), n1)))
    return res


# ---------------------------------------------------------------------------
# Cases shared by the unit tests and the acceptance suite
# ---------------------------------------------------------------------------

def _away_from(x: np.ndarray, kinks, margin: float = 0.05) -> np.ndarray:
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * margin * 2
    return x


def primitive_case(kind: str, rng: np.random.Generator):
    """(layer, store, input) for one random instance of a primitive, kinks kept at a distance."""
    store = nn.WeightStore(np.float64)
    b = 2
    if kind == "relu":
        return nn.ReLU(), store, _away_from(rng.standard_normal((b, 3, 4, 4)), [0.0])
    if kind == "hard_swish":
        return nn.HardSwish(), store, _away_from(rng.uniform(-5, 5, (b, 3, 4, 4)), [-3.0, 3.0])
    if kind == "pointwise":
        cin, cout = rng.integers(1, 6, size=2)
        layer = nn.PointwiseConv(param(store, "w", rng.standard_normal((cout, cin))))
        return layer, store, rng.standard_normal((b, cin, 4, 4))
    if kind == "depthwise":
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(3, 8))
        layer = nn.DepthwiseConv(param(store, "w", rng.standard_normal((c, k, k))), stride)
        return layer, store, rng.standard_normal((b, c, h, h))
    if kind == "squeeze_excite":
        c, r = int(rng.integers(2, 6)), int(rng.integers(1, 3))
        while True:
            layer = nn.SqueezeExcite(param(store, "w1", rng.standard_normal((r, c))),
                                     param(store, "b1", rng.standard_normal(r)),
                                     param(store, "w2", rng.standard_normal((c, r))),
                                     param(store, "b2", rng.standard_normal(c)))
            x = rng.standard_normal((b, c, 4, 4))
            layer.forward(x)
            if kink_margin(layer) >= 0.05:
                return layer, store, x
    if kind == "global_pool":
        return nn.GlobalAveragePool(), store, rng.standard_normal((b, 3, 4, 5))
    if kind == "dense":
        m, n = rng.integers(1, 6, size=2)
        layer = nn.Dense(param(store, "w", rng.standard_normal((n, m))), param(store, "b", rng.standard_normal(n)))
        return layer, store, rng.standard_normal((b, m))
    raise ValueError(kind)


PRIMITIVES = ("relu", "hard_swish", "pointwise", "depthwise", "squeeze_excite", "global_pool", "dense")


def kink_margin(layer: nn.Layer) -> float:
    """Smallest distance of any cached pre-activation to a kink, after a forward."""
    layers = list(layer.iter_layers()) if isinstance(layer, nn.Sequential) else [layer]
    m = np.inf
    for lyr in layers:
        if isinstance(lyr, nn.HardSwish):
            x = lyr._x
            m = min(m, np.abs(x - 3).min(), np.abs(x + 3).min())
        elif isinstance(lyr, nn.SqueezeExcite):
            _, _, z1, _, z2, _ = lyr._cache
            m = min(m, np.abs(z1).min(), np.abs(z2 - 3).min(), np.abs(z2 + 3).min())
    return float(m)


def block_case(rng: np.random.Generator, margin: float = 0.05, tries: int = 50):
    """A random inverted-bottleneck layer over its own float64 store.

    Draws are repeated until every pre-activation is at least ``margin`` away
    from a kink, so central differences see a smooth function.
    """
    from mpnas.space import BlockSpec, SearchSpaceSpec
    from mpnas.supernet import LayerPlan, _Builder

    k = int(rng.choice([3, 5]))
    e = int(rng.choice([1, 3, 6]))
    se = bool(rng.integers(2))
    stride = int(rng.choice([1, 2]))
    cin = int(rng.integers(2, 5))
    cout = cin if rng.random() < 0.5 else int(rng.integers(2, 6))
    spec = SearchSpaceSpec((BlockSpec((1,), (k,), (e,), (cout,), (se,), stride),), stem_channels=cin)
    hw = int(rng.integers(4, 7))
    plan = LayerPlan(0, 0, k, e, se, 0, cin, cout, stride, (hw, hw))
    for _ in range(tries):
        store = nn.WeightStore(np.float64)
        layer = _Builder(spec, store, int(rng.integers(1 << 30)), hw, create=True).layer(plan)
        for name, arr in store.data.items():
            if name.endswith(("_b1", "_b2")):
                arr[...] = rng.standard_normal(arr.shape)
            else:
                arr *= 0.5
        x = rng.standard_normal((2, cin, hw, hw))
        layer.forward(x)
        if kink_margin(layer) >= margin:
            return layer, store, x, plan
    raise RuntimeError("could not draw a kink-free block instance")


def softmax_ce_check(rng: np.random.Generator, eps: float = EPS) -> float:
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    logits = rng.standard_normal((n, c)) * 2
    labels = rng.integers(0, c, size=n)
    _, g = nn.softmax_cross_entropy(logits, labels)
    worst = 0.0
    for idx in np.ndindex(logits.shape):
        old = logits[idx]
        logits[idx] = old + eps
        lp, _ = nn.softmax_cross_entropy(logits, labels)
        logits[idx] = old - eps
        lm, _ = nn.softmax_cross_entropy(logits, labels)
        logits[idx] = old
        worst = max(worst, rel_error(float(g[idx]), (lp - lm) / (2 * eps)))
    return worst
