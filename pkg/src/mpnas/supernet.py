"""Weight-sharing super-network, per-domain paths and the merged joint model.

A candidate node is one concrete inverted-bottleneck layer option inside a
block, identified as ``b{block}.l{layer}.k{kernel}.e{expansion}.se{0|1}.f{filter_index}``.
Nodes that differ only in filter option share one weight store sized to the
widest option; narrower options use a prefix slice of the channels. Each
domain additionally owns an unshared stem and classification head.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .space import DecisionPoint, SearchSpaceSpec, compile_space


class PathError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathSelection:
    """One option index per decision point, stored in compile order."""

    items: tuple[tuple[str, int], ...]

    @classmethod
    def from_mapping(cls, points: Sequence[DecisionPoint], choices: Mapping[str, int]) -> "PathSelection":
        ids = [p.id for p in points]
        extra = set(choices) - set(ids)
        if extra:
            raise PathError(f"unknown decision points: {sorted(extra)}")
        missing = [i for i in ids if i not in choices]
        if missing:
            raise PathError(f"path is missing decisions: {missing}")
        path = cls(tuple((p.id, int(choices[p.id])) for p in points))
        path.validate(points)
        return path

    @classmethod
    def from_indices(cls, points: Sequence[DecisionPoint], indices: Iterable[int]) -> "PathSelection":
        indices = [int(i) for i in indices]
        if len(indices) != len(points):
            raise PathError("one index per decision point is required")
        return cls.from_mapping(points, {p.id: i for p, i in zip(points, indices)})

    def validate(self, points: Sequence[DecisionPoint]) -> None:
        if [k for k, _ in self.items] != [p.id for p in points]:
            raise PathError("path does not cover the compiled decision points in order")
        for (key, idx), p in zip(self.items, points):
            if not 0 <= idx < p.arity:
                raise PathError(f"{key}: option {idx} out of range for arity {p.arity}")

    def __getitem__(self, key: str) -> int:
        for k, v in self.items:
            if k == key:
                return v
        raise KeyError(key)

    @property
    def indices(self) -> list[int]:
        return [v for _, v in self.items]

    def to_dict(self) -> dict[str, int]:
        return dict(self.items)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.items).encode()).hexdigest()[:12]


def uniform_random_path(points: Sequence[DecisionPoint], rng: np.random.Generator) -> PathSelection:
    return PathSelection.from_indices(points, [int(rng.integers(p.arity)) for p in points])


# ---------------------------------------------------------------------------
# Layer plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerPlan:
    block: int
    layer: int
    kernel: int
    expansion: int
    se: bool
    filter_index: int
    cin: int
    cout: int
    stride: int
    in_hw: tuple[int, int]

    @property
    def hidden(self) -> int:
        return self.cin * self.expansion

    @property
    def se_reduce(self) -> int:
        return max(1, self.hidden // 4)

    @property
    def out_hw(self) -> tuple[int, int]:
        return (-(-self.in_hw[0] // self.stride), -(-self.in_hw[1] // self.stride))

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.cin == self.cout

    @property
    def store_key(self) -> str:
        return f"b{self.block}.l{self.layer}.k{self.kernel}.e{self.expansion}.se{int(self.se)}"

    @property
    def node_id(self) -> str:
        return f"{self.store_key}.f{self.filter_index}"


def plan_path(spec: SearchSpaceSpec, path: PathSelection, resolution: int = 16) -> list[LayerPlan]:
    """Trace channel widths and spatial sizes through the selected layers."""
    path.validate(compile_space(spec))
    plans = []
    cin = spec.stem_channels
    hw = (resolution, resolution)
    for b, block in enumerate(spec.blocks):
        n_layers = block.layer_choices[path[f"b{b}.layers"]]
        k = block.kernel_choices[path[f"b{b}.kernel"]]
        e = block.expansion_choices[path[f"b{b}.expansion"]]
        fi = path[f"b{b}.filters"]
        f = block.filter_choices[fi]
        se = block.se_choices[path[f"b{b}.se"]]
        for layer in range(n_layers):
            stride = block.stride if layer == 0 else 1
            plan = LayerPlan(b, layer, k, e, se, fi, cin, f, stride, hw)
            plans.append(plan)
            cin, hw = f, plan.out_hw
    return plans


def final_width(spec: SearchSpaceSpec, path: PathSelection) -> int:
    plans = plan_path(spec, path)
    return plans[-1].cout if plans else spec.stem_channels


def node_ids(spec: SearchSpaceSpec, path: PathSelection) -> list[str]:
    """Candidate nodes used by a path, heads excluded."""
    return [p.node_id for p in plan_path(spec, path)]


def max_input_width(spec: SearchSpaceSpec, block: int, layer: int) -> int:
    if layer > 0:
        return max(spec.blocks[block].filter_choices)
    widths = [spec.stem_channels]
    for prev in spec.blocks[:block]:
        widths.extend(prev.filter_choices)
    return max(widths)


def max_final_width(spec: SearchSpaceSpec) -> int:
    widths = [spec.stem_channels]
    for block in spec.blocks:
        widths.extend(block.filter_choices)
    return max(widths)


def layer_tensor_extents(plan: LayerPlan) -> dict[str, tuple[int, ...]]:
    """Used (prefix) extent of every weight tensor of one layer."""
    h, r = plan.hidden, plan.se_reduce
    ext = {}
    if plan.expansion > 1:
        ext["expand"] = (h, plan.cin)
    ext["dw"] = (h, plan.kernel, plan.kernel)
    if plan.se:
        ext["se_w1"] = (r, h)
        ext["se_b1"] = (r,)
        ext["se_w2"] = (h, r)
        ext["se_b2"] = (h,)
    ext["project"] = (plan.cout, h)
    return ext


def head_tensor_extents(spec: SearchSpaceSpec, path: PathSelection, classes: int,
                        in_channels: int) -> dict[str, tuple[int, ...]]:
    fw = final_width(spec, path)
    return {
        "stem": (spec.stem_channels, in_channels),
        "fc": (spec.head_hidden, fw),
        "fc_b": (spec.head_hidden,),
        "out": (classes, spec.head_hidden),
        "out_b": (classes,),
    }


def _full_layer_shapes(spec: SearchSpaceSpec, plan: LayerPlan) -> dict[str, tuple[int, ...]]:
    cmax = max_input_width(spec, plan.block, plan.layer)
    hmax = cmax * plan.expansion
    rmax = max(1, hmax // 4)
    omax = max(spec.blocks[plan.block].filter_choices)
    shapes = {}
    if plan.expansion > 1:
        shapes["expand"] = (hmax, cmax)
    shapes["dw"] = (hmax, plan.kernel, plan.kernel)
    if plan.se:
        shapes.update(se_w1=(rmax, hmax), se_b1=(rmax,), se_w2=(hmax, rmax), se_b2=(hmax,))
    shapes["project"] = (omax, hmax)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "dw":
        return shape[1] * shape[2]
    return shape[-1] if len(shape) > 1 else 1


# Hard-swish keeps less variance than ReLU near zero, so weights feeding a
# nonlinearity get variance 2.5/fan_in. Projections get 1.5/fan_in, doubled
# after squeeze-excite to offset its initial gate of about 1/2. Chosen so the
# median initial logit scale over random paths is of order one.
_NONLINEAR_GAIN = 2.5
_PROJECT_GAIN = 1.5
_GAINS = {"se_w1": 2.0, "se_w2": 1.0, "out": 1.0}


def _init_gain(name: str) -> float:
    key, t = name.rsplit("/", 1)
    if t == "project":
        return _PROJECT_GAIN * (2.0 if key.endswith(".se1") else 1.0)
    return _GAINS.get(t, _NONLINEAR_GAIN)


def _key_rng(seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _slices(extent: tuple[int, ...]) -> tuple[slice, ...]:
    return tuple(slice(0, d) for d in extent)


# ---------------------------------------------------------------------------
# Graph construction over a store
# ---------------------------------------------------------------------------

class _Builder:
    """Builds graphs whose parameters are prefix views of a weight store."""

    def __init__(self, spec: SearchSpaceSpec, store: nn.WeightStore, seed: int,
                 resolution: int, create: bool):
        self.spec = spec
        self.store = store
        self.seed = seed
        self.resolution = resolution
        self.create = create

    def _param(self, name: str, full_shape: tuple[int, ...], extent: tuple[int, ...], kind="weight") -> nn.Param:
        if name not in self.store:
            if not self.create:
                raise PathError(f"weight {name} is not part of this model")
            self.store.create(name, full_shape, _fan_in(name.rsplit("/", 1)[-1], full_shape),
                              _key_rng(self.seed, name), kind,
                              _init_gain(name))
        return nn.Param(self.store, name, _slices(extent))

    def layer(self, plan: LayerPlan) -> nn.Layer:
        full = _full_layer_shapes(self.spec, plan)
        ext = layer_tensor_extents(plan)
        key = plan.store_key

        def p(t, kind="weight"):
            return self._param(f"{key}/{t}", full[t], ext[t], kind)

        ops: list[nn.Layer] = []
        if plan.expansion > 1:
            ops += [nn.PointwiseConv(p("expand")), nn.HardSwish()]
        ops += [nn.DepthwiseConv(p("dw"), plan.stride), nn.HardSwish()]
        if plan.se:
            ops.append(nn.SqueezeExcite(p("se_w1"), p("se_b1", "bias"), p("se_w2"), p("se_b2", "bias")))
        ops.append(nn.PointwiseConv(p("project")))
        return nn.Residual(ops) if plan.residual else nn.Sequential(ops)

    def graph(self, path: PathSelection, domain: str, classes: int, in_channels: int) -> nn.ComputeGraph:
        if classes < 1 or in_channels < 1:
            raise ValueError("classes and in_channels must be positive")
        plans = plan_path(self.spec, path, self.resolution)
        head = head_tensor_extents(self.spec, path, classes, in_channels)
        fw_max = max_final_width(self.spec)
        pre = f"head.{domain}"
        full = {
            "stem": head["stem"],
            "fc": (self.spec.head_hidden, fw_max),
            "fc_b": head["fc_b"],
            "out": head["out"],
            "out_b": head["out_b"],
        }

        def hp(t, kind="weight"):
            return self._param(f"{pre}/{t}", full[t], head[t], kind)

        layers: list[nn.Layer] = [nn.FixedAffine(), nn.PointwiseConv(hp("stem")), nn.HardSwish()]
        layers += [self.layer(pl) for pl in plans]
        layers += [
            nn.GlobalAveragePool(),
            nn.Dense(hp("fc"), hp("fc_b", "bias")),
            nn.HardSwish(),
            nn.Dense(hp("out"), hp("out_b", "bias")),
        ]
        g = nn.ComputeGraph(nn.Sequential(layers), (in_channels, self.resolution, self.resolution), self.store)
        g.plans = plans
        g.n_backbone = len(plans)
        return g


class SuperNetwork:
    """All candidate nodes of a compiled space over one shared weight store.

    Backbone stores are allocated eagerly at their widest shapes; per-domain
    stems and heads are allocated on first use.
    """

    def __init__(self, spec: SearchSpaceSpec, seed: int = 0, resolution: int = 16, dtype=nn.DTYPE):
        self.spec = spec.validate()
        self.points = compile_space(spec)
        self.seed = seed
        self.resolution = resolution
        self.store = nn.WeightStore(dtype)
        self._builder = _Builder(spec, self.store, seed, resolution, create=True)
        for plan in self._all_layer_variants():
            for t, shape in _full_layer_shapes(spec, plan).items():
                name = f"{plan.store_key}/{t}"
                kind = "bias" if t.endswith("_b1") or t.endswith("_b2") else "weight"
                self.store.create(name, shape, _fan_in(t, shape), _key_rng(seed, name), kind,
                                  _init_gain(name))

    def _all_layer_variants(self) -> list[LayerPlan]:
        out = []
        for b, block in enumerate(self.spec.blocks):
            for layer in range(block.max_layers):
                for k in block.kernel_choices:
                    for e in block.expansion_choices:
                        for se in block.se_choices:
                            out.append(LayerPlan(b, layer, k, e, se, 0, 1, 1, 1, (1, 1)))
        return out

    def candidate_stores(self) -> list[str]:
        return sorted({p.store_key for p in self._all_layer_variants()})

    def instantiate(self, path: PathSelection, head_classes: int, domain: str = "d0",
                    in_channels: int = 1) -> nn.ComputeGraph:
        return self._builder.graph(path, domain, head_classes, in_channels)


# ---------------------------------------------------------------------------
# Joint model
# ---------------------------------------------------------------------------

@dataclass
class DomainInfo:
    name: str
    classes: int
    in_channels: int = 1


class JointModel:
    """Union of the selected paths with per-domain heads.

    Only the stores touched by some domain exist; each is cropped to the
    bounding box of the prefixes actually used.
    """

    def __init__(self, spec: SearchSpaceSpec, paths: Sequence[PathSelection],
                 domains: Sequence[DomainInfo], store: nn.WeightStore, resolution: int = 16,
                 seed: int = 0):
        self.spec = spec
        self.paths = list(paths)
        self.domains = list(domains)
        self.store = store
        self.resolution = resolution
        self.seed = seed
        builder = _Builder(spec, store, seed, resolution, create=False)
        self.graphs = [builder.graph(p, d.name, d.classes, d.in_channels)
                       for p, d in zip(self.paths, self.domains)]

    @property
    def node_domains(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, path in enumerate(self.paths):
            for nid in node_ids(self.spec, path):
                out.setdefault(nid, []).append(i)
        return dict(sorted(out.items()))

    def sharing_degree(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.node_domains.items()}

    def domain_forward(self, index: int, batch: np.ndarray) -> np.ndarray:
        if not 0 <= index < len(self.graphs):
            raise IndexError(f"domain index {index} out of range")
        return self.graphs[index].forward(batch)

    def used_elements(self) -> dict[str, np.ndarray]:
        """Boolean mask of the elements some domain reads, per store tensor."""
        masks = {k: np.zeros(v.shape, dtype=bool) for k, v in self.store.data.items()}
        for g in self.graphs:
            for p in g.parameters().values():
                masks[p.key][p.index] = True
        return masks

    def param_count(self, heads: bool = True) -> int:
        return int(sum(m.sum() for k, m in self.used_elements().items()
                       if heads or not k.startswith("head.")))

    def reinitialize(self, seed: int) -> None:
        """Fresh weights, deterministic per (seed, tensor name)."""
        self.seed = seed
        for name, arr in self.store.data.items():
            t = name.rsplit("/", 1)[-1]
            if t in ("se_b1", "se_b2", "fc_b", "out_b"):
                arr[...] = 0
            else:
                # draw at the supernet's full shape so init matches a fresh instantiation
                full = self._full_shape(name)
                bound = nn.init_bound(_fan_in(t, full), _init_gain(name))
                fresh = _key_rng(seed, name).uniform(-bound, bound, size=full)
                arr[...] = fresh[_slices(arr.shape)]
        self.store.zero_grad()
        self.store.bump()

    def _full_shape(self, name: str) -> tuple[int, ...]:
        key, t = name.rsplit("/", 1)
        if key.startswith("head."):
            domain = key[len("head."):]
            info = next(d for d in self.domains if d.name == domain)
            return {
                "stem": (self.spec.stem_channels, info.in_channels),
                "fc": (self.spec.head_hidden, max_final_width(self.spec)),
                "out": (info.classes, self.spec.head_hidden),
            }[t]
        b, l, k, e, se = key.split(".")
        plan = LayerPlan(int(b[1:]), int(l[1:]), int(k[1:]), int(e[1:]), se == "se1", 0, 1, 1, 1, (1, 1))
        return _full_layer_shapes(self.spec, plan)[t]


def _required_extents(spec, paths, domains, resolution) -> dict[str, tuple[int, ...]]:
    boxes: dict[str, tuple[int, ...]] = {}

    def grow(name, ext):
        old = boxes.get(name)
        boxes[name] = ext if old is None else tuple(max(a, b) for a, b in zip(old, ext))

    for path, d in zip(paths, domains):
        for plan in plan_path(spec, path, resolution):
            for t, ext in layer_tensor_extents(plan).items():
                grow(f"{plan.store_key}/{t}", ext)
        for t, ext in head_tensor_extents(spec, path, d.classes, d.in_channels).items():
            grow(f"head.{d.name}/{t}", ext)
    return boxes


def merge(supernet: SuperNetwork, paths: Sequence[PathSelection], head_classes: Sequence[int],
          domain_names: Sequence[str] | None = None,
          in_channels: Sequence[int] | None = None) -> JointModel:
    """Merge one path per domain; weights are copied from the super-network."""
    if not paths:
        raise PathError("merge needs at least one path")
    if len(head_classes) != len(paths):
        raise PathError("one head class count per path is required")
    names = list(domain_names) if domain_names is not None else [f"d{i}" for i in range(len(paths))]
    chans = list(in_channels) if in_channels is not None else [1] * len(paths)
    if len(set(names)) != len(names):
        raise PathError("domain names must be unique")
    for p in paths:
        p.validate(supernet.points)
    domains = [DomainInfo(n, int(c), int(ch)) for n, c, ch in zip(names, head_classes, chans)]
    # make sure heads exist in the super-network, then copy the needed boxes
    for path, d in zip(paths, domains):
        supernet.instantiate(path, d.classes, d.name, d.in_channels)
    boxes = _required_extents(supernet.spec, paths, domains, supernet.resolution)
    store = nn.WeightStore(supernet.store.dtype)
    for name, ext in sorted(boxes.items()):
        store.data[name] = supernet.store.data[name][_slices(ext)].copy()
        store.grad[name] = np.zeros_like(store.data[name])
    return JointModel(supernet.spec, paths, domains, store, supernet.resolution, supernet.seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MPNASCK1"


def save_weights(store: nn.WeightStore, path: str | Path) -> None:
    """Named-parameter archive: magic, u32 header length, JSON header, raw <f4 data."""
    header, chunks, offset = {}, [], 0
    for name in sorted(store.data):
        raw = np.ascontiguousarray(store.data[name], dtype="<f4").tobytes()
        header[name] = {"shape": list(store.data[name].shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_weights(path: str | Path) -> nn.WeightStore:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a weight archive")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    store = nn.WeightStore()
    for name, meta in header.items():
        start = base + meta["offset"]
        arr = np.frombuffer(raw[start:start + meta["nbytes"]], dtype="<f4").reshape(meta["shape"])
        store.data[name] = arr.astype(nn.DTYPE)
        store.grad[name] = np.zeros_like(store.data[name])
    return store


def save_joint(joint: JointModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(joint.store, directory / "weights.bin")
    manifest = {
        "space": joint.spec.to_dict(),
        "space_digest": joint.spec.digest(),
        "resolution": joint.resolution,
        "seed": joint.seed,
        "domains": [
            {"name": d.name, "classes": d.classes, "in_channels": d.in_channels, "path": p.to_dict()}
            for d, p in zip(joint.domains, joint.paths)
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_joint(directory: str | Path) -> JointModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = SearchSpaceSpec.from_dict(manifest["space"])
    if spec.digest() != manifest["space_digest"]:
        raise ValueError("checkpoint search-space digest mismatch")
    points = compile_space(spec)
    paths = [PathSelection.from_mapping(points, d["path"]) for d in manifest["domains"]]
    domains = [DomainInfo(d["name"], d["classes"], d["in_channels"]) for d in manifest["domains"]]
    store = load_weights(directory / "weights.bin")
    return JointModel(spec, paths, domains, store, manifest["resolution"], manifest["seed"])
